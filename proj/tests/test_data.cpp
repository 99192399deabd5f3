// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "support.hpp"
#include "triformer/checkpoint.hpp"
#include "triformer/data.hpp"
#include "triformer/train.hpp"

using namespace triformer;
namespace fs = std::filesystem;

namespace {

Volume random_volume(std::size_t h, std::size_t w, std::size_t d, std::uint64_t seed) {
  Volume v;
  v.subject_id = "S" + std::to_string(seed);
  v.h = h;
  v.w = w;
  v.d = d;
  v.voxel_size = 1.5;
  v.label = Label::kPMCI;
  v.cohort = "A";
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  v.voxels.resize(v.numel());
  for (auto& x : v.voxels) x = u(rng);
  return v;
}

std::string expect_format_error(const fs::path& stem) {
  try {
    read_volume(stem);
  } catch (const FormatError& e) {
    return e.what();
  }
  FAIL("expected FormatError");
  return {};
}

// Sum over the signal neighbourhood minus the volume mean; the signal blob
// adds about 0.5 * strength at its centre.
double image_evidence(const Subject& s, const SynthSpec& spec) {
  const auto c = signal_center(spec);
  const double r = signal_sigma(spec) + 1.0;
  double inside = 0, all = 0;
  std::size_t n_inside = 0;
  for (std::size_t i = 0; i < s.volume.h; ++i)
    for (std::size_t j = 0; j < s.volume.w; ++j)
      for (std::size_t k = 0; k < s.volume.d; ++k) {
        const double v = s.volume.at(i, j, k);
        all += v;
        const double di = double(i) - double(c[0]), dj = double(j) - double(c[1]), dk = double(k) - double(c[2]);
        if (di * di + dj * dj + dk * dk <= r * r) {
          inside += v;
          ++n_inside;
        }
      }
  return inside / double(n_inside) - all / double(s.volume.numel());
}

// Plug-in Bayes classifier over discrete evidence: P(y = 1 | key).
std::vector<double> bayes_scores(const std::vector<int>& keys, const std::vector<int>& labels) {
  std::map<int, std::pair<double, double>> table;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    table[keys[i]].first += labels[i];
    table[keys[i]].second += 1;
  }
  std::vector<double> out;
  for (int k : keys) out.push_back(table[k].first / table[k].second);
  return out;
}

}  // namespace

TEST_CASE("volume round trip is bit exact", "[data][io]") {
  auto dir = testing::temp_dir("vol");
  for (auto [h, w, d] : {std::tuple{8, 8, 8}, {3, 5, 7}, {16, 4, 1}}) {
    auto v = random_volume(h, w, d, h * 100 + w * 10 + d);
    write_volume(v, dir / v.subject_id);
    auto back = read_volume(dir / v.subject_id);
    CHECK(back.subject_id == v.subject_id);
    CHECK(back.h == v.h);
    CHECK(back.w == v.w);
    CHECK(back.d == v.d);
    CHECK(back.voxel_size == v.voxel_size);
    CHECK(back.label == v.label);
    CHECK(back.cohort == v.cohort);
    CHECK(testing::bitwise_equal(back.voxels, v.voxels));
  }
}

TEST_CASE("volume format errors", "[data][io]") {
  auto dir = testing::temp_dir("volerr");
  auto v = random_volume(8, 8, 8, 1);
  write_volume(v, dir / "v");

  SECTION("truncated payload") {
    fs::resize_file(dir / "v.vol", 8 * 8 * 8 * 4 - 10);
    auto msg = expect_format_error(dir / "v");
    CHECK(msg.find("truncated at byte offset 2038") != std::string::npos);
  }
  SECTION("header extents 16^3 with an 8^3 payload") {
    auto big = random_volume(16, 16, 16, 2);
    write_volume(big, dir / "big");
    fs::copy_file(dir / "v.vol", dir / "big.vol", fs::copy_options::overwrite_existing);
    auto msg = expect_format_error(dir / "big");
    CHECK(msg.find("16x16x16") != std::string::npos);
    CHECK(msg.find("8x8x8") != std::string::npos);
  }
  SECTION("bad magic") {
    std::ifstream in(dir / "v.json");
    std::string text((std::istreambuf_iterator<char>(in)), {});
    in.close();
    text.replace(text.find("triformer-volume"), 16, "something-else!!");
    std::ofstream(dir / "v.json") << text;
    auto msg = expect_format_error(dir / "v");
    CHECK(msg.find("byte offset") != std::string::npos);
  }
  SECTION("malformed header") {
    std::ofstream(dir / "v.json") << "{\"format\": ";
    auto msg = expect_format_error(dir / "v");
    CHECK(msg.find("byte offset") != std::string::npos);
  }
}

TEST_CASE("clinical CSV round trip and validation", "[data][csv]") {
  SynthSpec spec;
  spec.n_smci = spec.n_pmci = 3;
  spec.n_ad = spec.n_cn = 1;
  spec.extent_h = spec.extent_w = spec.extent_d = 4;
  spec.missing_rate = 0.2;
  auto subjects = generate_synthetic(spec);
  std::vector<ClinicalRow> rows;
  for (const auto& s : subjects) rows.push_back({s.id, s.label, s.clinical});
  auto text = format_clinical_csv(rows);
  CHECK(text.rfind(clinical_csv_header(), 0) == 0);
  CHECK(clinical_csv_header() ==
        "subject_id,label,age,gender,education,apoe4,cdrsb,adas11,adas13,mmse,ravlt_immediate,ravlt_learning,"
        "ravlt_forgetting,ravlt_pct_forgetting");
  auto back = parse_clinical_csv(text);
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].subject_id == rows[i].subject_id);
    CHECK(back[i].label == rows[i].label);
    CHECK(back[i].record.missing == rows[i].record.missing);
    for (std::size_t m = 0; m < kClinicalModalities; ++m)
      if (!rows[i].record.missing[m]) CHECK(back[i].record.values[m] == rows[i].record.values[m]);
  }

  const std::string header = clinical_csv_header() + "\n";
  CHECK_THROWS_AS(parse_clinical_csv(header + "a,sMCI,1,2\n", "x.csv"), ValidationError);
  CHECK_THROWS_AS(parse_clinical_csv(header + "a,MCI,1,0,1,1,1,1,1,1,1,1,1,1\n"), ValidationError);
  CHECK_THROWS_AS(parse_clinical_csv(header + "a,sMCI,1,0,1,1,1,1,1,1,1,1,1,1\na,sMCI,1,0,1,1,1,1,1,1,1,1,1,1\n"),
                  ValidationError);
  try {
    parse_clinical_csv(header + "a,sMCI,1,0,1,1,x,1,1,1,1,1,1,1\n", "meta.csv");
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    std::string msg = e.what();
    CHECK(msg.find("meta.csv:2") != std::string::npos);
    CHECK(msg.find("cdrsb") != std::string::npos);
  }
}

TEST_CASE("dataset directory round trip and hash", "[data][io]") {
  auto dir = testing::temp_dir("dataset");
  SynthSpec spec;
  spec.n_smci = spec.n_pmci = 4;
  spec.extent_h = spec.extent_w = spec.extent_d = 8;
  spec.cohorts = {"A", "B"};
  auto subjects = generate_synthetic(spec);
  write_dataset(dir / "one", subjects);
  write_dataset(dir / "two", generate_synthetic(spec));
  CHECK(dataset_hash(dir / "one") == dataset_hash(dir / "two"));
  CHECK(fs::exists(dir / "one" / "meta.csv"));
  CHECK(fs::exists(dir / "one" / "volumes" / (subjects[0].id + ".vol")));
  CHECK(fs::exists(dir / "one" / "volumes" / (subjects[0].id + ".json")));

  auto back = read_dataset(dir / "one");
  REQUIRE(back.size() == subjects.size());
  std::map<std::string, const Subject*> by_id;
  for (const auto& s : back) by_id[s.id] = &s;
  for (const auto& s : subjects) {
    REQUIRE(by_id.count(s.id));
    const auto& b = *by_id[s.id];
    CHECK(b.label == s.label);
    CHECK(b.cohort == s.cohort);
    CHECK(b.clinical.values == s.clinical.values);
    CHECK(testing::bitwise_equal(b.volume.voxels, s.volume.voxels));
  }

  spec.seed = 1;
  write_dataset(dir / "three", generate_synthetic(spec));
  CHECK(dataset_hash(dir / "three") != dataset_hash(dir / "one"));
  CHECK_THROWS_AS(read_dataset(dir / "missing"), ValidationError);
}

TEST_CASE("flip is an involution and augmentation keeps extents and range", "[data][augment]") {
  auto v = random_volume(4, 6, 5, 3);
  for (FlipAxis axis : {FlipAxis::kCoronal, FlipAxis::kSagittal, FlipAxis::kAxial}) {
    auto once = flip(v, axis);
    CHECK_FALSE(testing::bitwise_equal(once.voxels, v.voxels));
    CHECK(testing::bitwise_equal(flip(once, axis).voxels, v.voxels));
  }
  auto f = flip(v, FlipAxis::kSagittal);
  CHECK(f.at(1, 0, 2) == v.at(1, 5, 2));

  std::mt19937_64 rng(4);
  AugmentConfig always;
  always.flip_prob = 1.0;
  always.noise_sigma = 0.0;
  CHECK(testing::bitwise_equal(augment(augment(v, always, rng), always, rng).voxels, v.voxels));

  AugmentConfig identity;
  identity.flip_prob = 0.0;
  identity.noise_sigma = 0.0;
  CHECK(testing::bitwise_equal(augment(v, identity, rng).voxels, v.voxels));

  AugmentConfig loud;
  loud.noise_sigma = 0.5;
  for (int i = 0; i < 20; ++i) {
    auto a = augment(v, loud, rng);
    CHECK(a.h == v.h);
    CHECK(a.w == v.w);
    CHECK(a.d == v.d);
    CHECK(std::all_of(a.voxels.begin(), a.voxels.end(), [](float x) { return x >= 0.0f && x <= 1.0f; }));
  }
}

TEST_CASE("augmentation noise statistics", "[data][augment]") {
  Volume v;
  v.h = v.w = v.d = 100;
  v.voxels.assign(v.numel(), 0.5f);
  AugmentConfig cfg;
  cfg.flip_prob = 0.0;
  cfg.noise_sigma = 0.01;
  std::mt19937_64 rng(5);
  auto a = augment(v, cfg, rng);
  double sum = 0, sq = 0;
  for (std::size_t i = 0; i < v.numel(); ++i) {
    const double d = double(a.voxels[i]) - double(v.voxels[i]);
    sum += d;
    sq += d * d;
  }
  const double n = double(v.numel());
  const double mean = sum / n;
  const double sd = std::sqrt(sq / n - mean * mean);
  CHECK(std::abs(mean) <= 3 * 0.01 / 1e3);
  CHECK(std::abs(sd - 0.01) <= 0.001);
}

TEST_CASE("AD/CN augmentation", "[data][protocol]") {
  SynthSpec spec;
  spec.n_smci = spec.n_pmci = 5;
  spec.n_ad = spec.n_cn = 5;
  spec.extent_h = spec.extent_w = spec.extent_d = 4;
  auto subjects = generate_synthetic(spec);
  Split train{SplitRole::kTrain, {}};
  std::vector<Subject> pool;
  for (const auto& s : subjects)
    (s.label == Label::kAD || s.label == Label::kCN ? pool : train.subjects).push_back(s);
  auto out = adcn_augment(train, pool);
  CHECK(out.subjects.size() == 20);
  for (std::size_t i = 10; i < 20; ++i) {
    const auto& s = out.subjects[i];
    REQUIRE(s.source_label.has_value());
    CHECK(s.label == (*s.source_label == Label::kAD ? Label::kPMCI : Label::kSMCI));
  }
  Split val{SplitRole::kValidation, train.subjects};
  CHECK_THROWS_AS(adcn_augment(val, pool), ContractError);
  CHECK_THROWS_AS(adcn_augment(train, train.subjects), ContractError);
}

TEST_CASE("synthetic generator is deterministic and validates its spec", "[data][synth]") {
  SynthSpec spec;
  spec.n_smci = spec.n_pmci = 3;
  spec.extent_h = spec.extent_w = spec.extent_d = 8;
  auto a = generate_synthetic(spec);
  auto b = generate_synthetic(spec);
  REQUIRE(a.size() == 6);
  std::set<std::string> ids;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(testing::bitwise_equal(a[i].volume.voxels, b[i].volume.voxels));
    CHECK(a[i].clinical.values == b[i].clinical.values);
    CHECK(std::all_of(a[i].volume.voxels.begin(), a[i].volume.voxels.end(),
                      [](float x) { return x >= 0.0f && x <= 1.0f; }));
    ids.insert(a[i].id);
  }
  CHECK(ids.size() == a.size());

  spec.extent_d = 3;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  try {
    parse_signal_mode("xor");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    for (const char* mode : {"image-only", "clinical-only", "both-redundant", "xor-cross-modal"})
      CHECK(msg.find(mode) != std::string::npos);
  }
  auto text = to_spec_text(SynthSpec{});
  auto parsed = parse_synth_spec(KeyValueFile::parse(text));
  CHECK(to_spec_text(parsed) == text);
}

TEST_CASE("image-only labels are independent of every clinical column", "[data][synth]") {
  SynthSpec spec;
  spec.seed = 8;
  spec.mode = SignalMode::kImageOnly;
  spec.n_smci = spec.n_pmci = 100;
  spec.extent_h = spec.extent_w = spec.extent_d = 4;
  auto subjects = generate_synthetic(spec);
  for (std::size_t m = 0; m < kClinicalModalities; ++m) {
    std::vector<double> column;
    for (const auto& s : subjects) column.push_back(s.clinical.values[m]);
    auto sorted = column;
    std::sort(sorted.begin(), sorted.end());
    const double median = sorted[sorted.size() / 2];
    double table[2][2] = {{0, 0}, {0, 0}};
    for (std::size_t i = 0; i < subjects.size(); ++i) table[target_of(subjects[i])][column[i] > median] += 1;
    const double n = double(subjects.size());
    double chi2 = 0;
    for (int y = 0; y < 2; ++y)
      for (int b = 0; b < 2; ++b) {
        const double expect = (table[y][0] + table[y][1]) * (table[0][b] + table[1][b]) / n;
        if (expect > 0) chi2 += (table[y][b] - expect) * (table[y][b] - expect) / expect;
      }
    INFO(kModalityNames[m] << " chi2 " << chi2);
    CHECK(chi2 < 10.83);  // p = 0.001, one degree of freedom
  }
}

TEST_CASE("xor data defeats single-modality Bayes classifiers but not the joint one", "[data][synth]") {
  for (std::size_t extent : {12u, 16u}) {
    SynthSpec spec;
    spec.seed = 21;
    spec.mode = SignalMode::kXorCrossModal;
    spec.n_smci = spec.n_pmci = 100;
    spec.extent_h = spec.extent_w = spec.extent_d = extent;
    std::vector<SynthTruth> truth;
    auto subjects = generate_synthetic(spec, &truth);

    // Decode each bit from the observations; thresholds come from the
    // generator's parameters.
    double mean_on = 0, mean_off = 0, n_on = 0;
    std::vector<double> evidence;
    for (std::size_t i = 0; i < subjects.size(); ++i) {
      evidence.push_back(image_evidence(subjects[i], spec));
      (truth[i].image_bit ? mean_on : mean_off) += evidence.back();
      n_on += truth[i].image_bit;
    }
    const double threshold = 0.5 * (mean_on / n_on + mean_off / (double(subjects.size()) - n_on));
    const double cdrsb_cut = kCdrsbMean + 0.5 * kCdrsbShift * kCdrsbStd * spec.strength;

    std::vector<int> img, clin, joint, labels;
    std::size_t decode_errors = 0;
    for (std::size_t i = 0; i < subjects.size(); ++i) {
      img.push_back(evidence[i] > threshold);
      clin.push_back(subjects[i].clinical.values[modality_index("cdrsb")] > cdrsb_cut);
      joint.push_back(2 * img.back() + clin.back());
      labels.push_back(target_of(subjects[i]));
      decode_errors += (img.back() != truth[i].image_bit) + (clin.back() != truth[i].clinical_bit);
    }
    INFO("extent " << extent << ", decode errors " << decode_errors);
    const auto image_auc = auc(bayes_scores(img, labels), labels);
    const auto clinical_auc = auc(bayes_scores(clin, labels), labels);
    const auto joint_auc = auc(bayes_scores(joint, labels), labels);
    CHECK(image_auc <= 0.55);
    CHECK(clinical_auc <= 0.55);
    CHECK(joint_auc >= 0.99);
    // Continuous single-modality evidence carries no label information either.
    std::vector<double> cdrsb;
    for (const auto& s : subjects) cdrsb.push_back(s.clinical.values[modality_index("cdrsb")]);
    CHECK(std::abs(auc(evidence, labels) - 0.5) <= 0.1);
    CHECK(std::abs(auc(cdrsb, labels) - 0.5) <= 0.1);
  }
}
