// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>
#include <random>

#include "support.hpp"
#include "triformer/adam.hpp"
#include "triformer/clinical.hpp"
#include "triformer/data.hpp"
#include "triformer/model.hpp"
#include "triformer/train.hpp"

using namespace triformer;
using triformer::testing::Td;

namespace {

std::vector<ClinicalRecord> random_records(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, 5);
  std::vector<ClinicalRecord> out(n);
  for (auto& r : out)
    for (auto& v : r.values) v = g(rng);
  return out;
}

ModelConfig clinical_config() {
  ModelConfig c = ModelConfig::tiny();
  c.variant = Variant::kClinicalTransformer;
  return c;
}

}  // namespace

TEST_CASE("min-max normalisation examples", "[clinical][normalize]") {
  const std::size_t age = modality_index("age");
  const std::size_t gender = modality_index("gender");
  std::vector<ClinicalRecord> train = random_records(2, 1);
  train[0].values[age] = 60;
  train[1].values[age] = 80;
  train[0].values[gender] = 0;
  train[1].values[gender] = 1;
  auto spec = fit_normalizer(train);

  auto probe = train[0];
  for (auto [raw, expect] : {std::pair{60.0, 0.0}, {80.0, 1.0}, {70.0, 0.5}, {90.0, 1.0}, {50.0, 0.0}}) {
    probe.values[age] = raw;
    CHECK(spec.normalize(probe)[age] == expect);
  }
  for (double g : {0.0, 1.0}) {
    probe.values[gender] = g;
    CHECK(spec.normalize(probe)[gender] == g);
  }
}

TEST_CASE("every normalised value lies in [0, 1]", "[clinical][normalize]") {
  auto train = random_records(30, 2);
  auto spec = fit_normalizer(train);
  for (const auto& r : random_records(200, 3))
    for (double v : spec.normalize(r)) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
}

TEST_CASE("degenerate modality is reported by name", "[clinical][normalize]") {
  auto train = random_records(5, 4);
  for (auto& r : train) r.values[modality_index("mmse")] = 28;
  try {
    fit_normalizer(train);
    FAIL("expected DegenerateModalityError");
  } catch (const DegenerateModalityError& e) {
    CHECK(std::string(e.what()).find("mmse") != std::string::npos);
  }
  CHECK_THROWS_AS(modality_index("height"), ValidationError);
}

TEST_CASE("normalisation is idempotent on normalised data", "[clinical][normalize]") {
  auto train = random_records(25, 5);
  auto spec = fit_normalizer(train);
  std::vector<ClinicalRecord> normalized;
  for (const auto& r : train) normalized.push_back(ClinicalRecord::from(spec.normalize(r)));
  auto unit = fit_normalizer(normalized);
  for (const auto& r : normalized) CHECK(unit.normalize(r) == r.values);
}

TEST_CASE("missing values take the training median", "[clinical][normalize]") {
  std::vector<ClinicalRecord> train = random_records(3, 6);
  const std::size_t cdrsb = modality_index("cdrsb");
  train[0].values[cdrsb] = 1;
  train[1].values[cdrsb] = 4;
  train[2].values[cdrsb] = 2;
  train[2].missing[modality_index("age")] = true;
  auto spec = fit_normalizer(train);
  CHECK(spec.median[cdrsb] == 2.0);
  auto probe = train[0];
  probe.missing[cdrsb] = true;
  std::size_t imputed = 0;
  auto out = spec.normalize(probe, &imputed);
  CHECK(imputed == 1);
  CHECK(out[cdrsb] == Catch::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("clinical branch shapes and wrong modality count", "[clinical][branch]") {
  ParameterSet<double> params(7);
  ClinicalBranch<double> branch(ParamScope<double>(params, "clinical"), clinical_config());
  Td x(Shape{12}, 0.5);
  CHECK(branch.project(x).shape() == Shape{12, 16});
  CHECK(branch.sequence(x).shape() == Shape{13, 16});
  auto out = branch.forward(x);
  CHECK(out.tokens.shape() == Shape{13, 16});
  CHECK(out.cls.shape() == Shape{16});
  CHECK_THROWS_AS(branch.forward(Td(Shape{11}, 0.5)), ValidationError);
  CHECK_FALSE(branch.shared_projection());
  CHECK(branch.w2.shape() == Shape{12, 16, 16});

  auto shared_cfg = clinical_config();
  shared_cfg.shared_clinical_projection = true;
  ParameterSet<double> shared_params(7);
  ClinicalBranch<double> shared(ParamScope<double>(shared_params, "clinical"), shared_cfg);
  CHECK(shared.shared_projection());
  CHECK(shared.w2.shape() == Shape{16, 16});
  CHECK(shared.forward(x).cls.shape() == Shape{16});
}

TEST_CASE("identical records give identical class tokens", "[clinical][branch]") {
  ParameterSet<double> params(8);
  ClinicalBranch<double> branch(ParamScope<double>(params, "clinical"), clinical_config());
  std::mt19937_64 rng(9);
  auto a = testing::random_tensor({12}, rng, 0, 1, false);
  auto b = a.clone();
  CHECK(testing::bitwise_equal(branch.forward(a).cls.data(), branch.forward(b).cls.data()));
}

TEST_CASE("each modality only moves its own token before the encoder", "[clinical][branch]") {
  ParameterSet<double> params(10);
  ClinicalBranch<double> branch(ParamScope<double>(params, "clinical"), clinical_config());
  testing::randomize(params, 11);
  std::mt19937_64 rng(12);
  auto base = testing::random_tensor({12}, rng, 0, 1, false);
  auto ref = branch.sequence(base);
  for (std::size_t i = 0; i < 12; ++i) {
    auto moved = base.clone();
    moved.mutable_data()[i] = 1.0 - moved.data()[i] * 0.5;
    auto seq = branch.sequence(moved);
    for (std::size_t t = 0; t < 13; ++t) {
      bool same = true;
      for (std::size_t c = 0; c < 16; ++c) same = same && seq.at({t, c}) == ref.at({t, c});
      // Token 0 is the class token, modality i sits at position i + 1.
      CHECK(same == (t != i + 1));
    }
  }
}

TEST_CASE("swapping two modality values changes the output", "[clinical][branch]") {
  for (int s = 0; s < 5; ++s) {
    ParameterSet<double> params(20 + s);
    ClinicalBranch<double> branch(ParamScope<double>(params, "clinical"), clinical_config());
    std::mt19937_64 rng(30 + s);
    auto x = testing::random_tensor({12}, rng, 0, 1, false);
    auto swapped = x.clone();
    std::swap(swapped.mutable_data()[2], swapped.mutable_data()[7]);
    auto a = branch.forward(x).cls;
    auto b = branch.forward(swapped).cls;
    CHECK_FALSE(testing::bitwise_equal(a.data(), b.data()));
  }
}

TEST_CASE("clinical branch gradients match finite differences", "[clinical][branch][fd]") {
  for (int s = 0; s < 3; ++s) {
    ParameterSet<double> params(40 + s);
    ClinicalBranch<double> branch(ParamScope<double>(params, "clinical"), clinical_config());
    testing::randomize(params, 50 + s, 0.3);
    std::mt19937_64 rng(60 + s);
    auto x = testing::random_tensor({12}, rng, 0, 1, false);
    CHECK(testing::max_grad_error(testing::all_tensors(params), [&] { return branch.forward(x).cls; }, s) < 1e-4);
  }
}

TEST_CASE("clinical-only model learns a separable clinical task within 200 steps", "[clinical][train]") {
  SynthSpec spec;
  spec.seed = 3;
  spec.mode = SignalMode::kClinicalOnly;
  spec.n_smci = spec.n_pmci = 30;
  spec.strength = 2;  // class means 12 standard deviations apart
  spec.extent_h = spec.extent_w = spec.extent_d = 4;
  auto subjects = generate_synthetic(spec);
  double max_stable = -1e9, min_progressive = 1e9;
  const std::size_t cdrsb = modality_index("cdrsb");
  for (const auto& s : subjects) {
    if (target_of(s) == 0) max_stable = std::max(max_stable, s.clinical.values[cdrsb]);
    else min_progressive = std::min(min_progressive, s.clinical.values[cdrsb]);
  }
  REQUIRE(max_stable < min_progressive);
  auto pair = split_patients(subjects, 0.5, 1);
  std::vector<ClinicalRecord> records;
  for (const auto& s : pair.train.subjects) records.push_back(s.clinical);
  auto norm = fit_normalizer(records);

  TriFormerModel<float> model(clinical_config(), 4);
  AdamConfig adam_cfg;
  adam_cfg.lr = 1e-3;
  Adam<float> adam(model.parameters(), adam_cfg);
  const auto& train = pair.train.subjects;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(5);
  for (std::size_t step = 0; step < 200; ++step) {
    if ((2 * step) % train.size() == 0) std::shuffle(order.begin(), order.end(), rng);
    std::vector<ModelInput<float>> batch;
    std::vector<int> labels;
    for (std::size_t k = 0; k < 2; ++k) {
      const auto& s = train[order[(2 * step + k) % train.size()]];
      batch.push_back(make_input<float>(s, norm));
      labels.push_back(target_of(s));
    }
    adam.zero_grad();
    cross_entropy(model.batch_logits(batch), labels).backward();
    adam.step();
  }
  auto metrics = evaluate(model, pair.validation, norm, 0.5);
  CHECK(metrics.auc >= 0.95);
}
