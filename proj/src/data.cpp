// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include "triformer/data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace triformer {

namespace fs = std::filesystem;

namespace {

constexpr const char* kVolumeMagic = "triformer-volume";
constexpr int kVolumeVersion = 1;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

std::string extents_str(std::size_t h, std::size_t w, std::size_t d) {
  return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(d);
}

/// Cube root if n is a perfect cube, for friendlier size-mismatch messages.
std::string voxel_count_str(std::size_t n) {
  const auto c = static_cast<std::size_t>(std::llround(std::cbrt(static_cast<double>(n))));
  if (c * c * c == n) return extents_str(c, c, c) + " (" + std::to_string(n) + " voxels)";
  return std::to_string(n) + " voxels";
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cell);
      cell.clear();
    } else {
      cell.push_back(ch);
    }
  }
  out.push_back(cell);
  return out;
}

}  // namespace

std::string to_string(Label label) {
  switch (label) {
    case Label::kSMCI: return "sMCI";
    case Label::kPMCI: return "pMCI";
    case Label::kAD: return "AD";
    case Label::kCN: return "CN";
  }
  return "?";
}

Label parse_label(const std::string& name) {
  if (name == "sMCI") return Label::kSMCI;
  if (name == "pMCI") return Label::kPMCI;
  if (name == "AD") return Label::kAD;
  if (name == "CN") return Label::kCN;
  throw ValidationError("unknown label '" + name + "' (expected sMCI, pMCI, AD or CN)");
}

int target_of(const Subject& subject) {
  switch (subject.label) {
    case Label::kSMCI: return 0;
    case Label::kPMCI: return 1;
    default:
      throw ContractError("subject " + subject.id + " has label " + to_string(subject.label) +
                          "; only sMCI/pMCI subjects have a binary target");
  }
}

// ---- volume files ----

void write_volume(const Volume& volume, const fs::path& stem) {
  if (volume.voxels.size() != volume.numel())
    throw ValidationError("volume " + volume.subject_id + " holds " + std::to_string(volume.voxels.size()) +
                          " voxels but extents " + extents_str(volume.h, volume.w, volume.d));
  fs::path base = stem;
  base.replace_extension();
  nlohmann::ordered_json header;
  header["format"] = kVolumeMagic;
  header["version"] = kVolumeVersion;
  header["extents"] = {volume.h, volume.w, volume.d};
  header["voxel_size"] = volume.voxel_size;
  header["subject_id"] = volume.subject_id;
  header["label"] = to_string(volume.label);
  header["cohort"] = volume.cohort;
  header["dtype"] = "float32-le";
  header["order"] = "HWD";
  write_file(fs::path(base).replace_extension(".json"), header.dump(2) + "\n");

  std::string payload(volume.voxels.size() * 4, '\0');
  for (std::size_t i = 0; i < volume.voxels.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(volume.voxels[i]);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    std::memcpy(payload.data() + 4 * i, &bits, 4);
  }
  write_file(fs::path(base).replace_extension(".vol"), payload);
}

Volume read_volume(const fs::path& stem) {
  fs::path base = stem;
  base.replace_extension();
  const fs::path header_path = fs::path(base).replace_extension(".json");
  const fs::path payload_path = fs::path(base).replace_extension(".vol");
  const std::string text = read_file(header_path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(header_path.string() + ": malformed header at byte offset " + std::to_string(e.byte) + ": " +
                      e.what());
  }
  auto field_offset = [&](const std::string& key) {
    const auto pos = text.find("\"" + key + "\"");
    return std::to_string(pos == std::string::npos ? 0 : pos);
  };
  if (!header.is_object() || !header.contains("format") || header["format"] != kVolumeMagic)
    throw FormatError(header_path.string() + ": bad magic at byte offset " + field_offset("format") +
                      " (expected format \"" + kVolumeMagic + "\")");
  if (header.value("version", 0) != kVolumeVersion)
    throw FormatError(header_path.string() + ": unsupported version at byte offset " + field_offset("version"));

  Volume v;
  try {
    const auto& ext = header.at("extents");
    if (!ext.is_array() || ext.size() != 3) throw FormatError("extents must have three entries");
    v.h = ext[0].get<std::size_t>();
    v.w = ext[1].get<std::size_t>();
    v.d = ext[2].get<std::size_t>();
    v.voxel_size = header.value("voxel_size", 1.0);
    v.subject_id = header.at("subject_id").get<std::string>();
    v.label = parse_label(header.at("label").get<std::string>());
    v.cohort = header.value("cohort", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(header_path.string() + ": invalid header field: " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(header_path.string() + ": " + e.what() + " at byte offset " + field_offset("extents"));
  }
  if (v.h == 0 || v.w == 0 || v.d == 0)
    throw FormatError(header_path.string() + ": zero extent at byte offset " + field_offset("extents"));

  const std::string payload = read_file(payload_path);
  const std::size_t expected = v.numel() * 4;
  if (payload.size() != expected) {
    std::string msg = payload_path.string() + ": size mismatch: header extents " + extents_str(v.h, v.w, v.d) +
                      " need " + std::to_string(expected) + " bytes, payload has " +
                      std::to_string(payload.size()) + " bytes";
    if (payload.size() % 4 == 0) msg += " = " + voxel_count_str(payload.size() / 4);
    if (payload.size() < expected)
      msg += "; truncated at byte offset " + std::to_string(payload.size());
    else
      msg += "; trailing data from byte offset " + std::to_string(expected);
    throw FormatError(msg);
  }
  v.voxels.resize(v.numel());
  for (std::size_t i = 0; i < v.voxels.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, payload.data() + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    v.voxels[i] = std::bit_cast<float>(bits);
  }
  return v;
}

// ---- clinical CSV ----

std::string clinical_csv_header() {
  std::string h = "subject_id,label";
  for (auto name : kModalityNames) h += "," + std::string(name);
  return h;
}

std::vector<ClinicalRow> parse_clinical_csv(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  std::vector<ClinicalRow> rows;
  std::set<std::string> ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string where = source + ":" + std::to_string(line_no);
    if (line_no == 1) {
      if (line != clinical_csv_header())
        throw ValidationError(where + ": unexpected header; expected " + clinical_csv_header());
      continue;
    }
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != 2 + kClinicalModalities)
      throw ValidationError(where + ": expected " + std::to_string(2 + kClinicalModalities) + " fields, got " +
                            std::to_string(cells.size()));
    ClinicalRow row;
    row.subject_id = cells[0];
    if (row.subject_id.empty()) throw ValidationError(where + ": empty subject_id");
    if (!ids.insert(row.subject_id).second)
      throw ValidationError(where + ": duplicate subject_id '" + row.subject_id + "'");
    try {
      row.label = parse_label(cells[1]);
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
    for (std::size_t m = 0; m < kClinicalModalities; ++m) {
      const std::string& cell = cells[2 + m];
      if (cell.empty()) {
        row.record.missing[m] = true;
        continue;
      }
      double v = 0;
      auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (res.ec != std::errc{} || res.ptr != cell.data() + cell.size() || !std::isfinite(v))
        throw ValidationError(where + ": " + std::string(kModalityNames[m]) + " is not a number: '" + cell + "'");
      row.record.values[m] = v;
    }
    rows.push_back(std::move(row));
  }
  if (line_no == 0) throw ValidationError(source + ": empty clinical CSV");
  return rows;
}

std::string format_clinical_csv(std::span<const ClinicalRow> rows) {
  std::string out = clinical_csv_header() + "\n";
  for (const auto& row : rows) {
    out += row.subject_id + "," + to_string(row.label);
    for (std::size_t m = 0; m < kClinicalModalities; ++m) {
      out += ",";
      if (!row.record.missing[m]) out += format_double(row.record.values[m]);
    }
    out += "\n";
  }
  return out;
}

// ---- dataset directory ----

void write_dataset(const fs::path& dir, std::span<const Subject> subjects) {
  fs::create_directories(dir / "volumes");
  std::set<std::string> ids;
  std::vector<ClinicalRow> rows;
  for (const auto& s : subjects) {
    if (!ids.insert(s.id).second) throw ValidationError("duplicate subject id '" + s.id + "'");
    rows.push_back({s.id, s.label, s.clinical});
    write_volume(s.volume, dir / "volumes" / s.id);
  }
  write_file(dir / "meta.csv", format_clinical_csv(rows));
}

std::vector<Subject> read_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ValidationError("dataset directory not found: " + dir.string());
  const fs::path meta = dir / "meta.csv";
  if (!fs::exists(meta)) throw ValidationError("dataset has no meta.csv: " + meta.string());
  std::vector<Subject> subjects;
  for (auto& row : parse_clinical_csv(read_file(meta), meta.string())) {
    Subject s;
    s.id = row.subject_id;
    s.label = row.label;
    s.clinical = row.record;
    s.volume = read_volume(dir / "volumes" / row.subject_id);
    if (s.volume.subject_id != s.id)
      throw FormatError("volume sidecar for " + s.id + " names subject '" + s.volume.subject_id + "'");
    if (s.volume.label != s.label)
      throw FormatError("label of " + s.id + " differs between meta.csv and its volume sidecar");
    s.cohort = s.volume.cohort;
    subjects.push_back(std::move(s));
  }
  return subjects;
}

std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t state) {
  for (unsigned char b : bytes) {
    state ^= b;
    state *= 0x100000001b3ULL;
  }
  return state;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

std::uint64_t dataset_hash(const fs::path& dir) {
  std::vector<fs::path> files;
  if (fs::exists(dir / "meta.csv")) files.push_back(dir / "meta.csv");
  if (fs::is_directory(dir / "volumes"))
    for (const auto& e : fs::directory_iterator(dir / "volumes"))
      if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& f : files) {
    const std::string rel = fs::relative(f, dir).generic_string();
    h = fnv1a({reinterpret_cast<const unsigned char*>(rel.data()), rel.size()}, h);
    const std::string bytes = read_file(f);
    h = fnv1a({reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()}, h);
  }
  return h;
}

// ---- augmentation ----

Volume flip(const Volume& volume, FlipAxis axis) {
  Volume out = volume;
  for (std::size_t i = 0; i < volume.h; ++i)
    for (std::size_t j = 0; j < volume.w; ++j)
      for (std::size_t k = 0; k < volume.d; ++k) {
        std::size_t si = i, sj = j, sk = k;
        switch (axis) {
          case FlipAxis::kCoronal: si = volume.h - 1 - i; break;
          case FlipAxis::kSagittal: sj = volume.w - 1 - j; break;
          case FlipAxis::kAxial: sk = volume.d - 1 - k; break;
        }
        out.voxels[out.offset(i, j, k)] = volume.at(si, sj, sk);
      }
  return out;
}

Volume augment(const Volume& volume, const AugmentConfig& config, std::mt19937_64& rng) {
  if (!config.enabled) return volume;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  Volume out = coin(rng) < config.flip_prob ? flip(volume, config.flip_axis) : volume;
  if (config.noise_sigma > 0) {
    std::normal_distribution<double> noise(0.0, config.noise_sigma);
    for (auto& v : out.voxels) v = static_cast<float>(std::clamp(v + noise(rng), 0.0, 1.0));
  }
  return out;
}

Split adcn_augment(const Split& train, std::span<const Subject> adcn_pool) {
  if (train.role != SplitRole::kTrain)
    throw ContractError("AD/CN augmentation applies to the training split only");
  Split out = train;
  for (const auto& s : adcn_pool) {
    Subject copy = s;
    if (s.label == Label::kAD) {
      copy.label = Label::kPMCI;
    } else if (s.label == Label::kCN) {
      copy.label = Label::kSMCI;
    } else {
      throw ContractError("AD/CN augmentation pool contains " + to_string(s.label) + " subject " + s.id);
    }
    copy.source_label = s.label;
    copy.volume.label = copy.label;
    out.subjects.push_back(std::move(copy));
  }
  return out;
}

// ---- synthetic data ----

std::string to_string(SignalMode mode) {
  switch (mode) {
    case SignalMode::kImageOnly: return "image-only";
    case SignalMode::kClinicalOnly: return "clinical-only";
    case SignalMode::kBothRedundant: return "both-redundant";
    case SignalMode::kXorCrossModal: return "xor-cross-modal";
  }
  return "?";
}

SignalMode parse_signal_mode(const std::string& name) {
  for (auto m : {SignalMode::kImageOnly, SignalMode::kClinicalOnly, SignalMode::kBothRedundant,
                 SignalMode::kXorCrossModal})
    if (to_string(m) == name) return m;
  throw ConfigError("mode", "unknown signal mode '" + name +
                                "'; valid modes: image-only, clinical-only, both-redundant, xor-cross-modal");
}

void SynthSpec::validate() const {
  if (extent_h < 4 || extent_w < 4 || extent_d < 4)
    throw ConfigError("extent", "extents " + extents_str(extent_h, extent_w, extent_d) +
                                    " are too small for the signal blob (minimum 4 per axis)");
  if (n_smci + n_pmci + n_ad + n_cn == 0) throw ConfigError("n", "spec generates no subjects");
  if (!(strength >= 0)) throw ConfigError("strength", "must be non-negative");
  if (!(noise >= 0)) throw ConfigError("noise", "must be non-negative");
  if (!(missing_rate >= 0 && missing_rate < 1)) throw ConfigError("missing_rate", "must be in [0, 1)");
  if (cohorts.empty()) throw ConfigError("cohorts", "at least one cohort is required");
  std::set<std::string> seen;
  for (const auto& c : cohorts) {
    if (c.empty() || c.find_first_of(",/\\ ") != std::string::npos)
      throw ConfigError("cohorts", "invalid cohort name '" + c + "'");
    if (!seen.insert(c).second) throw ConfigError("cohorts", "duplicate cohort '" + c + "'");
  }
}

SynthSpec parse_synth_spec(KeyValueFile kv) {
  SynthSpec spec;
  auto read = [&](const std::string& key, auto&& apply) {
    if (const auto* e = kv.get(key)) apply(kv.location(key), e->value);
  };
  read("seed", [&](auto w, auto v) { spec.seed = parse_u64(w, v); });
  read("n_smci", [&](auto w, auto v) { spec.n_smci = parse_size(w, v); });
  read("n_pmci", [&](auto w, auto v) { spec.n_pmci = parse_size(w, v); });
  read("n_ad", [&](auto w, auto v) { spec.n_ad = parse_size(w, v); });
  read("n_cn", [&](auto w, auto v) { spec.n_cn = parse_size(w, v); });
  read("extent", [&](auto w, auto v) { spec.extent_h = spec.extent_w = spec.extent_d = parse_size(w, v); });
  read("extent_h", [&](auto w, auto v) { spec.extent_h = parse_size(w, v); });
  read("extent_w", [&](auto w, auto v) { spec.extent_w = parse_size(w, v); });
  read("extent_d", [&](auto w, auto v) { spec.extent_d = parse_size(w, v); });
  read("mode", [&](auto w, auto v) {
    try {
      spec.mode = parse_signal_mode(v);
    } catch (const ConfigError& e) {
      throw ConfigError(w, std::string(e.what()).substr(6));
    }
  });
  read("strength", [&](auto w, auto v) { spec.strength = parse_double(w, v); });
  read("noise", [&](auto w, auto v) { spec.noise = parse_double(w, v); });
  read("cohort_shift", [&](auto w, auto v) { spec.cohort_shift = parse_double(w, v); });
  read("missing_rate", [&](auto w, auto v) { spec.missing_rate = parse_double(w, v); });
  read("cohorts", [&](auto, auto v) {
    spec.cohorts.clear();
    std::string item;
    std::istringstream in(v);
    while (std::getline(in, item, ',')) {
      item.erase(0, item.find_first_not_of(' '));
      item.erase(item.find_last_not_of(' ') + 1);
      spec.cohorts.push_back(item);
    }
  });
  kv.reject_unused();
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(kv.source + " (" + e.where() + ")", std::string(e.what()).substr(e.where().size() + 2));
  }
  return spec;
}

SynthSpec load_synth_spec(const fs::path& path) { return parse_synth_spec(KeyValueFile::load(path)); }

std::string to_spec_text(const SynthSpec& spec) {
  std::ostringstream os;
  os << "seed = " << spec.seed << "\n"
     << "n_smci = " << spec.n_smci << "\n"
     << "n_pmci = " << spec.n_pmci << "\n"
     << "n_ad = " << spec.n_ad << "\n"
     << "n_cn = " << spec.n_cn << "\n"
     << "extent_h = " << spec.extent_h << "\n"
     << "extent_w = " << spec.extent_w << "\n"
     << "extent_d = " << spec.extent_d << "\n"
     << "mode = " << to_string(spec.mode) << "\n"
     << "strength = " << format_double(spec.strength) << "\n"
     << "noise = " << format_double(spec.noise) << "\n"
     << "cohort_shift = " << format_double(spec.cohort_shift) << "\n"
     << "missing_rate = " << format_double(spec.missing_rate) << "\n"
     << "cohorts = ";
  for (std::size_t i = 0; i < spec.cohorts.size(); ++i) os << (i ? "," : "") << spec.cohorts[i];
  os << "\n";
  return os.str();
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::array<std::size_t, 3> signal_center(const SynthSpec& spec) {
  return {spec.extent_h / 3, spec.extent_w / 2, (2 * spec.extent_d) / 3};
}

double signal_sigma(const SynthSpec& spec) {
  const std::size_t m = std::min({spec.extent_h, spec.extent_w, spec.extent_d});
  return std::max(1.0, static_cast<double>(m) / 4.0);
}

namespace {

void add_blob(std::vector<double>& field, const SynthSpec& spec, double ci, double cj, double ck, double sigma,
              double amplitude) {
  const double inv = 1.0 / (2.0 * sigma * sigma);
  std::size_t idx = 0;
  for (std::size_t i = 0; i < spec.extent_h; ++i)
    for (std::size_t j = 0; j < spec.extent_w; ++j)
      for (std::size_t k = 0; k < spec.extent_d; ++k, ++idx) {
        const double r2 = (i - ci) * (i - ci) + (j - cj) * (j - cj) + (k - ck) * (k - ck);
        field[idx] += amplitude * std::exp(-r2 * inv);
      }
}

struct ModalityPrior {
  double mean, sd, lo, hi;
  bool integer;
};

// Rough marginal ranges for an MCI-like population. cdrsb carries the signal.
constexpr std::array<ModalityPrior, kClinicalModalities> kPriors = {{
    {73.0, 7.0, 55.0, 95.0, false},   // age
    {0.5, 0.0, 0.0, 1.0, true},       // gender (Bernoulli)
    {16.0, 2.5, 6.0, 22.0, true},     // education
    {0.65, 0.0, 0.0, 2.0, true},      // apoe4 (categorical)
    {kCdrsbMean, kCdrsbStd, -1e9, 1e9, false},  // cdrsb
    {10.0, 4.0, 0.0, 70.0, false},    // adas11
    {16.0, 6.0, 0.0, 85.0, false},    // adas13
    {27.0, 2.0, 15.0, 30.0, true},    // mmse
    {35.0, 10.0, 0.0, 75.0, true},    // ravlt_immediate
    {4.0, 2.5, -5.0, 14.0, true},     // ravlt_learning
    {4.5, 2.5, -5.0, 15.0, true},     // ravlt_forgetting
    {55.0, 25.0, -100.0, 100.0, false},  // ravlt_pct_forgetting
}};

}  // namespace

std::vector<Subject> generate_synthetic(const SynthSpec& spec, std::vector<SynthTruth>* truth) {
  spec.validate();
  const std::size_t cdrsb = modality_index("cdrsb");
  const std::array<std::pair<Label, std::size_t>, 4> classes = {
      {{Label::kSMCI, spec.n_smci}, {Label::kPMCI, spec.n_pmci}, {Label::kAD, spec.n_ad}, {Label::kCN, spec.n_cn}}};
  const auto center = signal_center(spec);
  const double sigma = signal_sigma(spec);
  const std::size_t n = spec.extent_h * spec.extent_w * spec.extent_d;

  std::vector<Subject> out;
  if (truth) truth->clear();
  std::uint64_t index = 0;
  for (std::size_t ci = 0; ci < spec.cohorts.size(); ++ci) {
    for (const auto& [label, count] : classes) {
      const int y = (label == Label::kPMCI || label == Label::kAD) ? 1 : 0;
      for (std::size_t k = 0; k < count; ++k, ++index) {
        std::mt19937_64 rng(splitmix64(spec.seed ^ splitmix64(index)));
        std::uniform_real_distribution<double> uni(0.0, 1.0);
        std::normal_distribution<double> gauss(0.0, 1.0);

        // The free bit alternates within each class so that it is exactly
        // balanced against the label.
        const int free_bit = static_cast<int>(k % 2);
        SynthTruth t;
        switch (spec.mode) {
          case SignalMode::kImageOnly: t.image_bit = y; t.clinical_bit = free_bit; break;
          case SignalMode::kClinicalOnly: t.image_bit = free_bit; t.clinical_bit = y; break;
          case SignalMode::kBothRedundant: t.image_bit = y; t.clinical_bit = y; break;
          case SignalMode::kXorCrossModal: t.image_bit = free_bit; t.clinical_bit = y ^ free_bit; break;
        }

        Subject s;
        s.cohort = spec.cohorts[ci];
        s.label = label;
        char id[64];
        std::snprintf(id, sizeof id, "%s-%s-%04zu", s.cohort.c_str(), to_string(label).c_str(), k);
        s.id = id;

        std::vector<double> field(n, 0.25 + static_cast<double>(ci) * spec.cohort_shift);
        for (int b = 0; b < 4; ++b) {
          const double bi = uni(rng) * spec.extent_h, bj = uni(rng) * spec.extent_w, bk = uni(rng) * spec.extent_d;
          const double bs = static_cast<double>(std::min({spec.extent_h, spec.extent_w, spec.extent_d})) *
                            (1.0 / 6.0 + uni(rng) / 6.0);
          add_blob(field, spec, bi, bj, bk, bs, -0.10 + 0.25 * uni(rng));
        }
        t.blob_center = center;
        if (t.image_bit) {
          const bool jitter = std::min({spec.extent_h, spec.extent_w, spec.extent_d}) >= 8;
          for (std::size_t a = 0; a < 3; ++a)
            if (jitter) t.blob_center[a] = t.blob_center[a] + static_cast<std::size_t>(rng() % 3) - 1;
          add_blob(field, spec, static_cast<double>(t.blob_center[0]), static_cast<double>(t.blob_center[1]),
                   static_cast<double>(t.blob_center[2]), sigma, 0.5 * spec.strength);
        }
        s.volume.subject_id = s.id;
        s.volume.h = spec.extent_h;
        s.volume.w = spec.extent_w;
        s.volume.d = spec.extent_d;
        s.volume.label = label;
        s.volume.cohort = s.cohort;
        s.volume.voxels.resize(n);
        for (std::size_t v = 0; v < n; ++v)
          s.volume.voxels[v] = static_cast<float>(std::clamp(field[v] + spec.noise * gauss(rng), 0.0, 1.0));

        for (std::size_t m = 0; m < kClinicalModalities; ++m) {
          const auto& p = kPriors[m];
          double value;
          if (m == modality_index("gender")) {
            value = uni(rng) < 0.5 ? 0.0 : 1.0;
          } else if (m == modality_index("apoe4")) {
            const double u = uni(rng);
            value = u < 0.5 ? 0.0 : (u < 0.85 ? 1.0 : 2.0);
          } else {
            value = p.mean + p.sd * gauss(rng);
            if (m == modality_index("age")) value += 5.0 * static_cast<double>(ci) * spec.cohort_shift;
            if (m == cdrsb) value += t.clinical_bit * kCdrsbShift * kCdrsbStd * spec.strength;
            if (p.integer) value = std::round(value);
            value = std::clamp(value, p.lo, p.hi);
          }
          s.clinical.values[m] = value;
          s.clinical.missing[m] = spec.missing_rate > 0 && uni(rng) < spec.missing_rate;
          if (s.clinical.missing[m]) s.clinical.values[m] = 0.0;
        }
        out.push_back(std::move(s));
        if (truth) truth->push_back(t);
      }
    }
  }
  return out;
}

}  // namespace triformer
