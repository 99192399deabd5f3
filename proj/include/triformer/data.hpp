// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "triformer/checkpoint.hpp"
#include "triformer/clinical.hpp"
#include "triformer/config.hpp"

namespace triformer {

enum class Label { kSMCI = 0, kPMCI = 1, kAD = 2, kCN = 3 };
std::string to_string(Label label);
Label parse_label(const std::string& name);

/// Intensity volume in [0, 1], stored H-major then W then D.
struct Volume {
  std::string subject_id;
  std::size_t h = 0, w = 0, d = 0;
  double voxel_size = 1.0;
  Label label = Label::kSMCI;
  std::string cohort;
  std::vector<float> voxels;

  std::size_t numel() const { return h * w * d; }
  std::size_t offset(std::size_t i, std::size_t j, std::size_t k) const { return (i * w + j) * d + k; }
  float at(std::size_t i, std::size_t j, std::size_t k) const { return voxels[offset(i, j, k)]; }
};

struct Subject {
  std::string id;
  Label label = Label::kSMCI;
  std::string cohort;
  Volume volume;
  ClinicalRecord clinical;
  /// Set when AD/CN augmentation relabelled this subject.
  std::optional<Label> source_label;
};

/// Binary target: sMCI -> 0, pMCI -> 1. AD/CN must be relabelled first.
int target_of(const Subject& subject);

// ---- volume files ----

/// Writes `<stem>.vol` (raw little-endian float32) and `<stem>.json`.
void write_volume(const Volume& volume, const std::filesystem::path& stem);
/// Reads the pair written by write_volume; `stem` may carry either extension.
Volume read_volume(const std::filesystem::path& stem);

// ---- clinical CSV ----

struct ClinicalRow {
  std::string subject_id;
  Label label = Label::kSMCI;
  ClinicalRecord record;
};

std::string clinical_csv_header();
std::vector<ClinicalRow> parse_clinical_csv(const std::string& text, const std::string& source = "<csv>");
std::string format_clinical_csv(std::span<const ClinicalRow> rows);

// ---- dataset directory: meta.csv + volumes/<id>.{vol,json} ----

void write_dataset(const std::filesystem::path& dir, std::span<const Subject> subjects);
std::vector<Subject> read_dataset(const std::filesystem::path& dir);
/// FNV-1a 64 over meta.csv and every volume file, in sorted path order.
std::uint64_t dataset_hash(const std::filesystem::path& dir);
std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t state = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

// ---- augmentation ----

/// Mirror along one axis (sagittal flips the W index).
Volume flip(const Volume& volume, FlipAxis axis);
/// Training-time augmentation: random flip, Gaussian noise, re-clamp.
Volume augment(const Volume& volume, const AugmentConfig& config, std::mt19937_64& rng);

enum class SplitRole { kTrain, kValidation, kTest };

struct Split {
  SplitRole role = SplitRole::kTrain;
  std::vector<Subject> subjects;
};

/// Appends AD subjects as pMCI and CN subjects as sMCI. Only valid on a
/// training split.
Split adcn_augment(const Split& train, std::span<const Subject> adcn_pool);

// ---- synthetic data ----

enum class SignalMode { kImageOnly, kClinicalOnly, kBothRedundant, kXorCrossModal };
std::string to_string(SignalMode mode);
SignalMode parse_signal_mode(const std::string& name);

struct SynthSpec {
  std::uint64_t seed = 0;
  std::size_t n_smci = 50, n_pmci = 50, n_ad = 0, n_cn = 0;  // per cohort
  std::size_t extent_h = 16, extent_w = 16, extent_d = 16;
  SignalMode mode = SignalMode::kBothRedundant;
  double strength = 1.0;
  double noise = 0.02;
  std::vector<std::string> cohorts{"A"};
  double cohort_shift = 0.0;
  double missing_rate = 0.0;

  void validate() const;
};

SynthSpec parse_synth_spec(KeyValueFile kv);
SynthSpec load_synth_spec(const std::filesystem::path& path);
std::string to_spec_text(const SynthSpec& spec);

/// Hidden generator state behind one synthetic subject.
struct SynthTruth {
  int image_bit = 0;
  int clinical_bit = 0;
  std::array<std::size_t, 3> blob_center{};
};

/// Subjects in cohort order, then class order sMCI, pMCI, AD, CN.
std::vector<Subject> generate_synthetic(const SynthSpec& spec, std::vector<SynthTruth>* truth = nullptr);

/// Signal blob placement used by the generator; exposed for oracles.
std::array<std::size_t, 3> signal_center(const SynthSpec& spec);
double signal_sigma(const SynthSpec& spec);
/// Mean and standard deviation of cdrsb before the clinical shift.
inline constexpr double kCdrsbMean = 1.5;
inline constexpr double kCdrsbStd = 0.8;
/// Clinical signal: cdrsb moves by this many standard deviations times strength.
inline constexpr double kCdrsbShift = 6.0;

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace triformer
