// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "triformer/config.hpp"
#include "triformer/data.hpp"
#include "triformer/model.hpp"

namespace triformer {

class MetricError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ProtocolError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Non-finite training loss. The message carries epoch, batch and a
/// parameter-norm report.
class NanLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Probability that a random positive outranks a random negative, ties 0.5.
double auc(std::span<const double> scores, std::span<const int> labels);
/// Fraction correct when score >= threshold predicts the positive class.
double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

struct SplitPair {
  Split train;
  Split validation;
};

/// Stratified patient-level split of sMCI/pMCI subjects. Each class keeps
/// round(fraction * n) subjects for training, at least one per side.
SplitPair split_patients(std::span<const Subject> subjects, double fraction, std::uint64_t seed);

/// Everything one training run consumes.
struct ExperimentData {
  Split train;        // after optional AD/CN augmentation
  Split validation;   // sMCI/pMCI only, never augmented
  Split test;         // held-out cohort, possibly empty
  NormalizationSpec normalizer;
};

/// Cohort filtering, splitting, AD/CN augmentation and normaliser fitting.
ExperimentData prepare_experiment(std::span<const Subject> subjects, const TrainConfig& config,
                                  std::uint64_t split_seed);
/// Same, with a split fixed in advance (ids of train and validation subjects).
ExperimentData prepare_experiment(std::span<const Subject> subjects, const TrainConfig& config,
                                  const std::vector<std::string>& train_ids,
                                  const std::vector<std::string>& validation_ids);

template <typename T>
ModelInput<T> make_input(const Subject& subject, const NormalizationSpec& normalizer);

/// Positive-class softmax probabilities, evaluated without the tape. With
/// threads > 1 subjects are spread over worker threads; results do not
/// depend on the thread count.
template <typename T>
std::vector<double> predict(const TriFormerModel<T>& model, std::span<const Subject> subjects,
                            const NormalizationSpec& normalizer, std::size_t threads = 1);

struct Metrics {
  double auc = 0;
  double acc = 0;
  std::vector<double> scores;
  std::vector<int> labels;
};

template <typename T>
Metrics evaluate(const TriFormerModel<T>& model, const Split& split, const NormalizationSpec& normalizer,
                 double threshold, std::size_t threads = 1);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_auc = 0;
  double val_acc = 0;
};

std::string history_csv(std::span<const EpochRecord> history);

struct TrainOptions {
  /// When set: history.csv and best.ckpt are written here.
  std::filesystem::path out_dir;
  /// Called after every epoch; returning false ends training early.
  std::function<bool(const EpochRecord&)> observer;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 0: no epoch ran
  double best_auc = 0;
  double best_acc = 0;
};

/// Adam on mean cross-entropy over shuffled mini-batches. Keeps the weights
/// of the epoch with the highest validation AUC and leaves them loaded in
/// `model` on return.
template <typename T>
TrainResult train(TriFormerModel<T>& model, const ExperimentData& data, const TrainConfig& config,
                  const TrainOptions& options = {});

struct RepeatResult {
  std::uint64_t seed = 0;
  double auc = 0;
  double acc = 0;
  double test_auc = 0;  // only with a test cohort
  double test_acc = 0;
  std::size_t best_epoch = 0;
  std::vector<std::string> subject_ids;  // validation subjects
  std::vector<double> scores;            // matching validation scores
};

struct EvalResult {
  std::vector<RepeatResult> repeats;
  double mean_auc = 0;
  double mean_acc = 0;
  double mean_test_auc = 0;
  double mean_test_acc = 0;
  bool has_test = false;
};

/// Seed of repeat `r` of a run seeded with `seed`.
std::uint64_t repeat_seed(std::uint64_t seed, std::size_t r);

/// `config.train.repeats` independent runs. Repeat r uses repeat_seed for
/// its split, weight init and batch order. Per-repeat outputs go to
/// `out_dir/repeat<r>` when out_dir is set.
template <typename T>
EvalResult run_repeats(std::span<const Subject> subjects, const RunConfig& config,
                       const std::filesystem::path& out_dir = {});

struct AblationRow {
  Variant variant;
  EvalResult result;
};

/// Trains each variant on identical split files (written once to
/// `out_dir/splits`, hash-checked before every run) and writes
/// `out_dir/ablation.csv`.
template <typename T>
std::vector<AblationRow> run_ablation(std::span<const Subject> subjects, const RunConfig& config,
                                      const std::vector<Variant>& variants, const std::filesystem::path& out_dir);

std::string ablation_csv(std::span<const AblationRow> rows);
std::string result_json(const EvalResult& result, const RunConfig& config);

}  // namespace triformer
