// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "triformer/config.hpp"
#include "triformer/layers.hpp"
#include "triformer/transformer.hpp"

namespace triformer {

inline constexpr std::size_t kClinicalModalities = 12;

/// Schema order; also the CSV column order after subject_id and label.
inline constexpr std::array<std::string_view, kClinicalModalities> kModalityNames = {
    "age",    "gender",          "education",      "apoe4",           "cdrsb",
    "adas11", "adas13",          "mmse",           "ravlt_immediate", "ravlt_learning",
    "ravlt_forgetting", "ravlt_pct_forgetting"};

/// Index of a modality by name, or throws ValidationError.
std::size_t modality_index(std::string_view name);

struct ClinicalRecord {
  std::array<double, kClinicalModalities> values{};
  std::array<bool, kClinicalModalities> missing{};

  static ClinicalRecord from(std::span<const double> values);
};

class DegenerateModalityError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Per-modality min/max (and median for imputation) fitted on training
/// records only.
struct NormalizationSpec {
  std::array<double, kClinicalModalities> min{};
  std::array<double, kClinicalModalities> max{};
  std::array<double, kClinicalModalities> median{};

  /// Missing values are replaced by the training median, then every value is
  /// min-max scaled and clamped to [0, 1]. `imputed` counts replacements.
  std::array<double, kClinicalModalities> normalize(const ClinicalRecord& record,
                                                    std::size_t* imputed = nullptr) const;
};

NormalizationSpec fit_normalizer(std::span<const ClinicalRecord> train_records);

template <typename T>
struct ClinicalOutput {
  Tensor<T> tokens;  // [13, d_model]
  Tensor<T> cls;     // [d_model]
};

/// Per-modality projection (scalar -> d, ReLU, d -> d), a prepended class
/// token, a learned positional table of length 13 and a transformer encoder.
template <typename T>
class ClinicalBranch {
 public:
  ClinicalBranch(const ParamScope<T>& scope, const ModelConfig& config);

  /// normalised [12] -> per-modality tokens [12, d_model], before the encoder.
  Tensor<T> project(const Tensor<T>& normalized) const;
  /// Encoder input, [13, d_model].
  Tensor<T> sequence(const Tensor<T>& normalized) const;
  ClinicalOutput<T> forward(const Tensor<T>& normalized, const ForwardContext& ctx = {}) const;

  bool shared_projection() const { return shared_; }

  Tensor<T> w1, b1, w2, b2;
  Tensor<T> cls_token;  // [d_model]
  Tensor<T> positions;  // [13, d_model]
  EncoderStack<T> encoder;

 private:
  std::size_t d_model_;
  bool shared_;
};

}  // namespace triformer
