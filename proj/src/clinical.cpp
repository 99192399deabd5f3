// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include "triformer/clinical.hpp"

#include <algorithm>

namespace triformer {

std::size_t modality_index(std::string_view name) {
  for (std::size_t i = 0; i < kClinicalModalities; ++i)
    if (kModalityNames[i] == name) return i;
  throw ValidationError("unknown clinical modality '" + std::string(name) + "'");
}

ClinicalRecord ClinicalRecord::from(std::span<const double> values) {
  if (values.size() != kClinicalModalities)
    throw ValidationError("clinical record needs " + std::to_string(kClinicalModalities) +
                          " modalities, got " + std::to_string(values.size()));
  ClinicalRecord r;
  std::copy(values.begin(), values.end(), r.values.begin());
  return r;
}

NormalizationSpec fit_normalizer(std::span<const ClinicalRecord> train_records) {
  NormalizationSpec spec;
  std::string degenerate;
  for (std::size_t m = 0; m < kClinicalModalities; ++m) {
    std::vector<double> present;
    for (const auto& r : train_records)
      if (!r.missing[m]) present.push_back(r.values[m]);
    if (present.empty()) {
      degenerate += (degenerate.empty() ? "" : ", ") + std::string(kModalityNames[m]);
      continue;
    }
    std::sort(present.begin(), present.end());
    spec.min[m] = present.front();
    spec.max[m] = present.back();
    const std::size_t n = present.size();
    spec.median[m] = n % 2 ? present[n / 2] : 0.5 * (present[n / 2 - 1] + present[n / 2]);
    if (!(spec.max[m] > spec.min[m]))
      degenerate += (degenerate.empty() ? "" : ", ") + std::string(kModalityNames[m]);
  }
  if (!degenerate.empty())
    throw DegenerateModalityError("clinical modalities without two distinct training values: " + degenerate);
  return spec;
}

std::array<double, kClinicalModalities> NormalizationSpec::normalize(const ClinicalRecord& record,
                                                                     std::size_t* imputed) const {
  std::array<double, kClinicalModalities> out{};
  for (std::size_t m = 0; m < kClinicalModalities; ++m) {
    double v = record.values[m];
    if (record.missing[m]) {
      v = median[m];
      if (imputed) ++*imputed;
    }
    out[m] = std::clamp((v - min[m]) / (max[m] - min[m]), 0.0, 1.0);
  }
  return out;
}

template <typename T>
ClinicalBranch<T>::ClinicalBranch(const ParamScope<T>& scope, const ModelConfig& config)
    : d_model_(config.d_model), shared_(config.shared_clinical_projection) {
  const std::size_t d = d_model_;
  const std::size_t m = kClinicalModalities;
  auto proj = scope.child("proj");
  if (shared_) {
    w1 = proj.create("w1", {1, d}, InitSpec::fan_in(1));
    b1 = proj.create("b1", {d}, InitSpec::zeros());
    w2 = proj.create("w2", {d, d}, InitSpec::fan_in(d));
    b2 = proj.create("b2", {d}, InitSpec::zeros());
  } else {
    w1 = proj.create("w1", {m, 1, d}, InitSpec::fan_in(1));
    b1 = proj.create("b1", {m, 1, d}, InitSpec::zeros());
    w2 = proj.create("w2", {m, d, d}, InitSpec::fan_in(d));
    b2 = proj.create("b2", {m, 1, d}, InitSpec::zeros());
  }
  cls_token = scope.create("cls", {d}, InitSpec::embedding());
  positions = scope.create("pos", {m + 1, d}, InitSpec::embedding());
  encoder = EncoderStack<T>(scope.child("encoder"), config.encoder(config.clinical, d));
}

template <typename T>
Tensor<T> ClinicalBranch<T>::project(const Tensor<T>& normalized) const {
  const std::size_t m = kClinicalModalities;
  if (normalized.numel() != m)
    throw ValidationError("clinical input needs " + std::to_string(m) + " modalities, got " +
                          std::to_string(normalized.numel()));
  if (shared_) {
    auto h = relu(add(matmul(reshape(normalized, {m, 1}), w1), b1));
    return linear(h, w2, b2);
  }
  // Each modality has its own projection: batched [12] x ([1,1] @ [1,d]) then [1,d] @ [d,d].
  auto h = relu(add(matmul(reshape(normalized, {m, 1, 1}), w1), b1));
  return reshape(add(matmul(h, w2), b2), {m, d_model_});
}

template <typename T>
Tensor<T> ClinicalBranch<T>::sequence(const Tensor<T>& normalized) const {
  auto tokens = concat<T>({reshape(cls_token, {1, d_model_}), project(normalized)}, 0);
  return add(tokens, positions);
}

template <typename T>
ClinicalOutput<T> ClinicalBranch<T>::forward(const Tensor<T>& normalized, const ForwardContext& ctx) const {
  const std::size_t len = kClinicalModalities + 1;
  auto out = reshape(encoder(reshape(sequence(normalized), {1, len, d_model_}), ctx), {len, d_model_});
  return {out, reshape(narrow(out, 0, 0, 1), {d_model_})};
}

template class ClinicalBranch<float>;
template class ClinicalBranch<double>;

}  // namespace triformer
