// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "triformer/clinical.hpp"
#include "triformer/config.hpp"
#include "triformer/fusion.hpp"
#include "triformer/image_branch.hpp"

namespace triformer {

/// Two 3D conv blocks with 2x average pooling, global mean, MLP head.
template <typename T>
class CnnBaseline {
 public:
  CnnBaseline(const ParamScope<T>& scope, std::size_t channels);
  Tensor<T> operator()(const Tensor<T>& volume) const;

  Tensor<T> conv1_kernel, conv1_bias, conv2_kernel, conv2_bias;
  MlpHead<T> head;
};

/// One model input: volume [1, H, W, D] and normalised clinical values [12].
template <typename T>
struct ModelInput {
  Tensor<T> volume;
  Tensor<T> clinical;
};

/// Owns the parameters of one ablation variant and builds only the parts the
/// variant needs. Parameter names are prefixed "image.", "clinical.",
/// "fusion.", "head." or "cnn.".
template <typename T>
class TriFormerModel {
 public:
  TriFormerModel(const ModelConfig& config, std::uint64_t seed);
  TriFormerModel(const TriFormerModel&) = delete;
  TriFormerModel& operator=(const TriFormerModel&) = delete;

  /// logits [2]
  Tensor<T> logits(const ModelInput<T>& input, const ForwardContext& ctx = {}) const;
  /// logits [B, 2]
  Tensor<T> batch_logits(const std::vector<ModelInput<T>>& batch, const ForwardContext& ctx = {}) const;

  const ModelConfig& config() const { return config_; }
  ParameterSet<T>& parameters() { return *params_; }
  const ParameterSet<T>& parameters() const { return *params_; }

  const ImageBranch<T>* image() const { return image_.get(); }
  const ClinicalBranch<T>* clinical() const { return clinical_.get(); }
  const FusionClassifier<T>* fusion() const { return fusion_.get(); }

 private:
  ModelConfig config_;
  std::unique_ptr<ParameterSet<T>> params_;
  std::unique_ptr<ImageBranch<T>> image_;
  std::unique_ptr<ClinicalBranch<T>> clinical_;
  std::unique_ptr<FusionClassifier<T>> fusion_;
  std::unique_ptr<MlpFusion<T>> mlp_fusion_;
  std::unique_ptr<CnnBaseline<T>> cnn_;
  std::optional<MlpHead<T>> head_;
};

}  // namespace triformer
