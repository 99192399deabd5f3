// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include "triformer/model.hpp"

#include <algorithm>

namespace triformer {

template <typename T>
CnnBaseline<T>::CnnBaseline(const ParamScope<T>& scope, std::size_t channels) {
  const std::size_t c = channels;
  conv1_kernel = scope.create("conv1.kernel", {c, 1, 3, 3, 3}, InitSpec::fan_in(27));
  conv1_bias = scope.create("conv1.bias", {c}, InitSpec::zeros());
  conv2_kernel = scope.create("conv2.kernel", {2 * c, c, 3, 3, 3}, InitSpec::fan_in(27 * c));
  conv2_bias = scope.create("conv2.bias", {2 * c}, InitSpec::zeros());
  head = MlpHead<T>(scope.child("head"), 2 * c, 2 * c, 2);
}

template <typename T>
Tensor<T> CnnBaseline<T>::operator()(const Tensor<T>& volume) const {
  auto h = avg_pool3d(relu(conv3d(volume, conv1_kernel, conv1_bias, 1, 1)), 2);
  h = avg_pool3d(relu(conv3d(h, conv2_kernel, conv2_bias, 1, 1)), 2);
  const std::size_t c = h.dim(0);
  return head(mean_last(reshape(h, {c, h.numel() / c})));
}

template <typename T>
TriFormerModel<T>::TriFormerModel(const ModelConfig& config, std::uint64_t seed)
    : config_(config), params_(std::make_unique<ParameterSet<T>>(seed)) {
  config_.validate();
  const std::size_t d = config_.d_model;
  const std::size_t half = std::max<std::size_t>(1, d / 2);
  ParamScope<T> root(*params_, "");
  switch (config_.variant) {
    case Variant::kImageCnn:
      if (config_.extent_h % 4 || config_.extent_w % 4 || config_.extent_d % 4)
        throw ConfigError("model.extent", "the 3D CNN baseline needs extents divisible by 4");
      cnn_ = std::make_unique<CnnBaseline<T>>(root.child("cnn"), config_.cnn_channels);
      break;
    case Variant::kImageVit:
      image_ = std::make_unique<ImageBranch<T>>(root.child("image"), config_);
      head_.emplace(root.child("head"), d, half, 2);
      break;
    case Variant::kClinicalMlp:
      head_.emplace(root.child("head"), kClinicalModalities, d, 2);
      break;
    case Variant::kClinicalTransformer:
      clinical_ = std::make_unique<ClinicalBranch<T>>(root.child("clinical"), config_);
      head_.emplace(root.child("head"), d, half, 2);
      break;
    case Variant::kMlpFusion:
      image_ = std::make_unique<ImageBranch<T>>(root.child("image"), config_);
      clinical_ = std::make_unique<ClinicalBranch<T>>(root.child("clinical"), config_);
      mlp_fusion_ = std::make_unique<MlpFusion<T>>(root.child("fusion"), d);
      break;
    case Variant::kTransformerFusion:
      image_ = std::make_unique<ImageBranch<T>>(root.child("image"), config_);
      clinical_ = std::make_unique<ClinicalBranch<T>>(root.child("clinical"), config_);
      fusion_ = std::make_unique<FusionClassifier<T>>(root.child("fusion"), config_, &image_->embedding());
      break;
  }
}

template <typename T>
Tensor<T> TriFormerModel<T>::logits(const ModelInput<T>& input, const ForwardContext& ctx) const {
  switch (config_.variant) {
    case Variant::kImageCnn:
      return (*cnn_)(input.volume);
    case Variant::kImageVit:
      return (*head_)(image_->forward(input.volume, ctx).cls);
    case Variant::kClinicalMlp:
      if (input.clinical.numel() != kClinicalModalities)
        throw ValidationError("clinical input needs " + std::to_string(kClinicalModalities) + " modalities, got " +
                              std::to_string(input.clinical.numel()));
      return (*head_)(reshape(input.clinical, {kClinicalModalities}));
    case Variant::kClinicalTransformer:
      return (*head_)(clinical_->forward(input.clinical, ctx).cls);
    case Variant::kMlpFusion:
      return (*mlp_fusion_)(image_->forward(input.volume, ctx).cls, clinical_->forward(input.clinical, ctx).cls);
    case Variant::kTransformerFusion: {
      auto image = image_->forward(input.volume, ctx);
      auto clinical = clinical_->forward(input.clinical, ctx);
      return fusion_->forward(fusion_->fuse_tokens(image.tokens, clinical.cls), ctx);
    }
  }
  throw ContractError("unhandled model variant");
}

template <typename T>
Tensor<T> TriFormerModel<T>::batch_logits(const std::vector<ModelInput<T>>& batch, const ForwardContext& ctx) const {
  if (batch.empty()) throw ContractError("batch_logits on an empty batch");
  std::vector<Tensor<T>> rows;
  rows.reserve(batch.size());
  for (const auto& input : batch) rows.push_back(reshape(logits(input, ctx), {1, 2}));
  return rows.size() == 1 ? rows.front() : concat(rows, 0);
}

template class CnnBaseline<float>;
template class CnnBaseline<double>;
template class TriFormerModel<float>;
template class TriFormerModel<double>;

}  // namespace triformer
