// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include "triformer/fusion.hpp"

namespace triformer {

template <typename T>
FusionClassifier<T>::FusionClassifier(const ParamScope<T>& scope, const ModelConfig& config,
                                      const PlaneAwareEmbedding<T>* image_embedding)
    : d_model_(config.d_model), token_count_(config.token_count()) {
  const std::size_t d = d_model_;
  proj = Linear<T>(scope.child("proj"), 2 * d, d);
  if (config.tie_fusion_embeddings) {
    if (!image_embedding) throw ContractError("tie_fusion_embeddings needs the image branch embedding");
    embedding_ = *image_embedding;
  } else {
    embedding_ = PlaneAwareEmbedding<T>(scope.child("tokens"),
                                        plane_layout(config.extent_h, config.extent_w, config.extent_d), d);
  }
  encoder = EncoderStack<T>(scope.child("encoder"), config.encoder(config.fusion, d));
  head = MlpHead<T>(scope.child("head"), d, std::max<std::size_t>(1, d / 2), 2);
}

template <typename T>
FusedTokenSequence<T> FusionClassifier<T>::fuse_tokens(const Tensor<T>& image_tokens,
                                                       const Tensor<T>& clinical_cls) const {
  if (image_tokens.rank() != 2 || image_tokens.dim(1) != d_model_)
    throw DimensionError("fusion expects image tokens of width " + std::to_string(d_model_) + ", got " +
                         shape_str(image_tokens.shape()));
  if (clinical_cls.numel() != d_model_)
    throw DimensionError("fusion width mismatch: image tokens have width " + std::to_string(image_tokens.dim(1)) +
                         ", clinical class token has width " + std::to_string(clinical_cls.numel()));
  const std::size_t len = image_tokens.dim(0);
  if (len != token_count_)
    throw DimensionError("fusion expects " + std::to_string(token_count_) + " image tokens, got " +
                         std::to_string(len));
  auto copies = index_select(reshape(clinical_cls, {1, d_model_}), std::vector<std::size_t>(len, 0));
  FusedTokenSequence<T> fused;
  fused.concatenated = concat<T>({image_tokens, copies}, 1);
  fused.projected = proj(fused.concatenated);
  fused.tokens = add(add(fused.projected, embedding_.positions), embedding_.plane_rows());
  fused.plane_ids = embedding_.plane_ids;
  return fused;
}

template <typename T>
Tensor<T> FusionClassifier<T>::forward(const FusedTokenSequence<T>& fused, const ForwardContext& ctx) const {
  if (fused.tokens.rank() != 2 || fused.tokens.dim(0) != token_count_)
    throw ContractError("fused sequence length is not H+W+D+4");
  auto out = encoder(reshape(fused.tokens, {1, token_count_, d_model_}), ctx);
  return head(reshape(narrow(out, 1, 0, 1), {d_model_}));
}

template <typename T>
MlpFusion<T>::MlpFusion(const ParamScope<T>& scope, std::size_t d_model)
    : head(scope.child("head"), 2 * d_model, d_model, 2) {}

template <typename T>
Tensor<T> MlpFusion<T>::operator()(const Tensor<T>& image_cls, const Tensor<T>& clinical_cls) const {
  if (image_cls.numel() != clinical_cls.numel())
    throw DimensionError("fusion width mismatch: image class token has width " + std::to_string(image_cls.numel()) +
                         ", clinical class token has width " + std::to_string(clinical_cls.numel()));
  return head(concat<T>({reshape(image_cls, {image_cls.numel()}), reshape(clinical_cls, {clinical_cls.numel()})}, 0));
}

template class FusionClassifier<float>;
template class FusionClassifier<double>;
template class MlpFusion<float>;
template class MlpFusion<double>;

}  // namespace triformer
