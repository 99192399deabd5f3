// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "triformer/config.hpp"
#include "triformer/image_branch.hpp"
#include "triformer/layers.hpp"
#include "triformer/transformer.hpp"

namespace triformer {

/// Fused sequence before the fusion encoder. Row i of `concatenated` is
/// [image_token_i, clinical_cls]; `tokens` = proj(concatenated) + positions +
/// planes.
template <typename T>
struct FusedTokenSequence {
  Tensor<T> concatenated;  // [L, 2 d_model]
  Tensor<T> projected;     // [L, d_model]
  Tensor<T> tokens;        // [L, d_model]
  std::vector<int> plane_ids;
};

/// Modality fusion transformer: every image token is paired with a copy of
/// the clinical class token, projected back to d_model, embedded with the
/// image layout and encoded. Position 0 feeds the classification head.
template <typename T>
class FusionClassifier {
 public:
  /// `image_embedding` is used only when config.tie_fusion_embeddings is set.
  FusionClassifier(const ParamScope<T>& scope, const ModelConfig& config,
                   const PlaneAwareEmbedding<T>* image_embedding = nullptr);

  FusedTokenSequence<T> fuse_tokens(const Tensor<T>& image_tokens, const Tensor<T>& clinical_cls) const;
  /// logits [2]
  Tensor<T> forward(const FusedTokenSequence<T>& fused, const ForwardContext& ctx = {}) const;

  const PlaneAwareEmbedding<T>& embedding() const { return embedding_; }

  Linear<T> proj;  // 2 d_model -> d_model
  EncoderStack<T> encoder;
  MlpHead<T> head;  // d_model -> d_model/2 -> 2

 private:
  std::size_t d_model_;
  std::size_t token_count_;
  PlaneAwareEmbedding<T> embedding_;
};

/// concat(image_cls, clinical_cls) -> 2d -> d -> 2. Ablation comparator.
template <typename T>
class MlpFusion {
 public:
  MlpFusion(const ParamScope<T>& scope, std::size_t d_model);
  Tensor<T> operator()(const Tensor<T>& image_cls, const Tensor<T>& clinical_cls) const;

  MlpHead<T> head;
};

}  // namespace triformer
