// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <vector>

#include "triformer/config.hpp"
#include "triformer/layers.hpp"
#include "triformer/transformer.hpp"

namespace triformer {

/// Plane identifiers used by the plane embedding. kNone marks class and
/// separator positions, which receive no plane vector.
enum class Plane : int { kNone = 0, kCoronal = 1, kSagittal = 2, kAxial = 3 };

/// Token layout [CLS, cor x H, SEP, sag x W, SEP, ax x D, SEP] as plane ids.
std::vector<int> plane_layout(std::size_t h, std::size_t w, std::size_t d);

/// Embedded volume features, [C, H, W, D].
template <typename T>
struct VolumeFeatures {
  Tensor<T> tensor;
  std::string subject_id;
};

/// The three orthogonal slice stacks of a feature volume, in coronal,
/// sagittal, axial order. Each block holds its slices along axis 0:
///   coronal  [H, W, D, C]
///   sagittal [W, H, D, C]
///   axial    [D, H, W, C]
template <typename T>
struct SliceSet {
  std::array<Tensor<T>, 3> blocks;

  std::size_t count() const;
  Plane plane_of(std::size_t index) const;
  /// Slice `index` in global order, shape [a, b, C].
  Tensor<T> slice(std::size_t index) const;
};

/// Image token sequence before the image encoder. `tokens` equals
/// `features + positions + planes` elementwise.
template <typename T>
struct ImageTokenSequence {
  Tensor<T> features;   // I_fe   [L, d_model]
  Tensor<T> positions;  // I_pos  [L, d_model]
  Tensor<T> planes;     // I_pl   [L, d_model], zero rows at CLS/SEP
  Tensor<T> tokens;     // [L, d_model]
  std::vector<int> plane_ids;
};

template <typename T>
struct ImageOutput {
  Tensor<T> tokens;  // [L, d_model]
  Tensor<T> cls;     // [d_model]
};

/// Learned positional table plus plane table (planes 1..3; plane 0 is the
/// zero vector). Shared by the image encoder and the fusion encoder layout.
template <typename T>
struct PlaneAwareEmbedding {
  Tensor<T> positions;  // [L, d_model]
  Tensor<T> planes;     // [3, d_model]
  std::vector<int> plane_ids;

  PlaneAwareEmbedding() = default;
  PlaneAwareEmbedding(const ParamScope<T>& scope, std::vector<int> layout, std::size_t d_model);

  /// Per-token plane vectors, [L, d_model].
  Tensor<T> plane_rows() const;
};

template <typename T>
class ImageBranch {
 public:
  ImageBranch(const ParamScope<T>& scope, const ModelConfig& config);

  /// volume [1, H, W, D] -> [C, H, W, D]
  VolumeFeatures<T> embed_volume(const Tensor<T>& volume) const;
  SliceSet<T> slice_multiview(const VolumeFeatures<T>& features) const;
  /// Shared-parameter ViT over every slice, [(H+W+D), C'].
  Tensor<T> encode_slices(const SliceSet<T>& slices, const ForwardContext& ctx = {}) const;
  ImageTokenSequence<T> assemble_tokens(const Tensor<T>& slice_features) const;
  ImageOutput<T> forward(const Tensor<T>& volume, const ForwardContext& ctx = {}) const;

  std::size_t token_count() const { return token_count_; }
  const PlaneAwareEmbedding<T>& embedding() const { return embedding_; }

  // Convolutional feature embedding.
  Tensor<T> conv1_kernel, conv1_bias, conv2_kernel, conv2_bias;

  // Per-slice ViT.
  Linear<T> patch_embed;
  Tensor<T> vit_cls;        // [d_vit]
  Tensor<T> vit_positions;  // [grid * grid, d_vit]
  EncoderStack<T> vit;
  Linear<T> slice_head;  // d_vit -> C'

  // Slice-token encoder.
  Linear<T> token_proj;  // C' -> d_model
  Tensor<T> cls_token;   // [d_model]
  Tensor<T> sep_token;   // [d_model]
  EncoderStack<T> encoder;

 private:
  Tensor<T> encode_block(const Tensor<T>& block, const ForwardContext& ctx) const;

  ModelConfig config_;
  std::size_t grid_ = 0;
  std::size_t token_count_ = 0;
  PlaneAwareEmbedding<T> embedding_;
};

}  // namespace triformer
