// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include "triformer/image_branch.hpp"

#include <algorithm>

namespace triformer {

std::vector<int> plane_layout(std::size_t h, std::size_t w, std::size_t d) {
  std::vector<int> ids;
  ids.reserve(h + w + d + 4);
  ids.push_back(0);
  ids.insert(ids.end(), h, static_cast<int>(Plane::kCoronal));
  ids.push_back(0);
  ids.insert(ids.end(), w, static_cast<int>(Plane::kSagittal));
  ids.push_back(0);
  ids.insert(ids.end(), d, static_cast<int>(Plane::kAxial));
  ids.push_back(0);
  return ids;
}

template <typename T>
std::size_t SliceSet<T>::count() const {
  return blocks[0].dim(0) + blocks[1].dim(0) + blocks[2].dim(0);
}

template <typename T>
Plane SliceSet<T>::plane_of(std::size_t index) const {
  for (int b = 0; b < 3; ++b) {
    if (index < blocks[b].dim(0)) return static_cast<Plane>(b + 1);
    index -= blocks[b].dim(0);
  }
  throw DimensionError("slice index out of range");
}

template <typename T>
Tensor<T> SliceSet<T>::slice(std::size_t index) const {
  for (const auto& block : blocks) {
    if (index < block.dim(0)) {
      const Shape& s = block.shape();
      return reshape(narrow(block, 0, index, 1), {s[1], s[2], s[3]});
    }
    index -= block.dim(0);
  }
  throw DimensionError("slice index out of range");
}

template <typename T>
PlaneAwareEmbedding<T>::PlaneAwareEmbedding(const ParamScope<T>& scope, std::vector<int> layout,
                                            std::size_t d_model)
    : positions(scope.create("pos", {layout.size(), d_model}, InitSpec::embedding())),
      planes(scope.create("plane", {3, d_model}, InitSpec::embedding())),
      plane_ids(std::move(layout)) {}

template <typename T>
Tensor<T> PlaneAwareEmbedding<T>::plane_rows() const {
  const std::size_t width = planes.dim(1);
  Tensor<T> none(Shape{1, width}, T(0));
  std::vector<std::size_t> idx(plane_ids.begin(), plane_ids.end());
  return index_select(concat<T>({none, planes}, 0), idx);
}

template <typename T>
ImageBranch<T>::ImageBranch(const ParamScope<T>& scope, const ModelConfig& config) : config_(config) {
  config.validate();
  const std::size_t c = config.embed_channels;
  const std::size_t c_half = std::max<std::size_t>(1, c / 2);
  const std::size_t p = config.patch_size;
  const std::size_t dv = config.vit_width();
  const std::size_t d = config.d_model;

  auto embed = scope.child("embed");
  conv1_kernel = embed.create("conv1.kernel", {c_half, 1, 3, 3, 3}, InitSpec::fan_in(27));
  conv1_bias = embed.create("conv1.bias", {c_half}, InitSpec::zeros());
  conv2_kernel = embed.create("conv2.kernel", {c, c_half, 3, 3, 3}, InitSpec::fan_in(27 * c_half));
  conv2_bias = embed.create("conv2.bias", {c}, InitSpec::zeros());

  grid_ = std::max({config.extent_h, config.extent_w, config.extent_d}) / p;
  auto vit_scope = scope.child("vit");
  patch_embed = Linear<T>(vit_scope.child("patch"), p * p * c, dv);
  vit_cls = vit_scope.create("cls", {dv}, InitSpec::embedding());
  vit_positions = vit_scope.create("pos", {grid_ * grid_, dv}, InitSpec::embedding());
  vit = EncoderStack<T>(vit_scope, config.encoder(config.vit, dv));
  slice_head = Linear<T>(vit_scope.child("head"), dv, config.slice_features);

  auto tok = scope.child("tokens");
  token_proj = Linear<T>(tok.child("proj"), config.slice_features, d);
  cls_token = tok.create("cls", {d}, InitSpec::embedding());
  sep_token = tok.create("sep", {d}, InitSpec::embedding());
  embedding_ = PlaneAwareEmbedding<T>(tok, plane_layout(config.extent_h, config.extent_w, config.extent_d), d);
  encoder = EncoderStack<T>(scope.child("encoder"), config.encoder(config.image, d));

  token_count_ = config.token_count();
  if (embedding_.plane_ids.size() != token_count_)
    throw ContractError("image token layout does not have H+W+D+4 entries");
}

template <typename T>
VolumeFeatures<T> ImageBranch<T>::embed_volume(const Tensor<T>& volume) const {
  const Shape expected{1, config_.extent_h, config_.extent_w, config_.extent_d};
  if (volume.shape() != expected)
    throw DimensionError("image branch built for volume " + shape_str(expected) + ", got " +
                         shape_str(volume.shape()));
  auto h = relu(conv3d(volume, conv1_kernel, conv1_bias, 1, 1));
  return {conv3d(h, conv2_kernel, conv2_bias, 1, 1), {}};
}

template <typename T>
SliceSet<T> ImageBranch<T>::slice_multiview(const VolumeFeatures<T>& features) const {
  const auto& f = features.tensor;
  if (f.rank() != 4) throw DimensionError("slice_multiview expects [C, H, W, D], got " + shape_str(f.shape()));
  return SliceSet<T>{{permute(f, {1, 2, 3, 0}), permute(f, {2, 1, 3, 0}), permute(f, {3, 1, 2, 0})}};
}

template <typename T>
Tensor<T> ImageBranch<T>::encode_block(const Tensor<T>& block, const ForwardContext& ctx) const {
  const Shape& s = block.shape();  // [n, a, b, C]
  const std::size_t p = config_.patch_size;
  if (s[1] % p != 0 || s[2] % p != 0)
    throw DimensionError("slice " + shape_str({s[1], s[2]}) + " not divisible by patch size " + std::to_string(p));
  const std::size_t n = s[0], ga = s[1] / p, gb = s[2] / p, ch = s[3];
  const std::size_t dv = config_.vit_width();

  auto patches = reshape(permute(reshape(block, {n, ga, p, gb, p, ch}), {0, 1, 3, 2, 4, 5}),
                         {n, ga * gb, p * p * ch});
  std::vector<std::size_t> grid_index;
  for (std::size_t r = 0; r < ga; ++r)
    for (std::size_t c = 0; c < gb; ++c) grid_index.push_back(r * grid_ + c);
  auto embedded = add(patch_embed(patches), index_select(vit_positions, grid_index));
  auto cls = index_select(reshape(vit_cls, {1, 1, dv}), std::vector<std::size_t>(n, 0));
  auto encoded = vit(concat<T>({cls, embedded}, 1), ctx);
  return slice_head(reshape(narrow(encoded, 1, 0, 1), {n, dv}));
}

template <typename T>
Tensor<T> ImageBranch<T>::encode_slices(const SliceSet<T>& slices, const ForwardContext& ctx) const {
  std::vector<Tensor<T>> parts;
  for (const auto& block : slices.blocks) parts.push_back(encode_block(block, ctx));
  return concat(parts, 0);
}

template <typename T>
ImageTokenSequence<T> ImageBranch<T>::assemble_tokens(const Tensor<T>& slice_features) const {
  const std::size_t h = config_.extent_h, w = config_.extent_w, d = config_.extent_d;
  const std::size_t width = config_.d_model;
  if (slice_features.rank() != 2 || slice_features.dim(0) != h + w + d ||
      slice_features.dim(1) != config_.slice_features)
    throw DimensionError("assemble_tokens expects [" + std::to_string(h + w + d) + ", " +
                         std::to_string(config_.slice_features) + "], got " + shape_str(slice_features.shape()));
  auto projected = token_proj(slice_features);
  auto cls = reshape(cls_token, {1, width});
  auto sep = reshape(sep_token, {1, width});
  auto features = concat<T>({cls, narrow(projected, 0, 0, h), sep, narrow(projected, 0, h, w), sep,
                             narrow(projected, 0, h + w, d), sep},
                            0);
  ImageTokenSequence<T> seq;
  seq.features = features;
  seq.positions = embedding_.positions;
  seq.planes = embedding_.plane_rows();
  seq.tokens = add(add(features, seq.positions), seq.planes);
  seq.plane_ids = embedding_.plane_ids;
  if (seq.tokens.dim(0) != token_count_) throw ContractError("image token count is not H+W+D+4");
  return seq;
}

template <typename T>
ImageOutput<T> ImageBranch<T>::forward(const Tensor<T>& volume, const ForwardContext& ctx) const {
  auto seq = assemble_tokens(encode_slices(slice_multiview(embed_volume(volume)), ctx));
  const std::size_t width = config_.d_model;
  auto out = reshape(encoder(reshape(seq.tokens, {1, token_count_, width}), ctx), {token_count_, width});
  if (out.dim(0) != token_count_) throw ContractError("image token count is not H+W+D+4");
  return {out, reshape(narrow(out, 0, 0, 1), {width})};
}

template struct SliceSet<float>;
template struct SliceSet<double>;
template struct PlaneAwareEmbedding<float>;
template struct PlaneAwareEmbedding<double>;
template class ImageBranch<float>;
template class ImageBranch<double>;

}  // namespace triformer
