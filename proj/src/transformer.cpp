// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include "triformer/transformer.hpp"

#include <cmath>
#include <limits>

namespace triformer {

void EncoderConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || mlp_hidden == 0)
    throw ValidationError("encoder extents must be positive");
  if (d_model % n_heads != 0)
    throw ValidationError("d_model " + std::to_string(d_model) + " is not divisible by " +
                          std::to_string(n_heads) + " heads");
  if (dropout < 0.0 || dropout >= 1.0) throw ValidationError("dropout must lie in [0, 1)");
}

AttentionMask::AttentionMask(std::size_t tokens) : tokens_(tokens), allowed_(tokens * tokens, true) {}

AttentionMask::AttentionMask(std::size_t tokens, std::vector<bool> allowed)
    : tokens_(tokens), allowed_(std::move(allowed)) {
  if (allowed_.size() != tokens * tokens)
    throw DimensionError("attention mask needs " + std::to_string(tokens * tokens) + " entries");
  for (std::size_t i = 0; i < tokens; ++i)
    if (!allowed_[i * tokens + i]) throw ValidationError("attention mask diagonal must be true");
}

void AttentionMask::set(std::size_t query, std::size_t key, bool allow) {
  if (query == key && !allow) throw ValidationError("attention mask diagonal must be true");
  allowed_.at(query * tokens_ + key) = allow;
}

template <typename T>
Tensor<T> AttentionMask::bias() const {
  std::vector<T> values(tokens_ * tokens_);
  for (std::size_t i = 0; i < values.size(); ++i)
    values[i] = allowed_[i] ? T(0) : -std::numeric_limits<T>::infinity();
  return Tensor<T>(Shape{tokens_, tokens_}, std::move(values));
}

template Tensor<float> AttentionMask::bias<float>() const;
template Tensor<double> AttentionMask::bias<double>() const;

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(const ParamScope<T>& scope, std::size_t d_model,
                                          std::size_t n_heads)
    : d_model_(d_model), n_heads_(n_heads) {
  if (n_heads == 0 || d_model % n_heads != 0)
    throw ValidationError("d_model " + std::to_string(d_model) + " is not divisible by " +
                          std::to_string(n_heads) + " heads");
  const auto w = InitSpec::fan_in(d_model);
  wq = scope.create("wq", {d_model, d_model}, w);
  bq = scope.create("bq", {d_model}, InitSpec::zeros());
  wk = scope.create("wk", {d_model, d_model}, w);
  bk = scope.create("bk", {d_model}, InitSpec::zeros());
  wv = scope.create("wv", {d_model, d_model}, w);
  bv = scope.create("bv", {d_model}, InitSpec::zeros());
  wo = scope.create("wo", {d_model, d_model}, w);
  bo = scope.create("bo", {d_model}, InitSpec::zeros());
}

template <typename T>
Tensor<T> MultiHeadAttention<T>::operator()(const Tensor<T>& x, const AttentionMask* mask,
                                            Tensor<T>* weights) const {
  if (x.rank() != 3 || x.dim(2) != d_model_)
    throw DimensionError("attention expects [B, T, " + std::to_string(d_model_) + "], got " +
                         shape_str(x.shape()));
  const std::size_t batch = x.dim(0);
  const std::size_t tokens = x.dim(1);
  const std::size_t head_dim = d_model_ / n_heads_;
  if (mask && mask->tokens() != tokens)
    throw DimensionError("attention mask is " + std::to_string(mask->tokens()) + "x" +
                         std::to_string(mask->tokens()) + " but sequence has " + std::to_string(tokens) +
                         " tokens");

  auto split = [&](const Tensor<T>& t) {
    return permute(reshape(t, {batch, tokens, n_heads_, head_dim}), {0, 2, 1, 3});
  };
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(head_dim));
  auto q = split(scale(linear(x, wq, bq), inv_scale));
  auto k = split(linear(x, wk, bk));
  auto v = split(linear(x, wv, bv));

  auto scores = matmul(q, k, /*transpose_b=*/true);  // [B, h, T, T]
  if (mask) scores = add(scores, mask->bias<T>());
  auto attention = softmax(scores, 3);
  if (weights) *weights = attention;
  auto context = matmul(attention, v);  // [B, h, T, hd]
  auto merged = reshape(permute(context, {0, 2, 1, 3}), {batch, tokens, d_model_});
  return linear(merged, wo, bo);
}

template <typename T>
EncoderLayer<T>::EncoderLayer(const ParamScope<T>& scope, const EncoderConfig& config)
    : ln1(scope.child("ln1"), config.d_model, config.ln_eps),
      attn(scope.child("attn"), config.d_model, config.n_heads),
      ln2(scope.child("ln2"), config.d_model, config.ln_eps),
      fc1(scope.child("mlp.fc1"), config.d_model, config.mlp_hidden),
      fc2(scope.child("mlp.fc2"), config.mlp_hidden, config.d_model),
      dropout_(config.dropout) {}

template <typename T>
Tensor<T> EncoderLayer<T>::operator()(const Tensor<T>& x, const ForwardContext& ctx,
                                      const AttentionMask* mask) const {
  auto drop = [&](const Tensor<T>& t) {
    if (!ctx.training || dropout_ <= 0.0) return t;
    if (!ctx.rng) throw ContractError("dropout in training mode requires an rng");
    return dropout(t, dropout_, *ctx.rng);
  };
  auto h = add(x, drop(attn(ln1(x), mask)));
  return add(h, drop(fc2(gelu(fc1(ln2(h))))));
}

template <typename T>
EncoderStack<T>::EncoderStack(const ParamScope<T>& scope, const EncoderConfig& config)
    : config_(config) {
  config.validate();
  for (std::size_t i = 0; i < config.n_layers; ++i)
    layers.emplace_back(scope.child("layer" + std::to_string(i)), config);
  norm = LayerNorm<T>(scope.child("norm"), config.d_model, config.ln_eps);
}

template <typename T>
Tensor<T> EncoderStack<T>::operator()(const Tensor<T>& x, const ForwardContext& ctx,
                                      const AttentionMask* mask) const {
  Tensor<T> h = x;
  for (const auto& layer : layers) h = layer(h, ctx, mask);
  return norm(h);
}

template class MultiHeadAttention<float>;
template class MultiHeadAttention<double>;
template class EncoderLayer<float>;
template class EncoderLayer<double>;
template class EncoderStack<float>;
template class EncoderStack<double>;

}  // namespace triformer
