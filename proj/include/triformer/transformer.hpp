// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <vector>

#include "triformer/layers.hpp"

namespace triformer {

struct EncoderConfig {
  std::size_t d_model = 256;
  std::size_t n_heads = 8;
  std::size_t n_layers = 6;
  std::size_t mlp_hidden = 1024;  // 4 * d_model
  double dropout = 0.0;
  double ln_eps = 1e-5;

  /// Throws ValidationError when extents are zero or heads do not divide d_model.
  void validate() const;
};

/// Boolean T x T matrix, true = may attend. The diagonal must be true.
class AttentionMask {
 public:
  explicit AttentionMask(std::size_t tokens);
  AttentionMask(std::size_t tokens, std::vector<bool> allowed);

  std::size_t tokens() const { return tokens_; }
  bool allowed(std::size_t query, std::size_t key) const { return allowed_[query * tokens_ + key]; }
  void set(std::size_t query, std::size_t key, bool allow);

  /// Additive bias: 0 where allowed, -inf elsewhere.
  template <typename T>
  Tensor<T> bias() const;

 private:
  std::size_t tokens_;
  std::vector<bool> allowed_;
};

template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(const ParamScope<T>& scope, std::size_t d_model, std::size_t n_heads);

  /// x: [B, T, d_model]. When `weights` is non-null it receives the
  /// post-softmax attention, [B, heads, T, T].
  Tensor<T> operator()(const Tensor<T>& x, const AttentionMask* mask = nullptr,
                       Tensor<T>* weights = nullptr) const;

  std::size_t heads() const { return n_heads_; }

  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;

 private:
  std::size_t d_model_ = 0;
  std::size_t n_heads_ = 0;
};

/// Pre-norm block: x + MHA(LN(x)), then x + MLP(LN(x)) with a GELU MLP.
template <typename T>
class EncoderLayer {
 public:
  EncoderLayer() = default;
  EncoderLayer(const ParamScope<T>& scope, const EncoderConfig& config);

  Tensor<T> operator()(const Tensor<T>& x, const ForwardContext& ctx,
                       const AttentionMask* mask = nullptr) const;

  LayerNorm<T> ln1;
  MultiHeadAttention<T> attn;
  LayerNorm<T> ln2;
  Linear<T> fc1;
  Linear<T> fc2;

 private:
  double dropout_ = 0.0;
};

/// n_layers encoder layers followed by a final layer norm.
template <typename T>
class EncoderStack {
 public:
  EncoderStack() = default;
  EncoderStack(const ParamScope<T>& scope, const EncoderConfig& config);

  Tensor<T> operator()(const Tensor<T>& x, const ForwardContext& ctx = {},
                       const AttentionMask* mask = nullptr) const;

  const EncoderConfig& config() const { return config_; }
  std::vector<EncoderLayer<T>> layers;
  LayerNorm<T> norm;

 private:
  EncoderConfig config_;
};

}  // namespace triformer
