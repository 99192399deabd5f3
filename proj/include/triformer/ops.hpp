// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "triformer/tensor.hpp"

// Differentiable tensor operations. Every op records a backward closure when
// any input requires grad; results are fresh tensors (no aliasing).
namespace triformer {

// Elementwise. `b` may equal `a`'s shape or any trailing suffix of it, in
// which case it is broadcast over the leading axes.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
/// Exact (erf) form.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
/// Inverted dropout; identity when p == 0.
template <typename T> Tensor<T> dropout(const Tensor<T>& x, double p, std::mt19937_64& rng);

// Reductions.
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
/// Mean over the last axis; the axis is dropped (rank-1 input gives shape [1]).
template <typename T> Tensor<T> mean_last(const Tensor<T>& x);

// Re-indexing.
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes);
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
/// Gathers sub-tensors along axis 0; indices may repeat (gradients sum).
template <typename T>
Tensor<T> index_select(const Tensor<T>& x, const std::vector<std::size_t>& indices);

/// a[..., m, k] x b[..., k, n]. Leading axes must match, or b may be rank 2
/// and is then shared across the batch. With transpose_b, b is [..., n, k].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

/// x[..., in] * weight[in, out] + bias[out]. `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Max-subtracted softmax along `axis`.
template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

/// Normalises over the last axis, then applies gain and bias (both [last]).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);

/// Mean negative log-likelihood of `labels` under softmax(logits), logits [B, C].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// Cross-correlation, input [Cin, H, W, D], kernel [Cout, Cin, k, k, k],
/// optional bias [Cout]. Output [Cout, H', W', D'] with
/// H' = (H + 2*padding - k) / stride + 1.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 1);

/// Non-overlapping average pooling with window = stride = factor.
template <typename T> Tensor<T> avg_pool3d(const Tensor<T>& x, std::size_t factor);

/// Plain softmax over a span, no taping. Used for scores and metrics.
template <typename T> std::vector<T> softmax_values(std::span<const T> logits);

}  // namespace triformer
