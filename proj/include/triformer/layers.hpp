// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <random>
#include <string>

#include "triformer/ops.hpp"
#include "triformer/parameters.hpp"

namespace triformer {

/// Per-call state for layers whose behaviour differs between training and
/// evaluation (dropout). A null rng means no stochastic layer may fire.
struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(const ParamScope<T>& scope, std::size_t in, std::size_t out)
      : weight(scope.create("weight", {in, out}, InitSpec::fan_in(in))),
        bias(scope.create("bias", {out}, InitSpec::zeros())) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;
  T eps = T(1e-5);

  LayerNorm() = default;
  LayerNorm(const ParamScope<T>& scope, std::size_t width, double epsilon)
      : gain(scope.create("gain", {width}, InitSpec::ones())),
        bias(scope.create("bias", {width}, InitSpec::zeros())),
        eps(static_cast<T>(epsilon)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias, eps); }
};

/// in -> hidden -> ReLU -> out. Used by every classification head.
template <typename T>
struct MlpHead {
  Linear<T> fc1;
  Linear<T> fc2;

  MlpHead() = default;
  MlpHead(const ParamScope<T>& scope, std::size_t in, std::size_t hidden, std::size_t out)
      : fc1(scope.child("fc1"), in, hidden), fc2(scope.child("fc2"), hidden, out) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(relu(fc1(x))); }
};

}  // namespace triformer
