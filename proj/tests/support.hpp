// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

// Shared oracles for the unit and acceptance tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "triformer/ops.hpp"
#include "triformer/parameters.hpp"
#include "triformer/tensor.hpp"

namespace triformer::testing {

using Td = Tensor<double>;

inline Td random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                        bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  Td t(std::move(shape), std::move(v));
  t.set_requires_grad(requires_grad);
  return t;
}

/// Central-difference check of reverse-mode gradients. The scalar loss is
/// sum(f() * R) for a fixed random R, so every output element contributes.
/// Returns the largest |a - n| / max(|a|, |n|, floor) over all inputs.
inline double max_grad_error(std::vector<Td*> inputs, const std::function<Td()>& f, std::uint64_t seed = 1,
                             double h = 1e-6, double floor = 1e-3) {
  std::mt19937_64 rng(seed);
  Td probe = f();
  Td weights = random_tensor(probe.shape(), rng, -1.0, 1.0, false);
  auto loss = [&] { return sum(mul(f(), weights)); };
  for (auto* x : inputs) x->zero_grad();
  loss().backward();
  double worst = 0;
  NoGradGuard guard;
  for (auto* x : inputs) {
    std::vector<double> analytic(x->numel(), 0.0);
    if (x->has_grad()) std::copy(x->grad().begin(), x->grad().end(), analytic.begin());
    auto values = x->mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      const double up = loss().item();
      values[i] = orig - h;
      const double down = loss().item();
      values[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

/// All-pairs Mann-Whitney statistic: ties count one half.
inline double brute_force_auc(std::span<const double> scores, std::span<const int> labels) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      pairs += 1;
      if (scores[i] > scores[j]) wins += 1;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

/// Fresh empty directory under the system temp path.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("triformer-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

inline bool bitwise_equal(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

}  // namespace triformer::testing

namespace triformer::testing {

/// Overwrites every parameter with uniform(-scale, scale) values.
template <typename T>
void randomize(ParameterSet<T>& params, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& p : params.items())
    for (auto& v : p.tensor.mutable_data()) v = static_cast<T>(u(rng));
}

template <typename T>
void zero_fill(Tensor<T>& t) {
  for (auto& v : t.mutable_data()) v = T(0);
}

/// Pointers to every parameter tensor, for the finite-difference helper.
inline std::vector<Td*> all_tensors(ParameterSet<double>& params) {
  std::vector<Td*> out;
  for (auto& p : params.items()) out.push_back(&p.tensor);
  return out;
}

}  // namespace triformer::testing
