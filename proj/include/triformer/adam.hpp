// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "triformer/parameters.hpp"

namespace triformer {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are kept per parameter in
/// registration order of the ParameterSet.
template <typename T>
class Adam {
 public:
  Adam(ParameterSet<T>& params, AdamConfig config);

  /// Applies one update. Throws ContractError naming the first parameter
  /// that has no gradient buffer.
  void step();
  void zero_grad() { params_->zero_grad(); }

  std::uint64_t steps() const { return step_; }
  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  void set_state(std::vector<std::vector<T>> m, std::vector<std::vector<T>> v, std::uint64_t step);

 private:
  ParameterSet<T>* params_;
  AdamConfig config_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::uint64_t step_ = 0;
};

}  // namespace triformer
