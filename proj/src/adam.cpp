// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include "triformer/adam.hpp"

#include <cmath>

namespace triformer {

template <typename T>
Adam<T>::Adam(ParameterSet<T>& params, AdamConfig config) : params_(&params), config_(config) {
  for (const auto& p : params.items()) {
    m_.emplace_back(p.tensor.numel(), T(0));
    v_.emplace_back(p.tensor.numel(), T(0));
  }
}

template <typename T>
void Adam<T>::step() {
  auto& items = params_->items();
  if (items.size() != m_.size()) throw ContractError("Adam: parameter set changed after construction");
  for (const auto& p : items)
    if (!p.tensor.has_grad()) throw ContractError("Adam: parameter '" + p.name + "' has no gradient");

  ++step_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto values = items[i].tensor.mutable_data();
    const auto grads = items[i].tensor.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grads[j];
      const double mj = b1 * m[j] + (1.0 - b1) * g;
      const double vj = b2 * v[j] + (1.0 - b2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double m_hat = mj / correction1;
      const double v_hat = vj / correction2;
      values[j] = static_cast<T>(values[j] - config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps));
    }
  }
}

template <typename T>
void Adam<T>::set_state(std::vector<std::vector<T>> m, std::vector<std::vector<T>> v,
                        std::uint64_t step) {
  if (m.size() != m_.size() || v.size() != v_.size())
    throw ContractError("Adam: state does not match parameter count");
  for (std::size_t i = 0; i < m_.size(); ++i)
    if (m[i].size() != m_[i].size() || v[i].size() != v_[i].size())
      throw ContractError("Adam: moment shape mismatch for '" + params_->items()[i].name + "'");
  m_ = std::move(m);
  v_ = std::move(v);
  step_ = step;
}

template class Adam<float>;
template class Adam<double>;

}  // namespace triformer
