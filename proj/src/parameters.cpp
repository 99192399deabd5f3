// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include "triformer/parameters.hpp"

#include <cmath>
#include <sstream>

namespace triformer {

InitSpec InitSpec::fan_in(std::size_t fan_in) {
  return {InitKind::kUniform, std::sqrt(1.0 / static_cast<double>(fan_in))};
}

std::string to_string(const InitSpec& init) {
  std::ostringstream os;
  switch (init.kind) {
    case InitKind::kZeros: return "zeros";
    case InitKind::kOnes: return "ones";
    case InitKind::kUniform: os << "uniform(" << -init.scale << "," << init.scale << ")"; break;
    case InitKind::kNormal: os << "normal(0," << init.scale << ")"; break;
  }
  return os.str();
}

template <typename T>
Tensor<T> ParameterSet<T>::create(const std::string& name, Shape shape, InitSpec init) {
  if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
  std::vector<T> values(shape_numel(shape));
  switch (init.kind) {
    case InitKind::kZeros: break;
    case InitKind::kOnes:
      for (auto& v : values) v = T(1);
      break;
    case InitKind::kUniform: {
      std::uniform_real_distribution<double> dist(-init.scale, init.scale);
      for (auto& v : values) v = static_cast<T>(dist(rng_));
      break;
    }
    case InitKind::kNormal: {
      std::normal_distribution<double> dist(0.0, init.scale);
      for (auto& v : values) v = static_cast<T>(dist(rng_));
      break;
    }
  }
  Tensor<T> tensor(std::move(shape), std::move(values));
  tensor.set_requires_grad(true);
  index_.emplace(name, items_.size());
  items_.push_back({name, tensor, init});
  return tensor;
}

template <typename T>
const Parameter<T>* ParameterSet<T>::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &items_[it->second];
}

template <typename T>
Parameter<T>* ParameterSet<T>::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &items_[it->second];
}

template <typename T>
std::size_t ParameterSet<T>::element_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& p : items_) p.tensor.zero_grad();
}

template <typename T>
std::vector<std::vector<T>> ParameterSet<T>::snapshot() const {
  std::vector<std::vector<T>> out;
  out.reserve(items_.size());
  for (const auto& p : items_) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

template <typename T>
void ParameterSet<T>::restore(const std::vector<std::vector<T>>& values) {
  if (values.size() != items_.size()) throw ContractError("restore: parameter count mismatch");
  for (std::size_t i = 0; i < items_.size(); ++i) {
    auto dst = items_[i].tensor.mutable_data();
    if (values[i].size() != dst.size())
      throw ContractError("restore: size mismatch for '" + items_[i].name + "'");
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

template class ParameterSet<float>;
template class ParameterSet<double>;

}  // namespace triformer
