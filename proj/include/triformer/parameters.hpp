// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "triformer/tensor.hpp"

namespace triformer {

enum class InitKind { kZeros, kOnes, kUniform, kNormal };

/// How a parameter was initialised: uniform(-scale, scale) or normal(0, scale).
struct InitSpec {
  InitKind kind = InitKind::kZeros;
  double scale = 0.0;

  static InitSpec zeros() { return {InitKind::kZeros, 0.0}; }
  static InitSpec ones() { return {InitKind::kOnes, 0.0}; }
  /// uniform(-sqrt(1/fan_in), +sqrt(1/fan_in))
  static InitSpec fan_in(std::size_t fan_in);
  /// normal(0, 0.02), used for every learned embedding and token.
  static InitSpec embedding() { return {InitKind::kNormal, 0.02}; }
};

std::string to_string(const InitSpec& init);

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  InitSpec init;
};

/// Owns every trainable tensor of a model under a unique dotted name, in
/// registration order. Initial values are drawn in double precision from one
/// seeded stream, so float and double models built from the same seed agree.
template <typename T>
class ParameterSet {
 public:
  explicit ParameterSet(std::uint64_t seed = 0) : rng_(seed) {}
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) = default;
  ParameterSet& operator=(ParameterSet&&) = default;

  Tensor<T> create(const std::string& name, Shape shape, InitSpec init);

  const std::vector<Parameter<T>>& items() const { return items_; }
  std::vector<Parameter<T>>& items() { return items_; }
  std::size_t size() const { return items_.size(); }
  const Parameter<T>* find(const std::string& name) const;
  Parameter<T>* find(const std::string& name);
  std::size_t element_count() const;

  void zero_grad();
  std::vector<std::vector<T>> snapshot() const;
  void restore(const std::vector<std::vector<T>>& values);

 private:
  std::vector<Parameter<T>> items_;
  std::unordered_map<std::string, std::size_t> index_;
  std::mt19937_64 rng_;
};

/// Prefixing helper handed to sub-modules so names compose as
/// "<branch>.<stack>.layer<i>.<sublayer>.<weight>".
template <typename T>
class ParamScope {
 public:
  ParamScope(ParameterSet<T>& set, std::string prefix) : set_(&set), prefix_(std::move(prefix)) {}
  ParamScope child(const std::string& name) const { return {*set_, join(name)}; }
  Tensor<T> create(const std::string& name, Shape shape, InitSpec init) const {
    return set_->create(join(name), std::move(shape), init);
  }
  const std::string& prefix() const { return prefix_; }
  ParameterSet<T>& set() const { return *set_; }

 private:
  std::string join(const std::string& name) const { return prefix_.empty() ? name : prefix_ + "." + name; }
  ParameterSet<T>* set_;
  std::string prefix_;
};

}  // namespace triformer
