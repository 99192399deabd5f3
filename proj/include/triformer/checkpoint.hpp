// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "triformer/adam.hpp"
#include "triformer/parameters.hpp"

// Binary checkpoint, little-endian:
//   "TRIF" | u32 version | u32 record count
//   per record: u32 name length | UTF-8 name | u32 rank | u64 extent * rank | f32 * numel
// Adam state, when present, follows the model parameters as records named
// "adam.m.<param>", "adam.v.<param>" and "adam.t" (step count, shape [1]).
namespace triformer {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

void write_checkpoint_records(const std::filesystem::path& path,
                              const std::vector<CheckpointRecord>& records);
std::vector<CheckpointRecord> read_checkpoint_records(const std::filesystem::path& path);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParameterSet<T>& params,
                     const Adam<T>* adam = nullptr);

/// Loads values into an already-built parameter set. Every parameter must be
/// present with an identical shape. Adam state is restored when `adam` is
/// given and the file carries it.
template <typename T>
void load_checkpoint(const std::filesystem::path& path, ParameterSet<T>& params,
                     Adam<T>* adam = nullptr);

}  // namespace triformer
