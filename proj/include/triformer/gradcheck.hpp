// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "triformer/config.hpp"
#include "triformer/parameters.hpp"

namespace triformer {

struct GradcheckOptions {
  double step = 1e-4;       // stencil spacing
  double tolerance = 1e-4;  // on the relative error
  /// Denominator floor: rel = |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  /// Disagreement between the two embedded central differences above which
  /// the stencil is taken to straddle a kink and is retried with a step 100x
  /// smaller.
  double kink_threshold = 1e-7;
  /// Elements checked per parameter; 0 checks every element.
  std::size_t max_elements = 0;
};

struct GradcheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradcheckReport {
  std::size_t checked = 0;
  std::size_t kink_retries = 0;
  double max_rel_error = 0;
  GradcheckEntry worst;
  /// Largest relative error per parameter, in parameter order.
  std::vector<GradcheckEntry> per_parameter;
  bool passed = true;
};

double relative_error(double analytic, double numeric, double floor);

/// Compares reverse-mode gradients of `loss` against central differences
/// for every element of every parameter in `params`.
GradcheckReport gradcheck(ParameterSet<double>& params, const std::function<Tensor<double>()>& loss,
                          const GradcheckOptions& options = {});

/// Builds the model for `config` in 64-bit, feeds a fixed random batch of two
/// subjects with mixed labels and checks the cross-entropy gradients.
GradcheckReport gradcheck_model(const ModelConfig& config, std::uint64_t seed, const GradcheckOptions& options = {});

}  // namespace triformer
