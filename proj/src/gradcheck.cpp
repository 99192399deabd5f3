// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include "triformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "triformer/clinical.hpp"
#include "triformer/model.hpp"

namespace triformer {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradcheckReport gradcheck(ParameterSet<double>& params, const std::function<Tensor<double>()>& loss,
                          const GradcheckOptions& options) {
  params.zero_grad();
  loss().backward();

  GradcheckReport report;
  NoGradGuard no_grad;
  for (auto& p : params.items()) {
    GradcheckEntry worst{p.name, 0, 0, 0, -1};
    const std::vector<double> analytic = p.tensor.has_grad()
                                             ? std::vector<double>(p.tensor.grad().begin(), p.tensor.grad().end())
                                             : std::vector<double>(p.tensor.numel(), 0.0);
    auto values = p.tensor.mutable_data();
    const std::size_t count =
        options.max_elements ? std::min(options.max_elements, values.size()) : values.size();
    for (std::size_t i = 0; i < count; ++i) {
      const double original = values[i];
      auto at = [&](double offset) {
        values[i] = original + offset;
        return loss().item();
      };
      // Fourth-order central stencil. On a smooth function the two embedded
      // central differences agree to O(h^2); a larger gap means a ReLU kink
      // lies inside the stencil, so the step shrinks until it does not.
      double numeric = 0;
      for (double h = options.step;; h *= 0.01) {
        const double d1 = (at(h) - at(-h)) / (2 * h);
        const double d2 = (at(2 * h) - at(-2 * h)) / (4 * h);
        numeric = (4 * d1 - d2) / 3;
        if (std::abs(d1 - d2) <= options.kink_threshold * std::max(1.0, std::abs(numeric)) || h < 1e-7) break;
        ++report.kink_retries;
      }
      values[i] = original;
      const double rel = relative_error(analytic[i], numeric, options.floor);
      ++report.checked;
      if (rel > worst.rel_error) worst = {p.name, i, analytic[i], numeric, rel};
    }
    if (report.worst.name.empty() || worst.rel_error > report.max_rel_error) {
      report.max_rel_error = std::max(0.0, worst.rel_error);
      report.worst = worst;
    }
    report.per_parameter.push_back(worst);
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

GradcheckReport gradcheck_model(const ModelConfig& config, std::uint64_t seed, const GradcheckOptions& options) {
  TriFormerModel<double> model(config, seed);
  std::mt19937_64 rng(seed ^ 0x9c0ffee);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<ModelInput<double>> batch;
  for (int b = 0; b < 2; ++b) {
    std::vector<double> voxels(config.extent_h * config.extent_w * config.extent_d);
    for (auto& v : voxels) v = uni(rng);
    std::vector<double> clinical(kClinicalModalities);
    for (auto& v : clinical) v = uni(rng);
    batch.push_back({Tensor<double>(Shape{1, config.extent_h, config.extent_w, config.extent_d}, voxels),
                     Tensor<double>(Shape{kClinicalModalities}, clinical)});
  }
  const std::vector<int> labels{0, 1};
  return gradcheck(model.parameters(), [&] { return cross_entropy(model.batch_logits(batch), labels); }, options);
}

}  // namespace triformer
