#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "protopool/graph.hpp"

namespace protopool::ad {

/// Builds a scalar from parameter leaves. Must be deterministic: any noise
/// has to be frozen outside the function.
using ScalarFunction = std::function<Var(Graph&, std::span<const Var> params)>;

struct GradCheckEntry {
  double max_abs_error = 0.0;
  /// max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf, 1e-8)
  double max_rel_error = 0.0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> params;
  bool passed = false;
  /// Empty unless probing hit a non-finite value or the function threw.
  std::string diagnostic;

  double max_rel_error() const;
  double max_abs_error() const;
};

/// Compares reverse-mode gradients with central differences of width 2*step.
GradCheckReport finite_diff_check(const ScalarFunction& f, std::vector<Tensor> params,
                                  double step = 1e-5, double tol = 1e-4);

}  // namespace protopool::ad
