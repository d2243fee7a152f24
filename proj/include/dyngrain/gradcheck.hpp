#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dyngrain/tensor.hpp"

namespace dyngrain {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::int64_t checked = 0;
  std::string worst;  // "input[i] elem j: analytic a vs numeric n"
  bool passed(double tol = 1e-3) const { return max_rel_error < tol; }
};

struct GradCheckOptions {
  float step = 1e-3f;
  /// Denominator floor, as a fraction of the largest analytic gradient
  /// magnitude. Keeps entries that are zero up to float rounding from
  /// dominating the relative error.
  double floor = 1e-2;
  double min_scale = 1e-3;
  std::uint64_t seed = 0;
  /// Multiple of the estimated f32 rounding noise in the numeric quotient
  /// below which a difference is not attributed to the gradient.
  double rounding_margin = 4.0;
  double tol = 1e-3;
  /// Caps the number of elements probed per input (evenly strided); 0 = all.
  std::int64_t max_elements = 0;
};

/// Compares reverse-mode gradients against central finite differences,
/// element by element. A non-scalar output is reduced with random weights.
GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                           std::vector<Tensor> inputs, GradCheckOptions opts = {});

}  // namespace dyngrain
