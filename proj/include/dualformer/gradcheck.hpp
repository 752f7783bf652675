#pragma once

#include "dualformer/tensor.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace dualformer {

template <typename S>
using ScalarFunction = std::function<Tensor<S>(const std::vector<Tensor<S>>&)>;

struct GradCheckOptions {
  double eps = 1e-3;
  /// Fourth-order stencil (f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h;
  /// otherwise the central difference (f(x+h) - f(x-h)) / 2h.
  bool five_point = true;
  /// Elements probed per input; 0 probes every element.
  Index max_elements_per_input = 0;
  std::uint64_t seed = 0;
  /// Smallest denominator of the relative error. Central differences cannot
  /// resolve gradients much below 1e-16 |f| / eps, so smaller ones are
  /// compared on an absolute scale.
  double magnitude_floor = 1e-6;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  Index worst_element = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  Index elements_checked = 0;
};

/// Compares reverse-mode gradients of a scalar-valued `f` at `inputs` with
/// finite differences of step `eps`. The relative error of
/// one element is |a - n| / max(|a|, |n|, magnitude_floor). Inputs are restored on
/// return; their accumulated gradients are cleared.
template <typename S>
GradCheckResult grad_check(const ScalarFunction<S>& f, std::vector<Tensor<S>> inputs,
                           const GradCheckOptions& options = {});

}  // namespace dualformer
