#include "dualformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace dualformer {

template <typename S>
GradCheckResult grad_check(const ScalarFunction<S>& f, std::vector<Tensor<S>> inputs,
                           const GradCheckOptions& options) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  const Tensor<S> loss = f(inputs);
  backward(loss);
  std::vector<Vector<S>> analytic;
  for (auto& t : inputs)
    analytic.push_back(t.has_grad() ? t.grad() : Vector<S>::Zero(t.numel()));

  std::mt19937_64 rng(options.seed);
  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor<S>& t = inputs[k];
    std::vector<Index> elements(static_cast<std::size_t>(t.numel()));
    std::iota(elements.begin(), elements.end(), Index(0));
    if (options.max_elements_per_input > 0 &&
        static_cast<Index>(elements.size()) > options.max_elements_per_input) {
      std::shuffle(elements.begin(), elements.end(), rng);
      elements.resize(static_cast<std::size_t>(options.max_elements_per_input));
    }
    for (Index e : elements) {
      const S saved = t.mutable_data()[e];
      const auto at = [&](double offset) {
        t.mutable_data()[e] = saved + static_cast<S>(offset);
        return static_cast<double>(f(inputs).item());
      };
      const double h = options.eps;
      const double numeric =
          options.five_point ? (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h)
                             : (at(h) - at(-h)) / (2.0 * h);
      t.mutable_data()[e] = saved;
      const double a = static_cast<double>(analytic[k][e]);
      const double denom = std::max({std::abs(a), std::abs(numeric), options.magnitude_floor});
      const double err = std::abs(a - numeric) / denom;
      ++result.elements_checked;
      if (err > result.max_relative_error || result.elements_checked == 1) {
        result.max_relative_error = std::max(result.max_relative_error, err);
        result.worst_input = k;
        result.worst_element = e;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return result;
}

template GradCheckResult grad_check(const ScalarFunction<float>&, std::vector<Tensor<float>>,
                                    const GradCheckOptions&);
template GradCheckResult grad_check(const ScalarFunction<double>&, std::vector<Tensor<double>>,
                                    const GradCheckOptions&);

}  // namespace dualformer
