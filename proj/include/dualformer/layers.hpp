#pragma once

#include "dualformer/ops.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>

namespace dualformer {

/// Visits named state: learnable parameters and persistent buffers (running
/// statistics, hash norm vectors).
template <typename S>
using StateVisitor = std::function<void(const std::string& name, Tensor<S>& tensor, bool learnable)>;

/// Seeded source of initial weights.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  /// Normal(0, std) truncated to +-2 std by resampling.
  template <typename S>
  Tensor<S> truncated_normal(Shape shape, double std, bool learnable = true) {
    const Index n = num_elements(shape);
    std::normal_distribution<double> dist(0.0, 1.0);
    Vector<S> v(n);
    for (Index i = 0; i < n; ++i) {
      double z = dist(rng_);
      while (std::abs(z) > 2.0) z = dist(rng_);
      v[i] = static_cast<S>(z * std);
    }
    return Tensor<S>::from_vector(std::move(shape), std::move(v), learnable);
  }

  template <typename S>
  Tensor<S> gaussian(Shape shape, bool learnable = false) {
    const Index n = num_elements(shape);
    std::normal_distribution<double> dist(0.0, 1.0);
    Vector<S> v(n);
    for (Index i = 0; i < n; ++i) v[i] = static_cast<S>(dist(rng_));
    return Tensor<S>::from_vector(std::move(shape), std::move(v), learnable);
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

template <typename S>
struct Linear {
  Tensor<S> weight;  // [in, out]
  Tensor<S> bias;    // [out]

  static Linear init(Initializer& init, Index in, Index out, bool zero = false) {
    Linear l;
    l.weight = zero ? Tensor<S>::zeros({in, out}, true)
                    : init.truncated_normal<S>({in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
    l.bias = Tensor<S>::zeros({out}, true);
    return l;
  }
  Tensor<S> operator()(const Tensor<S>& x) const { return linear(x, weight, bias); }
  Index in_features() const { return weight.dim(0); }
  Index out_features() const { return weight.dim(1); }
  void visit(const std::string& prefix, const StateVisitor<S>& f) {
    f(prefix + ".weight", weight, true);
    f(prefix + ".bias", bias, true);
  }
};

template <typename S>
struct Conv2d {
  Tensor<S> weight;  // [O, C/groups, kh, kw]
  Tensor<S> bias;    // [O] or undefined
  Conv2dOptions options;

  static Conv2d init(Initializer& init, Index in, Index out, Index kernel, Conv2dOptions options,
                     bool with_bias, bool zero = false) {
    Conv2d c;
    c.options = options;
    const Index cin_g = in / options.groups;
    const Shape shape{out, cin_g, kernel, kernel};
    const double fan_in = static_cast<double>(cin_g * kernel * kernel);
    c.weight = zero ? Tensor<S>::zeros(shape, true)
                    : init.truncated_normal<S>(shape, std::sqrt(2.0 / fan_in));
    if (with_bias) c.bias = Tensor<S>::zeros({out}, true);
    return c;
  }
  Tensor<S> operator()(const Tensor<S>& x) const { return conv2d(x, weight, bias, options); }
  Index in_channels() const { return weight.dim(1) * options.groups; }
  Index out_channels() const { return weight.dim(0); }
  Index kernel() const { return weight.dim(2); }
  void visit(const std::string& prefix, const StateVisitor<S>& f) {
    f(prefix + ".weight", weight, true);
    if (bias.defined()) f(prefix + ".bias", bias, true);
  }
};

template <typename S>
struct BatchNorm2d {
  Tensor<S> gamma, beta, running_mean, running_var;

  static BatchNorm2d init(Index channels) {
    return {Tensor<S>::full({channels}, S(1), true), Tensor<S>::zeros({channels}, true),
            Tensor<S>::zeros({channels}), Tensor<S>::full({channels}, S(1))};
  }
  Tensor<S> operator()(const Tensor<S>& x, bool training) {
    return batch_norm2d(x, gamma, beta, running_mean, running_var, training);
  }
  void visit(const std::string& prefix, const StateVisitor<S>& f) {
    f(prefix + ".gamma", gamma, true);
    f(prefix + ".beta", beta, true);
    f(prefix + ".running_mean", running_mean, false);
    f(prefix + ".running_var", running_var, false);
  }
};

template <typename S>
struct LayerNorm {
  Tensor<S> gamma, beta;

  static LayerNorm init(Index channels) {
    return {Tensor<S>::full({channels}, S(1), true), Tensor<S>::zeros({channels}, true)};
  }
  Tensor<S> operator()(const Tensor<S>& x) const { return layer_norm_channels(x, gamma, beta); }
  void visit(const std::string& prefix, const StateVisitor<S>& f) {
    f(prefix + ".gamma", gamma, true);
    f(prefix + ".beta", beta, true);
  }
};

}  // namespace dualformer
