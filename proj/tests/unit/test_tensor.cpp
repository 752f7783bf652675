#include "oracles.hpp"

#include "dualformer/gradcheck.hpp"
#include "dualformer/ops.hpp"
#include "dualformer/serialize.hpp"

#include <doctest.h>

#include <sstream>

using namespace dualformer;

namespace {

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Vector<double> v(num_elements(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = d(rng);
  return Tensor<double>::from_vector(shape, v);
}

// out[b][o][y][x] = bias[o] + sum over the group's input channels and the window.
std::vector<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, Index stride,
                                Index pad, Index groups) {
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index O = w.dim(0), Cg = w.dim(1), k = w.dim(2);
  const Index Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  const Index Og = O / groups;
  std::vector<double> out;
  for (Index n = 0; n < B; ++n)
    for (Index o = 0; o < O; ++o)
      for (Index y = 0; y < Ho; ++y)
        for (Index xo = 0; xo < Wo; ++xo) {
          double s = b.defined() ? b[o] : 0.0;
          const Index g = o / Og;
          for (Index c = 0; c < Cg; ++c)
            for (Index i = 0; i < k; ++i)
              for (Index j = 0; j < k; ++j) {
                const Index yy = y * stride - pad + i, xx = xo * stride - pad + j;
                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                s += w[((o * Cg + c) * k + i) * k + j] * x[((n * C + g * Cg + c) * H + yy) * W + xx];
              }
          out.push_back(s);
        }
  return out;
}

}  // namespace

TEST_CASE("matmul matches a triple loop") {
  std::mt19937_64 rng(1);
  for (int it = 0; it < 50; ++it) {
    const auto a = oracle::random_mat(1 + it % 5, 1 + it % 7, rng), b = oracle::random_mat(1 + it % 7, 1 + it % 3, rng);
    CHECK(oracle::max_abs_diff(oracle::to_mat(matmul(oracle::from_mat(a), oracle::from_mat(b))), oracle::matmul(a, b)) <
          1e-12);
  }
}

TEST_CASE("conv2d matches a direct loop for strides, padding and groups") {
  std::mt19937_64 rng(2);
  struct Case { Shape x, w; Index stride, pad, groups; bool bias; };
  const Case cases[] = {{{2, 3, 5, 5}, {4, 3, 3, 3}, 1, 1, 1, true},   {{1, 3, 7, 6}, {2, 3, 3, 3}, 2, 1, 1, false},
                        {{2, 4, 5, 5}, {4, 1, 3, 3}, 1, 1, 4, true},   {{1, 4, 6, 6}, {6, 2, 2, 2}, 2, 0, 2, true},
                        {{2, 3, 4, 4}, {5, 3, 1, 1}, 1, 0, 1, true}};
  for (const auto& c : cases) {
    const auto x = random_tensor(c.x, rng), w = random_tensor(c.w, rng);
    const auto b = c.bias ? random_tensor({c.w[0]}, rng) : Tensor<double>{};
    const auto out = conv2d(x, w, b, {c.stride, c.pad, c.groups});
    const auto ref = conv_oracle(x, w, b, c.stride, c.pad, c.groups);
    REQUIRE(out.numel() == static_cast<Index>(ref.size()));
    for (Index i = 0; i < out.numel(); ++i) CHECK(out[i] == doctest::Approx(ref[static_cast<std::size_t>(i)]).epsilon(1e-12));
  }
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  std::mt19937_64 rng(3);
  for (int it = 0; it < 200; ++it) {
    const auto x = random_tensor({3, 1 + it % 9}, rng);
    const auto s = softmax(x, 1), t = softmax(add_scalar(x, 100.0), 1);
    for (Index r = 0; r < 3; ++r) {
      double total = 0.0;
      for (Index c = 0; c < x.dim(1); ++c) total += s[r * x.dim(1) + c];
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK((s.data() - t.data()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("backward of sum(x * x) is 2x") {
  auto x = Tensor<double>::from_values({2, 2}, {1.0, -2.0, 3.0, 0.5}, true);
  backward(sum(mul(x, x)));
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == -4.0);
  CHECK(x.grad()[3] == 1.0);
}

TEST_CASE("gradients accumulate across uses of one tensor") {
  auto x = Tensor<double>::from_values({3}, {1.0, 2.0, 3.0}, true);
  backward(sum(add(scale(x, 2.0), x)));
  for (Index i = 0; i < 3; ++i) CHECK(x.grad()[i] == 3.0);
}

TEST_CASE("no graph is recorded under NoGradGuard") {
  auto x = Tensor<double>::from_values({2}, {1.0, 2.0}, true);
  NoGradGuard guard;
  const auto y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node().inputs.empty());
}

TEST_CASE("cross entropy of uniform logits is log of the class count") {
  const auto logits = Tensor<double>::zeros({3, 4});
  const std::vector<int> labels{0, 1, 3};
  CHECK(cross_entropy(logits, std::span<const int>(labels)).item() == doctest::Approx(std::log(4.0)));
}

TEST_CASE("gelu at known points") {
  const auto g = gelu(Tensor<double>::from_values({3}, {0.0, 1.0, -1.0}));
  CHECK(g[0] == 0.0);
  CHECK(g[1] == doctest::Approx(0.8413447460685429));
  CHECK(g[2] == doctest::Approx(-0.15865525393145707));
}

TEST_CASE("depth_to_space and space_to_depth are inverse") {
  std::mt19937_64 rng(4);
  const auto x = random_tensor({2, 8, 3, 2}, rng);
  CHECK((space_to_depth(depth_to_space(x, 2), 2).data() - x.data()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("conv2d counts multiply-accumulates") {
  const auto x = Tensor<float>::zeros({2, 3, 8, 8});
  const auto w = Tensor<float>::zeros({4, 3, 3, 3});
  mac_counter() = 0;
  conv2d(x, w, Tensor<float>{}, {1, 1, 1});
  CHECK(mac_counter() == 2ull * 4 * 8 * 8 * 3 * 9);
}

TEST_CASE("shape mismatches throw ShapeError") {
  CHECK_THROWS_AS(add(Tensor<float>::zeros({2, 3}), Tensor<float>::zeros({3, 2})), ShapeError);
  CHECK_THROWS_AS(matmul(Tensor<float>::zeros({2, 3}), Tensor<float>::zeros({2, 3})), ShapeError);
  CHECK_THROWS_AS(depth_to_space(Tensor<float>::zeros({1, 3, 2, 2}), 2), ShapeError);
}

TEST_CASE("tensor serialization stores float32 and rejects truncation") {
  std::mt19937_64 rng(5);
  const auto x = random_tensor({2, 3, 4}, rng);
  std::stringstream ss;
  write_tensor(ss, x);
  const std::string bytes = ss.str();
  std::stringstream in(bytes);
  const auto y = read_tensor<double>(in);
  CHECK(y.shape() == x.shape());
  CHECK(y.data() == x.data().cast<float>().cast<double>());
  std::stringstream cut(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_tensor<double>(cut), FormatError);
}

TEST_CASE("grad_check accepts a correct gradient and flags a wrong one") {
  const Tensor<double> x = Tensor<double>::from_values({3}, {0.3, -1.2, 2.0});
  const ScalarFunction<double> good = [](const std::vector<Tensor<double>>& in) {
    return sum(mul(in[0], mul(in[0], in[0])));
  };
  CHECK(grad_check(good, {x.clone()}).max_relative_error < 1e-8);

  // x^2 with a backward that returns x instead of 2x
  const ScalarFunction<double> bad = [](const std::vector<Tensor<double>>& in) {
    const Vector<double> v = in[0].data().cwiseProduct(in[0].data());
    return sum(detail::make_result<double>(in[0].shape(), v, "bad_square", {in[0]}, [](detail::Node<double>& self) {
      self.inputs[0]->accumulate(self.grad.cwiseProduct(self.inputs[0]->value));
    }));
  };
  const GradCheckResult r = grad_check(bad, {x.clone()});
  CHECK(r.max_relative_error == doctest::Approx(0.5));
}
