#include "oracles.hpp"

#include "dualformer/flops.hpp"
#include "dualformer/mhpa.hpp"

#include <doctest.h>

using namespace dualformer;

namespace {

Tensor<double> random_image(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Vector<double> v(num_elements(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = d(rng);
  return Tensor<double>::from_vector(shape, v);
}

}  // namespace

TEST_CASE("head layout and importance width") {
  CHECK(HeadLayout::split(64, 2).head_dim == 32);
  CHECK_THROWS(HeadLayout::split(10, 4));
  CHECK(importance_hidden_width(32) == 8);
  CHECK(importance_hidden_width(3) == 1);
}

TEST_CASE("intra attention on a hand-sized cluster") {
  // One channel, one cluster of two tokens: w = x / sum(x), out = w x~ / sum(w).
  const auto x = Tensor<double>::from_values({2, 1}, {1.0, 3.0});
  const auto xt = Tensor<double>::from_values({2, 1}, {2.0, -4.0});
  const auto out = intra_partition_attention(x, xt, Partition::from_assignment({0, 0}, 1), 0.0);
  CHECK(out[0] == doctest::Approx(0.5));
  CHECK(out[1] == doctest::Approx(-3.0));
}

TEST_CASE("partition kernels match loop oracles") {
  std::mt19937_64 rng(21);
  for (int it = 0; it < 100; ++it) {
    const std::size_t n = 1 + static_cast<std::size_t>(it % 20);
    const int H = 1 + it % 2, K = 1 + it % 6;
    const std::size_t C = static_cast<std::size_t>(H) * (1 + static_cast<std::size_t>(it % 4));
    const auto cluster = oracle::random_clusters(n, K, rng);
    const Partition p = Partition::from_assignment(cluster, K);
    const auto x = oracle::random_mat(n, C, rng, 0.05, 1.0), xt = oracle::random_mat(n, C, rng);
    const auto intra = intra_partition_attention(oracle::from_mat(x), oracle::from_mat(xt), p, 1e-6);
    CHECK(oracle::max_abs_diff(oracle::to_mat(intra), oracle::intra(x, xt, cluster, 1e-6)) < 1e-9);

    Initializer init(static_cast<std::uint64_t>(it));
    const auto params = MhpaParams<double>::init(init, static_cast<Index>(C), H, 1, 3);
    const std::vector<double> b1(static_cast<std::size_t>(params.importance_hidden.bias.numel()), 0.0), b2{0.0};
    const auto ref = oracle::inter(xt, cluster, K, H, oracle::to_mat(params.importance_hidden.weight), b1,
                                   oracle::to_mat(params.importance_out.weight), b2);
    CHECK(oracle::max_abs_diff(oracle::to_mat(inter_partition_attention(oracle::from_mat(xt), p, params)), ref) < 1e-9);
  }
}

TEST_CASE("empty clusters get zero importance and zero means") {
  const Partition p = Partition::from_assignment({0, 0, 2}, 4);
  Initializer init(1);
  const auto params = MhpaParams<double>::init(init, 4, 2, 1, 2);
  const auto coef = importance_coefficients(Tensor<double>::from_values({3, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 1, 2, 3}),
                                            p, params);
  for (int h = 0; h < 2; ++h) {
    CHECK(coef[1 * 2 + h] == 0.0);
    CHECK(coef[3 * 2 + h] == 0.0);
    CHECK(coef[0 * 2 + h] + coef[2 * 2 + h] == doctest::Approx(1.0));
  }
}

TEST_CASE("single-cluster importance is exactly one") {
  Initializer init(2);
  const auto params = MhpaParams<double>::init(init, 6, 2, 1, 2);
  std::mt19937_64 rng(3);
  const auto coef = importance_coefficients(oracle::from_mat(oracle::random_mat(5, 6, rng)),
                                            Partition::from_assignment({1, 1, 1, 1, 1}, 4), params);
  CHECK(coef[1 * 2 + 0] == 1.0);
  CHECK(coef[1 * 2 + 1] == 1.0);
}

TEST_CASE("channel_to_spatial without skip is depth_to_space") {
  std::mt19937_64 rng(4);
  const auto x = random_image({1, 8, 2, 2}, rng);
  CHECK(channel_to_spatial(x, 2, Tensor<double>{}).data() == depth_to_space(x, 2).data());
  CHECK_THROWS_AS(channel_to_spatial(x, 2, Tensor<double>::zeros({1, 2, 2, 2})), ShapeError);
}

TEST_CASE("mhpa_forward keeps the shape and adds the skip") {
  std::mt19937_64 rng(5);
  Initializer init(5);
  const auto params = MhpaParams<double>::init(init, 8, 2, 2, 3);
  const auto x = random_image({2, 8, 6, 6}, rng);
  const ForwardContext ctx;
  const auto out = mhpa_forward(x, params, MhpaOptions{}, ctx);
  const auto delta = mhpa_delta(x, params, MhpaOptions{}, ctx);
  CHECK(out.shape() == x.shape());
  CHECK((out.data() - delta.data() - x.data()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(mhpa_forward(random_image({1, 8, 5, 5}, rng), params, MhpaOptions{}, ctx), ShapeError);
}

TEST_CASE("partition tape replays recorded assignments") {
  std::mt19937_64 rng(6);
  Initializer init(6);
  const auto params = MhpaParams<double>::init(init, 8, 2, 1, 3);
  const auto x = random_image({2, 8, 4, 4}, rng);
  PartitionTape tape;
  ForwardContext ctx;
  ctx.tape = &tape;
  const auto first = mhpa_delta(x, params, MhpaOptions{}, ctx, "layer");
  REQUIRE(tape.records().size() == 1);
  CHECK(tape.records()[0].tag == "layer");
  CHECK(tape.records()[0].parts.size() == 4);

  // Replaying on a different input keeps the recorded partitions.
  tape.set_mode(PartitionTape::Mode::replay);
  const auto other = random_image({2, 8, 4, 4}, rng);
  mhpa_delta(other, params, MhpaOptions{}, ctx, "layer");
  CHECK_THROWS_AS(mhpa_delta(other, params, MhpaOptions{}, ctx, "layer"), ContractError);
  tape.set_mode(PartitionTape::Mode::replay);
  CHECK((mhpa_delta(x, params, MhpaOptions{}, ctx).data() - first.data()).cwiseAbs().maxCoeff() == 0.0);
  tape.set_mode(PartitionTape::Mode::replay);
  CHECK_THROWS_AS(mhpa_delta(random_image({1, 8, 4, 4}, rng), params, MhpaOptions{}, ctx), ContractError);
}

TEST_CASE("shared partitions give every head the same assignment") {
  std::mt19937_64 rng(7);
  Initializer init(7);
  const auto params = MhpaParams<double>::init(init, 8, 4, 1, 3);
  const auto tokens = random_image({2, 9, 8}, rng);
  MhpaOptions o;
  o.share_partitions = true;
  const auto parts = partition_tokens(tokens, params, o, ForwardContext{});
  REQUIRE(parts.size() == 8);
  for (int b = 0; b < 2; ++b)
    for (int h = 1; h < 4; ++h) CHECK(parts[b * 4 + h].assignment == parts[b * 4].assignment);
}

TEST_CASE("resampled norms need an rng and vary between calls") {
  std::mt19937_64 rng(8);
  Initializer init(8);
  const auto params = MhpaParams<double>::init(init, 8, 1, 1, 4);
  const auto tokens = random_image({1, 64, 8}, rng);
  MhpaOptions o;
  o.resample_norms = true;
  CHECK_THROWS_AS(partition_tokens(tokens, params, o, ForwardContext{}), ContractError);
  ForwardContext ctx;
  ctx.rng = &rng;
  const auto a = partition_tokens(tokens, params, o, ctx), b = partition_tokens(tokens, params, o, ctx);
  CHECK(a[0].assignment != b[0].assignment);
  const auto frozen1 = partition_tokens(tokens, params, MhpaOptions{}, ctx);
  const auto frozen2 = partition_tokens(tokens, params, MhpaOptions{}, ctx);
  CHECK(frozen1[0].assignment == frozen2[0].assignment);
}

TEST_CASE("single-path options drop the other path") {
  std::mt19937_64 rng(9);
  Initializer init(9);
  const auto params = MhpaParams<double>::init(init, 8, 2, 2, 2);
  const auto x = random_image({1, 8, 4, 4}, rng);
  MhpaOptions intra, inter;
  intra.path = MhpaPath::intra_only;
  inter.path = MhpaPath::inter_only;
  PartitionTape tape;
  ForwardContext ctx;
  ctx.tape = &tape;
  const auto both = mhpa_delta(x, params, MhpaOptions{}, ctx);
  tape.set_mode(PartitionTape::Mode::replay);
  const auto a = mhpa_delta(x, params, intra, ctx);
  tape.set_mode(PartitionTape::Mode::replay);
  const auto b = mhpa_delta(x, params, inter, ctx);
  // Everything after the path split is affine, so the two halves add up
  // to the full branch plus one copy of the shared biases.
  const auto zero = Tensor<double>::zeros({1, 4, 16});
  const auto bias_only = channel_to_spatial(
      conv2d(tokens_to_nchw(params.aggregation(zero), 2, 2), params.upsample.weight, params.upsample.bias, {}), 2,
      Tensor<double>{});
  CHECK((a.data() + b.data() - bias_only.data() - both.data()).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("instrumented MACs equal the analytic MHPA count") {
  Initializer init(10);
  const auto params = MhpaParams<float>::init(init, 16, 2, 2, 3);
  const auto x = Tensor<float>::zeros({1, 16, 8, 8});
  mac_counter() = 0;
  mhpa_delta(x, params, MhpaOptions{}, ForwardContext{});
  CHECK(mac_counter() == mhpa_flops({8, 8, 16, 2, 2, 3, MhpaPath::both}));
}
