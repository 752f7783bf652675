#include "dualformer/audit.hpp"

#include "dualformer/blocks.hpp"
#include "dualformer/ops.hpp"

#include <functional>
#include <memory>
#include <random>

namespace dualformer {

namespace {

using T = Tensor<double>;

struct Setup {
  std::vector<T> inputs;
  ScalarFunction<double> f;
};
using Builder = std::function<Setup(std::mt19937_64&)>;

T randn(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Vector<double> v(num_elements(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = dist(rng);
  return T::from_vector(shape, std::move(v));
}

T uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Vector<double> v(num_elements(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = dist(rng);
  return T::from_vector(shape, std::move(v));
}

// Reduces any output to a scalar with weights drawn on first use and then fixed.
class Weigher {
 public:
  explicit Weigher(std::uint64_t seed) : seed_(seed), weights_(std::make_shared<T>()) {}
  T operator()(const T& out) const {
    if (!weights_->defined()) {
      std::mt19937_64 rng(seed_);
      *weights_ = randn(out.shape(), rng);
    }
    return sum(mul(out, *weights_));
  }

 private:
  std::uint64_t seed_;
  std::shared_ptr<T> weights_;
};

Partition random_partition(Index n, int K, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, K - 1);
  std::vector<int> a(static_cast<std::size_t>(n));
  for (auto& v : a) v = pick(rng);
  return Partition::from_assignment(std::move(a), K);
}

std::vector<Partition> random_partitions(Index count, Index n, int K, std::mt19937_64& rng) {
  std::vector<Partition> parts;
  for (Index i = 0; i < count; ++i) parts.push_back(random_partition(n, K, rng));
  return parts;
}

// Context whose partitions are recorded on the first call and replayed after.
class FrozenPartitions {
 public:
  FrozenPartitions() : tape_(std::make_shared<PartitionTape>()) {}
  ForwardContext context(bool training) const {
    if (!tape_->records().empty()) tape_->set_mode(PartitionTape::Mode::replay);
    ForwardContext ctx;
    ctx.training = training;
    ctx.tape = tape_.get();
    return ctx;
  }

 private:
  std::shared_ptr<PartitionTape> tape_;
};

template <typename S>
void randomize_zero_weights(const std::function<void(const StateVisitor<S>&)>& visit, std::mt19937_64& rng) {
  visit([&](const std::string&, Tensor<S>& t, bool learnable) {
    if (!learnable || t.rank() < 2 || !t.data().isZero(0)) return;
    std::normal_distribution<double> dist(0.0, 0.1);
    for (Index i = 0; i < t.numel(); ++i) t.mutable_data()[i] = static_cast<S>(dist(rng));
  });
}

std::vector<std::pair<std::string, Builder>> builders() {
  std::vector<std::pair<std::string, Builder>> b;
  const auto unary = [&b](const std::string& name, Shape shape, std::function<T(const T&)> op) {
    b.emplace_back(name, [shape, op](std::mt19937_64& rng) {
      Weigher w(rng());
      return Setup{{randn(shape, rng)}, [op, w](const std::vector<T>& in) { return w(op(in[0])); }};
    });
  };
  const auto binary = [&b](const std::string& name, Shape sa, Shape sb, std::function<T(const T&, const T&)> op) {
    b.emplace_back(name, [sa, sb, op](std::mt19937_64& rng) {
      Weigher w(rng());
      return Setup{{randn(sa, rng), randn(sb, rng)},
                   [op, w](const std::vector<T>& in) { return w(op(in[0], in[1])); }};
    });
  };

  binary("add", {3, 4}, {3, 4}, [](const T& a, const T& c) { return add(a, c); });
  binary("sub", {3, 4}, {3, 4}, [](const T& a, const T& c) { return sub(a, c); });
  binary("mul", {3, 4}, {3, 4}, [](const T& a, const T& c) { return mul(a, c); });
  unary("scale", {3, 4}, [](const T& a) { return scale(a, 1.7); });
  unary("add_scalar", {3, 4}, [](const T& a) { return add_scalar(a, 0.3); });
  binary("add_bias", {2, 3, 2, 2}, {3}, [](const T& a, const T& c) { return add_bias(a, c); });
  b.emplace_back("sum", [](std::mt19937_64& rng) {
    return Setup{{randn({3, 4}, rng)}, [](const std::vector<T>& in) { return sum(in[0]); }};
  });
  b.emplace_back("mean", [](std::mt19937_64& rng) {
    return Setup{{randn({3, 4}, rng)}, [](const std::vector<T>& in) { return mean(in[0]); }};
  });
  binary("matmul", {3, 4}, {4, 2}, [](const T& a, const T& c) { return matmul(a, c); });
  unary("transpose", {3, 4}, [](const T& a) { return transpose(a); });
  unary("reshape", {3, 4}, [](const T& a) { return reshape(a, {2, 6}); });
  unary("softmax_rows", {3, 5}, [](const T& a) { return softmax(a, 1); });
  unary("softmax_columns", {3, 5}, [](const T& a) { return softmax(a, 0); });
  unary("sigmoid", {3, 4}, [](const T& a) { return sigmoid(a); });
  unary("gelu", {3, 4}, [](const T& a) { return gelu(a); });
  b.emplace_back("linear", [](std::mt19937_64& rng) {
    Weigher w(rng());
    return Setup{{randn({2, 3, 4}, rng), randn({4, 5}, rng), randn({5}, rng)},
                 [w](const std::vector<T>& in) { return w(linear(in[0], in[1], in[2])); }};
  });
  const auto conv_case = [&b](const std::string& name, Shape x, Shape wt, Conv2dOptions o, bool bias) {
    b.emplace_back(name, [=](std::mt19937_64& rng) {
      Weigher w(rng());
      std::vector<T> in{randn(x, rng), randn(wt, rng)};
      if (bias) in.push_back(randn({wt[0]}, rng));
      return Setup{in, [w, o, bias](const std::vector<T>& v) {
                     return w(conv2d(v[0], v[1], bias ? v[2] : T{}, o));
                   }};
    });
  };
  conv_case("conv2d", {2, 3, 5, 5}, {4, 3, 3, 3}, {2, 1, 1}, true);
  conv_case("conv2d_pointwise", {2, 3, 4, 4}, {5, 3, 1, 1}, {1, 0, 1}, true);
  conv_case("conv2d_depthwise", {2, 3, 5, 5}, {3, 1, 3, 3}, {1, 1, 3}, false);
  conv_case("conv2d_grouped_strided", {1, 4, 6, 6}, {4, 2, 2, 2}, {2, 0, 2}, true);
  const auto bn_case = [&b](const std::string& name, bool training) {
    b.emplace_back(name, [training](std::mt19937_64& rng) {
      Weigher w(rng());
      auto rm = std::make_shared<T>(randn({3}, rng, 0.1));
      auto rv = std::make_shared<T>(uniform({3}, rng, 0.5, 1.5));
      return Setup{{randn({3, 3, 3, 3}, rng), uniform({3}, rng, 0.5, 1.5), randn({3}, rng)},
                   [w, rm, rv, training](const std::vector<T>& in) {
                     T m = rm->clone(), v = rv->clone();
                     return w(batch_norm2d(in[0], in[1], in[2], m, v, training));
                   }};
    });
  };
  bn_case("batch_norm2d_train", true);
  bn_case("batch_norm2d_eval", false);
  b.emplace_back("layer_norm_channels", [](std::mt19937_64& rng) {
    Weigher w(rng());
    return Setup{{randn({2, 4, 2, 3}, rng), uniform({4}, rng, 0.5, 1.5), randn({4}, rng)},
                 [w](const std::vector<T>& in) { return w(layer_norm_channels(in[0], in[1], in[2])); }};
  });
  unary("global_avg_pool", {2, 3, 3, 2}, [](const T& a) { return global_avg_pool(a); });
  binary("concat", {2, 3, 2, 2}, {2, 1, 2, 2}, [](const T& a, const T& c) { return concat<double>({a, c}, 1); });
  unary("slice", {2, 5, 2, 2}, [](const T& a) { return slice(a, 1, 1, 3); });
  unary("depth_to_space", {1, 8, 2, 3}, [](const T& a) { return depth_to_space(a, 2); });
  unary("space_to_depth", {1, 2, 4, 6}, [](const T& a) { return space_to_depth(a, 2); });
  unary("nchw_to_tokens", {2, 3, 2, 3}, [](const T& a) { return nchw_to_tokens(a); });
  unary("tokens_to_nchw", {2, 6, 3}, [](const T& a) { return tokens_to_nchw(a, 2, 3); });
  b.emplace_back("cross_entropy", [](std::mt19937_64& rng) {
    std::uniform_int_distribution<int> label(0, 4);
    std::vector<int> labels{label(rng), label(rng), label(rng), label(rng)};
    return Setup{{randn({4, 5}, rng)}, [labels](const std::vector<T>& in) {
                   return cross_entropy(in[0], std::span<const int>(labels));
                 }};
  });
  b.emplace_back("vanilla_attention", [](std::mt19937_64& rng) {
    Weigher w(rng());
    return Setup{{randn({5, 3}, rng), randn({3, 4}, rng), randn({3, 4}, rng), randn({3, 4}, rng)},
                 [w](const std::vector<T>& in) { return w(vanilla_attention(in[0], in[1], in[2], in[3])); }};
  });

  // Partition attention kernels: B = 2, n = 7, C = 4 over 2 heads, K = 3.
  b.emplace_back("intra_partition_attention", [](std::mt19937_64& rng) {
    Weigher w(rng());
    const auto parts = random_partitions(4, 7, 3, rng);
    return Setup{{uniform({2, 7, 4}, rng, 0.1, 1.0), randn({2, 7, 4}, rng)},
                 [w, parts](const std::vector<T>& in) {
                   return w(intra_partition_attention(in[0], in[1], std::span<const Partition>(parts), 2));
                 }};
  });
  b.emplace_back("partition_mean", [](std::mt19937_64& rng) {
    Weigher w(rng());
    const auto parts = random_partitions(4, 7, 3, rng);
    return Setup{{randn({2, 7, 4}, rng)}, [w, parts](const std::vector<T>& in) {
                   return w(partition_mean(in[0], std::span<const Partition>(parts), 2));
                 }};
  });
  b.emplace_back("importance_softmax", [](std::mt19937_64& rng) {
    Weigher w(rng());
    const auto parts = random_partitions(4, 7, 3, rng);
    return Setup{{randn({2, 3, 2}, rng)}, [w, parts](const std::vector<T>& in) {
                   return w(importance_softmax(in[0], std::span<const Partition>(parts), 2));
                 }};
  });
  binary("scale_by_head", {2, 3, 4}, {2, 3, 2}, [](const T& a, const T& c) { return scale_by_head(a, c); });
  b.emplace_back("scatter_to_tokens", [](std::mt19937_64& rng) {
    Weigher w(rng());
    const auto parts = random_partitions(4, 7, 3, rng);
    return Setup{{randn({2, 3, 4}, rng)}, [w, parts](const std::vector<T>& in) {
                   return w(scatter_to_tokens(in[0], std::span<const Partition>(parts), 2));
                 }};
  });
  b.emplace_back("inter_partition_attention", [](std::mt19937_64& rng) {
    Weigher w(rng());
    Initializer init(rng());
    auto params = std::make_shared<MhpaParams<double>>(MhpaParams<double>::init(init, 8, 2, 1, 2));
    const Partition p = random_partition(9, 4, rng);
    return Setup{{randn({9, 8}, rng), params->importance_hidden.weight, params->importance_out.weight},
                 [w, params, p](const std::vector<T>& in) { return w(inter_partition_attention(in[0], p, *params)); }};
  });
  b.emplace_back("global_local_aggregate", [](std::mt19937_64& rng) {
    Weigher w(rng());
    Initializer init(rng());
    auto params = std::make_shared<MhpaParams<double>>(MhpaParams<double>::init(init, 4, 2, 1, 2));
    const Partition p = random_partition(6, 4, rng);
    return Setup{{randn({6, 4}, rng), randn({4, 4}, rng), params->aggregation.weight},
                 [w, params, p](const std::vector<T>& in) {
                   return w(global_local_aggregate(in[0], in[1], p, *params));
                 }};
  });
  binary("channel_to_spatial", {1, 8, 2, 2}, {1, 2, 4, 4},
         [](const T& a, const T& c) { return channel_to_spatial(a, 2, c); });
  b.emplace_back("mhpa_forward", [](std::mt19937_64& rng) {
    Weigher w(rng());
    Initializer init(rng());
    auto params = std::make_shared<MhpaParams<double>>(MhpaParams<double>::init(init, 4, 2, 2, 2));
    const FrozenPartitions frozen;
    return Setup{{randn({2, 4, 4, 4}, rng), params->token_projection.weight, params->downsample.weight,
                  params->upsample.weight, params->importance_hidden.weight},
                 [w, params, frozen](const std::vector<T>& in) {
                   return w(mhpa_forward(in[0], *params, MhpaOptions{}, frozen.context(false)));
                 }};
  });
  b.emplace_back("mbconv_forward", [](std::mt19937_64& rng) {
    Weigher w(rng());
    Initializer init(rng());
    auto params = std::make_shared<MBConv<double>>(MBConv<double>::init(init, 4, 2));
    return Setup{{randn({2, 4, 4, 4}, rng), params->expand.weight, params->depthwise.weight, params->project.weight},
                 [w, params](const std::vector<T>& in) { return w(mbconv_forward(in[0], *params, true)); }};
  });
  for (BlockMode mode : {BlockMode::parallel, BlockMode::series, BlockMode::intra_only, BlockMode::inter_only}) {
    b.emplace_back("dual_block_" + to_string(mode), [mode](std::mt19937_64& rng) {
      Weigher w(rng());
      Initializer init(rng());
      BlockSpec spec;
      spec.channels = 8;
      spec.heads = 2;
      spec.rate = 2;
      spec.hash_bits = 2;
      spec.ffn_ratio = 2;
      spec.mbconv_ratio = 2;
      spec.mode = mode;
      auto block = std::make_shared<DualBlock<double>>(DualBlock<double>::init(init, spec));
      randomize_zero_weights<double>([&](const StateVisitor<double>& f) { block->visit("block", f); }, rng);
      std::vector<T> inputs{randn({2, 8, 4, 4}, rng), block->fuse.weight, block->ffn_in.weight};
      if (block->has_attention) inputs.push_back(block->mhpa.token_projection.weight);
      if (block->has_conv) inputs.push_back(block->conv.expand.weight);
      const FrozenPartitions frozen;
      return Setup{inputs, [w, block, frozen](const std::vector<T>& in) {
                     return w(dual_block_forward(in[0], *block, frozen.context(true)));
                   }};
    });
  }
  return b;
}

}  // namespace

std::vector<AuditCase> audit_operations(std::uint64_t seed, int points, double eps) {
  std::mt19937_64 rng(seed);
  std::vector<AuditCase> out;
  for (const auto& [name, build] : builders()) {
    AuditCase c;
    c.name = name;
    c.points = points;
    for (int p = 0; p < points; ++p) {
      Setup s = build(rng);
      GradCheckOptions o;
      o.seed = rng();
      o.eps = eps;
      const GradCheckResult r = grad_check<double>(s.f, s.inputs, o);
      if (p == 0 || r.max_relative_error > c.worst.max_relative_error) c.worst = r;
    }
    out.push_back(std::move(c));
  }
  return out;
}

GradCheckResult audit_model(const ModelConfig& config, std::uint64_t seed, const ModelAuditOptions& options) {
  Model<double> model = build_model<double>(config, seed);
  std::mt19937_64 rng(seed);
  randomize_zero_weights<double>([&](const StateVisitor<double>& f) { model.visit(f); }, rng);
  std::vector<T> inputs = model.parameters();
  inputs.push_back(randn({options.batch, config.in_channels, options.resolution, options.resolution}, rng));
  std::vector<int> labels;
  for (Index i = 0; i < options.batch; ++i) labels.push_back(static_cast<int>(i % config.num_classes));
  const FrozenPartitions frozen;
  const bool training = options.training;
  const ScalarFunction<double> f = [&](const std::vector<T>& in) {
    return cross_entropy(forward(model, in.back(), frozen.context(training)), std::span<const int>(labels));
  };
  GradCheckOptions o;
  o.eps = options.eps;
  o.seed = seed;
  o.max_elements_per_input = options.max_elements_per_input;
  return grad_check<double>(f, inputs, o);
}

}  // namespace dualformer
