#include "dualformer/mhpa.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dualformer {

namespace {

template <typename S>
using Node = detail::Node<S>;

template <typename S>
using ConstMatMap = Eigen::Map<const RowMatrix<S>>;

// Validates the per-(batch, head) partitions against a token count; returns K.
int check_parts(std::span<const Partition> parts, Index batch, int heads, Index tokens, const char* op) {
  if (static_cast<Index>(parts.size()) != batch * heads)
    throw ShapeError(std::string(op) + ": expected " + std::to_string(batch * heads) +
                     " partitions (batch x heads), got " + std::to_string(parts.size()));
  const int K = parts.front().num_clusters;
  for (const Partition& p : parts) {
    if (p.size() != tokens)
      throw ShapeError(std::string(op) + ": partition covers " + std::to_string(p.size()) +
                       " tokens but input has " + std::to_string(tokens));
    if (p.num_clusters != K) throw ShapeError(std::string(op) + ": partitions disagree on K");
  }
  return K;
}

template <typename S>
void require_rank3(const Tensor<S>& t, const char* op) {
  if (t.rank() != 3) throw ShapeError(std::string(op) + ": expected [B, n, C], got " + to_string(t.shape()));
}

std::vector<Partition> replicate(const Partition& p, int heads) {
  return std::vector<Partition>(static_cast<std::size_t>(heads), p);
}

}  // namespace

HeadLayout HeadLayout::split(Index channels, int heads) {
  if (heads < 1 || channels % heads != 0)
    throw ShapeError(std::to_string(channels) + " channels cannot be split across " +
                     std::to_string(heads) + " heads");
  return {heads, channels / heads};
}

Index importance_hidden_width(Index head_dim) { return std::max<Index>(1, head_dim / 4); }

template <typename S>
MhpaParams<S> MhpaParams<S>::init(Initializer& init, Index channels, int heads, Index rate,
                                  int hash_bits) {
  if (rate < 1) throw ContractError("MHPA downsample rate must be >= 1");
  MhpaParams p;
  p.rate = rate;
  p.layout = HeadLayout::split(channels, heads);
  const Index d = p.layout.head_dim;
  const Index r = importance_hidden_width(d);
  p.downsample = Conv2d<S>::init(init, channels, channels, rate, {rate, 0, channels}, true);
  p.token_projection = Linear<S>::init(init, channels, channels);
  p.importance_hidden = Linear<S>::init(init, d, r);
  p.importance_out = Linear<S>::init(init, r, 1);
  p.aggregation = Linear<S>::init(init, 2 * channels, channels);
  p.upsample = Conv2d<S>::init(init, channels, channels * rate * rate, 1, {}, true);
  for (int h = 0; h < heads; ++h) p.norms.push_back(NormVectors<S>::gaussian(hash_bits, d, init.rng()));
  return p;
}

template <typename S>
void MhpaParams<S>::visit(const std::string& prefix, const StateVisitor<S>& f) {
  downsample.visit(prefix + ".downsample", f);
  token_projection.visit(prefix + ".token_projection", f);
  importance_hidden.visit(prefix + ".importance_hidden", f);
  importance_out.visit(prefix + ".importance_out", f);
  aggregation.visit(prefix + ".aggregation", f);
  upsample.visit(prefix + ".upsample", f);
  for (std::size_t h = 0; h < norms.size(); ++h)
    f(prefix + ".norms." + std::to_string(h), norms[h].beta, false);
}

const PartitionRecord& PartitionTape::next(Index height, Index width, int heads, Index batch) {
  if (cursor_ >= records_.size())
    throw ContractError("partition tape exhausted after " + std::to_string(records_.size()) + " records");
  const PartitionRecord& r = records_[cursor_++];
  if (r.height != height || r.width != width || r.heads != heads ||
      static_cast<Index>(r.parts.size()) != batch * heads)
    throw ContractError("partition tape record '" + r.tag + "' does not match the replayed layer");
  return r;
}

// ---------------------------------------------------------------- batched kernels

template <typename S>
Tensor<S> intra_partition_attention(const Tensor<S>& x, const Tensor<S>& x_tilde,
                                    std::span<const Partition> parts, int heads, double eps) {
  require_rank3(x, "intra_partition_attention");
  if (x.shape() != x_tilde.shape())
    throw ShapeError("intra_partition_attention: x " + to_string(x.shape()) + " and x~ " +
                     to_string(x_tilde.shape()) + " differ");
  const Index B = x.dim(0), n = x.dim(1), C = x.dim(2);
  const Index d = HeadLayout::split(C, heads).head_dim;
  const int K = check_parts(parts, B, heads, n, "intra_partition_attention");

  // Per-cluster channel sums of x and of w for one (batch, head).
  const auto cluster_sums = [=](const Vector<S>& xv, Index b, int h, const Partition& p,
                                std::vector<double>& sx, std::vector<double>& sw) {
    sx.assign(static_cast<std::size_t>(K * d), 0.0);
    sw.assign(static_cast<std::size_t>(K * d), 0.0);
    for (Index i = 0; i < n; ++i) {
      const S* row = xv.data() + (b * n + i) * C + h * d;
      double* s = sx.data() + p.assignment[i] * d;
      for (Index j = 0; j < d; ++j) s[j] += row[j];
    }
    for (Index i = 0; i < n; ++i) {
      const S* row = xv.data() + (b * n + i) * C + h * d;
      const Index base = p.assignment[i] * d;
      for (Index j = 0; j < d; ++j) sw[base + j] += row[j] / (sx[base + j] + eps);
    }
  };

  Vector<S> out(x.numel());
  std::vector<double> sx, sw;
  for (Index b = 0; b < B; ++b)
    for (int h = 0; h < heads; ++h) {
      const Partition& p = parts[b * heads + h];
      cluster_sums(x.data(), b, h, p, sx, sw);
      for (Index i = 0; i < n; ++i) {
        const Index off = (b * n + i) * C + h * d;
        const Index base = p.assignment[i] * d;
        for (Index j = 0; j < d; ++j) {
          const double w = x[off + j] / (sx[base + j] + eps);
          out[off + j] = static_cast<S>(w * x_tilde[off + j] / (sw[base + j] + eps));
        }
      }
    }
  mac_counter() += static_cast<std::uint64_t>(2 * B * n * C);

  std::vector<Partition> saved(parts.begin(), parts.end());
  return detail::make_result<S>(
      x.shape(), std::move(out), "intra_partition_attention", {x, x_tilde},
      [=, saved = std::move(saved)](Node<S>& self) {
        const Vector<S>& xv = self.inputs[0]->value;
        const Vector<S>& tv = self.inputs[1]->value;
        const Vector<S>& g = self.grad;
        Vector<S> gx = Vector<S>::Zero(xv.size());
        Vector<S> gt = Vector<S>::Zero(xv.size());
        std::vector<double> sx, sw, go(static_cast<std::size_t>(K * d)), gwsum(static_cast<std::size_t>(K * d));
        std::vector<double> gw(static_cast<std::size_t>(n * d));
        for (Index b = 0; b < B; ++b)
          for (int h = 0; h < heads; ++h) {
            const Partition& p = saved[b * heads + h];
            cluster_sums(xv, b, h, p, sx, sw);
            std::fill(go.begin(), go.end(), 0.0);
            std::fill(gwsum.begin(), gwsum.end(), 0.0);
            // sum over the cluster of g_l * out_l
            for (Index i = 0; i < n; ++i) {
              const Index off = (b * n + i) * C + h * d;
              const Index base = p.assignment[i] * d;
              for (Index j = 0; j < d; ++j) {
                const double w = xv[off + j] / (sx[base + j] + eps);
                go[base + j] += g[off + j] * w * tv[off + j] / (sw[base + j] + eps);
              }
            }
            for (Index i = 0; i < n; ++i) {
              const Index off = (b * n + i) * C + h * d;
              const Index base = p.assignment[i] * d;
              for (Index j = 0; j < d; ++j) {
                const double denom = sw[base + j] + eps;
                const double w = xv[off + j] / (sx[base + j] + eps);
                gt[off + j] = static_cast<S>(g[off + j] * w / denom);
                const double gwi = (g[off + j] * tv[off + j] - go[base + j]) / denom;
                gw[i * d + j] = gwi;
                gwsum[base + j] += gwi * w;
              }
            }
            for (Index i = 0; i < n; ++i) {
              const Index off = (b * n + i) * C + h * d;
              const Index base = p.assignment[i] * d;
              for (Index j = 0; j < d; ++j)
                gx[off + j] = static_cast<S>((gw[i * d + j] - gwsum[base + j]) / (sx[base + j] + eps));
            }
          }
        self.inputs[0]->accumulate(gx);
        self.inputs[1]->accumulate(gt);
      });
}

template <typename S>
Tensor<S> partition_mean(const Tensor<S>& x, std::span<const Partition> parts, int heads) {
  require_rank3(x, "partition_mean");
  const Index B = x.dim(0), n = x.dim(1), C = x.dim(2);
  const Index d = HeadLayout::split(C, heads).head_dim;
  const int K = check_parts(parts, B, heads, n, "partition_mean");
  Vector<S> out = Vector<S>::Zero(B * K * C);
  for (Index b = 0; b < B; ++b)
    for (int h = 0; h < heads; ++h) {
      const Partition& p = parts[b * heads + h];
      for (Index i = 0; i < n; ++i) {
        const int k = p.assignment[i];
        const S inv = S(1) / static_cast<S>(p.counts[k]);
        const S* src = x.data().data() + (b * n + i) * C + h * d;
        S* dst = out.data() + (b * K + k) * C + h * d;
        for (Index j = 0; j < d; ++j) dst[j] += src[j] * inv;
      }
    }
  mac_counter() += static_cast<std::uint64_t>(B * n * C);
  std::vector<Partition> saved(parts.begin(), parts.end());
  return detail::make_result<S>(
      {B, K, C}, std::move(out), "partition_mean", {x},
      [=, saved = std::move(saved)](Node<S>& self) {
        Vector<S>& gx = self.inputs[0]->grad_buffer();
        for (Index b = 0; b < B; ++b)
          for (int h = 0; h < heads; ++h) {
            const Partition& p = saved[b * heads + h];
            for (Index i = 0; i < n; ++i) {
              const int k = p.assignment[i];
              const S inv = S(1) / static_cast<S>(p.counts[k]);
              const S* src = self.grad.data() + (b * K + k) * C + h * d;
              S* dst = gx.data() + (b * n + i) * C + h * d;
              for (Index j = 0; j < d; ++j) dst[j] += src[j] * inv;
            }
          }
      });
}

template <typename S>
Tensor<S> importance_scores(const Tensor<S>& descriptors, const MhpaParams<S>& params) {
  require_rank3(descriptors, "importance_scores");
  const Index B = descriptors.dim(0), K = descriptors.dim(1);
  const int H = params.layout.num_heads;
  if (descriptors.dim(2) != params.channels())
    throw ShapeError("importance_scores: descriptors " + to_string(descriptors.shape()) +
                     " do not match " + std::to_string(params.channels()) + " channels");
  const Tensor<S> flat = reshape(descriptors, {B * K * H, params.layout.head_dim});
  const Tensor<S> hidden = gelu(params.importance_hidden(flat));
  return reshape(params.importance_out(hidden), {B, K, static_cast<Index>(H)});
}

template <typename S>
Tensor<S> importance_softmax(const Tensor<S>& scores, std::span<const Partition> parts, int heads) {
  require_rank3(scores, "importance_softmax");
  const Index B = scores.dim(0), K = scores.dim(1);
  if (scores.dim(2) != heads) throw ShapeError("importance_softmax: scores " + to_string(scores.shape()) +
                                               " do not have " + std::to_string(heads) + " heads");
  if (static_cast<Index>(parts.size()) != B * heads || parts.front().num_clusters != K)
    throw ShapeError("importance_softmax: partitions do not match scores " + to_string(scores.shape()));
  const auto at = [=](Index b, Index k, int h) { return (b * K + k) * heads + h; };
  Vector<S> out = Vector<S>::Zero(scores.numel());
  for (Index b = 0; b < B; ++b)
    for (int h = 0; h < heads; ++h) {
      const Partition& p = parts[b * heads + h];
      S top = -std::numeric_limits<S>::infinity();
      for (Index k = 0; k < K; ++k)
        if (p.counts[k] > 0) top = std::max(top, scores[at(b, k, h)]);
      S total = 0;
      for (Index k = 0; k < K; ++k)
        if (p.counts[k] > 0) total += out[at(b, k, h)] = std::exp(scores[at(b, k, h)] - top);
      for (Index k = 0; k < K; ++k) out[at(b, k, h)] /= total;
    }
  std::vector<Partition> saved(parts.begin(), parts.end());
  return detail::make_result<S>(
      scores.shape(), out, "importance_softmax", {scores},
      [=, saved = std::move(saved)](Node<S>& self) {
        Vector<S> g = Vector<S>::Zero(out.size());
        for (Index b = 0; b < B; ++b)
          for (int h = 0; h < heads; ++h) {
            S dot = 0;
            for (Index k = 0; k < K; ++k) dot += out[at(b, k, h)] * self.grad[at(b, k, h)];
            for (Index k = 0; k < K; ++k)
              g[at(b, k, h)] = out[at(b, k, h)] * (self.grad[at(b, k, h)] - dot);
          }
        self.inputs[0]->accumulate(g);
      });
}

template <typename S>
Tensor<S> scale_by_head(const Tensor<S>& x, const Tensor<S>& coef) {
  require_rank3(x, "scale_by_head");
  require_rank3(coef, "scale_by_head");
  const Index B = x.dim(0), K = x.dim(1), C = x.dim(2), H = coef.dim(2);
  if (coef.dim(0) != B || coef.dim(1) != K || C % H != 0)
    throw ShapeError("scale_by_head: features " + to_string(x.shape()) + " and coefficients " +
                     to_string(coef.shape()) + " disagree");
  const Index d = C / H;
  Vector<S> out(x.numel());
  for (Index r = 0; r < B * K; ++r)
    for (Index h = 0; h < H; ++h)
      out.segment(r * C + h * d, d) = x.data().segment(r * C + h * d, d) * coef[r * H + h];
  mac_counter() += static_cast<std::uint64_t>(B * K * C);
  return detail::make_result<S>(
      x.shape(), std::move(out), "scale_by_head", {x, coef}, [=](Node<S>& self) {
        auto& xn = *self.inputs[0];
        auto& cn = *self.inputs[1];
        if (xn.requires_grad) {
          Vector<S>& gx = xn.grad_buffer();
          for (Index r = 0; r < B * K; ++r)
            for (Index h = 0; h < H; ++h)
              gx.segment(r * C + h * d, d) += self.grad.segment(r * C + h * d, d) * cn.value[r * H + h];
        }
        if (cn.requires_grad) {
          Vector<S>& gc = cn.grad_buffer();
          for (Index r = 0; r < B * K; ++r)
            for (Index h = 0; h < H; ++h)
              gc[r * H + h] += self.grad.segment(r * C + h * d, d).dot(xn.value.segment(r * C + h * d, d));
        }
      });
}

template <typename S>
Tensor<S> scatter_to_tokens(const Tensor<S>& cluster_features, std::span<const Partition> parts,
                            int heads) {
  require_rank3(cluster_features, "scatter_to_tokens");
  const Index B = cluster_features.dim(0), K = cluster_features.dim(1), C = cluster_features.dim(2);
  const Index d = HeadLayout::split(C, heads).head_dim;
  if (parts.empty()) throw ShapeError("scatter_to_tokens: no partitions");
  const Index n = parts.front().size();
  if (check_parts(parts, B, heads, n, "scatter_to_tokens") != K)
    throw ShapeError("scatter_to_tokens: features have " + std::to_string(K) +
                     " clusters but partitions have " + std::to_string(parts.front().num_clusters));
  Vector<S> out(B * n * C);
  for (Index b = 0; b < B; ++b)
    for (int h = 0; h < heads; ++h) {
      const Partition& p = parts[b * heads + h];
      for (Index i = 0; i < n; ++i) {
        const int k = p.assignment[i];
        if (k < 0 || k >= K) throw InvariantViolation("scatter_to_tokens: cluster index out of range");
        out.segment((b * n + i) * C + h * d, d) = cluster_features.data().segment((b * K + k) * C + h * d, d);
      }
    }
  std::vector<Partition> saved(parts.begin(), parts.end());
  return detail::make_result<S>(
      {B, n, C}, std::move(out), "scatter_to_tokens", {cluster_features},
      [=, saved = std::move(saved)](Node<S>& self) {
        Vector<S>& g = self.inputs[0]->grad_buffer();
        for (Index b = 0; b < B; ++b)
          for (int h = 0; h < heads; ++h) {
            const Partition& p = saved[b * heads + h];
            for (Index i = 0; i < n; ++i)
              g.segment((b * K + p.assignment[i]) * C + h * d, d) +=
                  self.grad.segment((b * n + i) * C + h * d, d);
          }
      });
}

// ---------------------------------------------------------------- single-partition forms

template <typename S>
Tensor<S> intra_partition_attention(const Tensor<S>& x, const Tensor<S>& x_tilde, const Partition& p,
                                    double eps) {
  if (x.rank() != 2) throw ShapeError("intra_partition_attention: expected [n, d], got " + to_string(x.shape()));
  if (p.size() != x.dim(0))
    throw ShapeError("intra_partition_attention: partition covers " + std::to_string(p.size()) +
                     " tokens but x has " + std::to_string(x.dim(0)));
  const Shape batched{1, x.dim(0), x.dim(1)};
  const Tensor<S> out = intra_partition_attention(reshape(x, batched), reshape(x_tilde, batched),
                                                  std::span<const Partition>(&p, 1), 1, eps);
  return reshape(out, x.shape());
}

template <typename S>
Tensor<S> importance_coefficients(const Tensor<S>& x_tilde, const Partition& p,
                                  const MhpaParams<S>& params) {
  if (x_tilde.rank() != 2) throw ShapeError("importance_coefficients: expected [n, C], got " + to_string(x_tilde.shape()));
  const int H = params.layout.num_heads;
  const auto parts = replicate(p, H);
  const Tensor<S> means = partition_mean(reshape(x_tilde, {1, x_tilde.dim(0), x_tilde.dim(1)}), parts, H);
  const Tensor<S> coef = importance_softmax(importance_scores(means, params), parts, H);
  return reshape(coef, {static_cast<Index>(p.num_clusters), static_cast<Index>(H)});
}

template <typename S>
Tensor<S> inter_partition_attention(const Tensor<S>& x_tilde, const Partition& p,
                                    const MhpaParams<S>& params) {
  if (x_tilde.rank() != 2) throw ShapeError("inter_partition_attention: expected [n, C], got " + to_string(x_tilde.shape()));
  const int H = params.layout.num_heads;
  const auto parts = replicate(p, H);
  const Tensor<S> means = partition_mean(reshape(x_tilde, {1, x_tilde.dim(0), x_tilde.dim(1)}), parts, H);
  const Tensor<S> coef = importance_softmax(importance_scores(means, params), parts, H);
  return reshape(scale_by_head(means, coef), {static_cast<Index>(p.num_clusters), x_tilde.dim(1)});
}

template <typename S>
Tensor<S> global_local_aggregate(const Tensor<S>& intra, const Tensor<S>& inter, const Partition& p,
                                 const MhpaParams<S>& params) {
  if (intra.rank() != 2 || inter.rank() != 2 || intra.dim(1) != inter.dim(1))
    throw ShapeError("global_local_aggregate: intra " + to_string(intra.shape()) + " and inter " +
                     to_string(inter.shape()) + " disagree");
  const int H = params.layout.num_heads;
  const auto parts = replicate(p, H);
  const Tensor<S> scattered = scatter_to_tokens(reshape(inter, {1, inter.dim(0), inter.dim(1)}), parts, H);
  return params.aggregation(concat<S>({intra, reshape(scattered, intra.shape())}, 1));
}

template <typename S>
Tensor<S> channel_to_spatial(const Tensor<S>& x, Index k, const Tensor<S>& skip) {
  Tensor<S> out = depth_to_space(x, k);
  if (!skip.defined()) return out;
  if (skip.shape() != out.shape())
    throw ShapeError("channel_to_spatial: skip " + to_string(skip.shape()) + " does not match " +
                     to_string(out.shape()));
  return add(out, skip);
}

// ---------------------------------------------------------------- full MHPA

template <typename S>
std::vector<Partition> partition_tokens(const Tensor<S>& tokens, const MhpaParams<S>& params,
                                        const MhpaOptions& options, const ForwardContext& ctx) {
  require_rank3(tokens, "partition_tokens");
  const Index B = tokens.dim(0), n = tokens.dim(1), C = tokens.dim(2);
  const int H = params.layout.num_heads;
  const Index d = params.layout.head_dim;
  if (C != params.channels())
    throw ShapeError("partition_tokens: tokens " + to_string(tokens.shape()) + " do not match " +
                     std::to_string(params.channels()) + " channels");

  std::vector<NormVectors<S>> fresh;
  const std::vector<NormVectors<S>>* norms = &params.norms;
  if (options.resample_norms) {
    if (!ctx.rng) throw ContractError("resampling norm vectors needs a random generator in the context");
    for (int h = 0; h < H; ++h) fresh.push_back(NormVectors<S>::gaussian(params.hash_bits(), d, *ctx.rng));
    norms = &fresh;
  }
  const int bits = params.hash_bits();
  const ConstMatMap<S> all(tokens.data().data(), B * n, C);

  std::vector<Partition> parts;
  parts.reserve(static_cast<std::size_t>(B * H));
  if (options.share_partitions) {
    // Row i of the full-width normal concatenates row i of every head's normals.
    RowMatrix<S> beta(bits, C);
    for (int h = 0; h < H; ++h)
      beta.block(0, h * d, bits, d) = (*norms)[h].beta.matrix();
    const NormVectors<S> full{Tensor<S>::from_vector({bits, C}, Eigen::Map<const Vector<S>>(beta.data(), beta.size()))};
    for (Index b = 0; b < B; ++b) {
      const Partition p = lsh_assign<S>(TokenBlock<S>(all.block(b * n, 0, n, C)), full);
      for (int h = 0; h < H; ++h) parts.push_back(p);
    }
  } else {
    for (Index b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h)
        parts.push_back(lsh_assign<S>(TokenBlock<S>(all.block(b * n, h * d, n, d)), (*norms)[h]));
  }
  mac_counter() += static_cast<std::uint64_t>(B * n * C * bits);
  return parts;
}

template <typename S>
Tensor<S> mhpa_delta(const Tensor<S>& x, const MhpaParams<S>& params, const MhpaOptions& options,
                     const ForwardContext& ctx, const std::string& tag) {
  if (x.rank() != 4 || x.dim(1) != params.channels())
    throw ShapeError("mhpa: input " + to_string(x.shape()) + " does not have " +
                     std::to_string(params.channels()) + " channels");
  const Index k = params.rate;
  if (x.dim(2) % k != 0 || x.dim(3) % k != 0)
    throw ShapeError("mhpa: spatial size of " + to_string(x.shape()) + " not divisible by rate " +
                     std::to_string(k));
  const Index B = x.dim(0), h = x.dim(2) / k, w = x.dim(3) / k, C = params.channels();
  const int H = params.layout.num_heads;

  const Tensor<S> tokens = nchw_to_tokens(params.downsample(x));
  std::vector<Partition> parts;
  if (ctx.tape && ctx.tape->mode() == PartitionTape::Mode::replay) {
    parts = ctx.tape->next(h, w, H, B).parts;
  } else {
    parts = partition_tokens(tokens, params, options, ctx);
    if (ctx.tape) ctx.tape->record({tag, h, w, H, parts});
  }

  const Tensor<S> x_tilde = params.token_projection(tokens);
  const Shape token_shape{B, h * w, C};
  const Tensor<S> intra = options.path == MhpaPath::inter_only
                              ? Tensor<S>::zeros(token_shape)
                              : intra_partition_attention(sigmoid(tokens), x_tilde, parts, H, options.eps);
  Tensor<S> scattered;
  if (options.path == MhpaPath::intra_only) {
    scattered = Tensor<S>::zeros(token_shape);
  } else {
    const Tensor<S> means = partition_mean(x_tilde, parts, H);
    const Tensor<S> coef = importance_softmax(importance_scores(means, params), parts, H);
    scattered = scatter_to_tokens(scale_by_head(means, coef), parts, H);
  }
  const Tensor<S> fused = params.aggregation(concat<S>({intra, scattered}, 2));
  return depth_to_space(params.upsample(tokens_to_nchw(fused, h, w)), k);
}

template <typename S>
Tensor<S> mhpa_forward(const Tensor<S>& x, const MhpaParams<S>& params, const MhpaOptions& options,
                       const ForwardContext& ctx, const std::string& tag) {
  return add(mhpa_delta(x, params, options, ctx, tag), x);
}

#define DUALFORMER_INSTANTIATE_MHPA(S)                                                                  \
  template struct MhpaParams<S>;                                                                        \
  template Tensor<S> intra_partition_attention(const Tensor<S>&, const Tensor<S>&,                      \
                                               std::span<const Partition>, int, double);                \
  template Tensor<S> partition_mean(const Tensor<S>&, std::span<const Partition>, int);                 \
  template Tensor<S> importance_scores(const Tensor<S>&, const MhpaParams<S>&);                         \
  template Tensor<S> importance_softmax(const Tensor<S>&, std::span<const Partition>, int);             \
  template Tensor<S> scale_by_head(const Tensor<S>&, const Tensor<S>&);                                 \
  template Tensor<S> scatter_to_tokens(const Tensor<S>&, std::span<const Partition>, int);              \
  template Tensor<S> intra_partition_attention(const Tensor<S>&, const Tensor<S>&, const Partition&,    \
                                               double);                                                 \
  template Tensor<S> importance_coefficients(const Tensor<S>&, const Partition&, const MhpaParams<S>&); \
  template Tensor<S> inter_partition_attention(const Tensor<S>&, const Partition&,                      \
                                               const MhpaParams<S>&);                                   \
  template Tensor<S> global_local_aggregate(const Tensor<S>&, const Tensor<S>&, const Partition&,       \
                                            const MhpaParams<S>&);                                      \
  template Tensor<S> channel_to_spatial(const Tensor<S>&, Index, const Tensor<S>&);                     \
  template std::vector<Partition> partition_tokens(const Tensor<S>&, const MhpaParams<S>&,              \
                                                   const MhpaOptions&, const ForwardContext&);          \
  template Tensor<S> mhpa_delta(const Tensor<S>&, const MhpaParams<S>&, const MhpaOptions&,             \
                                const ForwardContext&, const std::string&);                             \
  template Tensor<S> mhpa_forward(const Tensor<S>&, const MhpaParams<S>&, const MhpaOptions&,           \
                                  const ForwardContext&, const std::string&);

DUALFORMER_INSTANTIATE_MHPA(float)
DUALFORMER_INSTANTIATE_MHPA(double)

}  // namespace dualformer
