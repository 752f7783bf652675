#pragma once

#include "dualformer/layers.hpp"
#include "dualformer/partition.hpp"

#include <random>
#include <span>
#include <string>
#include <vector>

namespace dualformer {

/// Channels split evenly across heads; head h owns channels [h*head_dim, (h+1)*head_dim).
struct HeadLayout {
  int num_heads = 1;
  Index head_dim = 0;

  Index channels() const { return num_heads * head_dim; }
  /// Throws ShapeError unless `channels` is divisible by `heads`.
  static HeadLayout split(Index channels, int heads);
};

/// Width of the hidden layer of the per-partition importance predictor.
Index importance_hidden_width(Index head_dim);

template <typename S>
struct MhpaParams {
  Index rate = 1;                 // spatial downsample factor k
  HeadLayout layout;
  Conv2d<S> downsample;           // depthwise k x k, stride k
  Linear<S> token_projection;     // C -> C, produces x~
  Linear<S> importance_hidden;    // head_dim -> head_dim/4, shared by heads
  Linear<S> importance_out;       // head_dim/4 -> 1
  Linear<S> aggregation;          // 2C -> C
  Conv2d<S> upsample;             // 1x1, C -> C*k*k
  std::vector<NormVectors<S>> norms;  // one per head, frozen

  static MhpaParams init(Initializer& init, Index channels, int heads, Index rate, int hash_bits);

  Index channels() const { return layout.channels(); }
  int hash_bits() const { return norms.front().bits(); }
  int num_clusters() const { return 1 << hash_bits(); }
  void visit(const std::string& prefix, const StateVisitor<S>& f);
};

enum class MhpaPath { both, intra_only, inter_only };

struct MhpaOptions {
  MhpaPath path = MhpaPath::both;
  /// All heads use one partition hashed from the full channel vector.
  bool share_partitions = false;
  /// Draw fresh norm vectors on every forward (needs ForwardContext::rng).
  bool resample_norms = false;
  double eps = 1e-6;
};

/// Partitions produced by one MHPA call; `parts` is indexed b * heads + h.
struct PartitionRecord {
  std::string tag;
  Index height = 0;  // token grid
  Index width = 0;
  int heads = 0;
  std::vector<Partition> parts;
};

/// Records the partitions of a forward pass, or replays them in order so a
/// later pass reuses the same discrete assignments (finite-difference checks
/// hold partitions fixed this way).
class PartitionTape {
 public:
  enum class Mode { record, replay };

  explicit PartitionTape(Mode mode = Mode::record) : mode_(mode) {}

  Mode mode() const { return mode_; }
  void set_mode(Mode mode) {
    mode_ = mode;
    cursor_ = 0;
  }
  const std::vector<PartitionRecord>& records() const { return records_; }

  void record(PartitionRecord r) { records_.push_back(std::move(r)); }
  /// Next recorded entry; throws ContractError when exhausted or mismatched.
  const PartitionRecord& next(Index height, Index width, int heads, Index batch);

 private:
  Mode mode_;
  std::vector<PartitionRecord> records_;
  std::size_t cursor_ = 0;
};

struct ForwardContext {
  bool training = false;
  PartitionTape* tape = nullptr;
  std::mt19937_64* rng = nullptr;
};

// Batched multi-head kernels. Token tensors are [B, n, C]; `parts` holds one
// partition per (batch, head), index b * heads + h, all with the same K.

/// Per channel and cluster: w_i = x_i / (sum_{I_k} x + eps), out_i = w_i x~_i / (sum_{I_k} w + eps).
template <typename S>
Tensor<S> intra_partition_attention(const Tensor<S>& x, const Tensor<S>& x_tilde,
                                    std::span<const Partition> parts, int heads, double eps = 1e-6);
/// Per-cluster means [B, K, C]; empty clusters give zero vectors.
template <typename S>
Tensor<S> partition_mean(const Tensor<S>& x, std::span<const Partition> parts, int heads);
/// Raw importance scores [B, K, heads] from descriptors [B, K, C].
template <typename S>
Tensor<S> importance_scores(const Tensor<S>& descriptors, const MhpaParams<S>& params);
/// Softmax over the non-empty clusters of each (batch, head); empty clusters get 0.
template <typename S>
Tensor<S> importance_softmax(const Tensor<S>& scores, std::span<const Partition> parts, int heads);
/// out[b,k,c] = x[b,k,c] * coef[b,k,head(c)]
template <typename S>
Tensor<S> scale_by_head(const Tensor<S>& x, const Tensor<S>& coef);
/// Token i of head h receives row assignment[i] of its cluster features: [B,K,C] -> [B,n,C].
template <typename S>
Tensor<S> scatter_to_tokens(const Tensor<S>& cluster_features, std::span<const Partition> parts,
                            int heads);

// Single-partition forms on [n, C] tokens; the partition applies to every head.

template <typename S>
Tensor<S> intra_partition_attention(const Tensor<S>& x, const Tensor<S>& x_tilde, const Partition& p,
                                    double eps = 1e-6);
/// Cluster descriptors scaled by their normalized importance: [K, C].
template <typename S>
Tensor<S> inter_partition_attention(const Tensor<S>& x_tilde, const Partition& p,
                                    const MhpaParams<S>& params);
/// Normalized importance coefficients [K, heads] for a single partition.
template <typename S>
Tensor<S> importance_coefficients(const Tensor<S>& x_tilde, const Partition& p,
                                  const MhpaParams<S>& params);
/// aggregation([intra || scatter(inter)]): [n, C].
template <typename S>
Tensor<S> global_local_aggregate(const Tensor<S>& intra, const Tensor<S>& inter, const Partition& p,
                                 const MhpaParams<S>& params);
/// depth_to_space by k, plus `skip` when defined.
template <typename S>
Tensor<S> channel_to_spatial(const Tensor<S>& x, Index k, const Tensor<S>& skip);

/// Partitions of [B, n, C] tokens under the given options, one per (batch, head).
template <typename S>
std::vector<Partition> partition_tokens(const Tensor<S>& tokens, const MhpaParams<S>& params,
                                        const MhpaOptions& options, const ForwardContext& ctx);

/// MHPA residual branch without the skip: [B,C,H,W] -> [B,C,H,W].
template <typename S>
Tensor<S> mhpa_delta(const Tensor<S>& x, const MhpaParams<S>& params, const MhpaOptions& options,
                     const ForwardContext& ctx, const std::string& tag = {});

/// Full MHPA with the skip connection to `x`.
template <typename S>
Tensor<S> mhpa_forward(const Tensor<S>& x, const MhpaParams<S>& params, const MhpaOptions& options,
                       const ForwardContext& ctx, const std::string& tag = {});

}  // namespace dualformer
