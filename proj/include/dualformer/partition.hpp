#pragma once

#include "dualformer/tensor.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace dualformer {

/// Disjoint, exhaustive grouping of n tokens into K clusters.
struct Partition {
  std::vector<int> assignment;  // cluster of each token, in [0, K)
  std::vector<Index> counts;    // tokens per cluster; may contain zeros
  int num_clusters = 0;
  std::optional<Eigen::MatrixXd> centroids;  // K x d, K-Means only

  Index size() const { return static_cast<Index>(assignment.size()); }
  bool empty_cluster(int k) const { return counts[k] == 0; }

  /// Builds counts from an assignment; throws InvariantViolation if any
  /// index falls outside [0, K).
  static Partition from_assignment(std::vector<int> assignment, int num_clusters);
  /// Throws InvariantViolation when counts and assignment disagree.
  void validate() const;
};

/// Fixed hyperplane normals for sign hashing: one row per hash bit.
template <typename S>
struct NormVectors {
  Tensor<S> beta;  // [bits, d], never trained

  int bits() const { return static_cast<int>(beta.dim(0)); }
  Index dim() const { return beta.dim(1); }
  int num_clusters() const { return 1 << bits(); }

  static NormVectors gaussian(int bits, Index dim, std::mt19937_64& rng);
};

template <typename S>
using TokenBlock = Eigen::Ref<const RowMatrix<S>, 0, Eigen::OuterStride<>>;

/// Sign-of-projection hashing: bit i of a token's code is 1 iff beta_i . x >= 0;
/// the code (sum of 2^i over set bits) is the cluster index.
template <typename S>
Partition lsh_assign(const TokenBlock<S>& tokens, const NormVectors<S>& norms);
template <typename S>
Partition lsh_assign(const Tensor<S>& tokens, const NormVectors<S>& norms);

struct KMeansOptions {
  int max_iters = 10;
  std::uint64_t seed = 0;
  /// When set, receives the objective after every Lloyd iteration.
  std::vector<double>* objective_trace = nullptr;
};

/// Lloyd's algorithm from k-means++ seeding, squared Euclidean loss. Empty
/// clusters are reseeded at the point farthest from its centroid. Throws
/// ContractError if the objective ever increases.
template <typename S>
Partition kmeans_assign(const TokenBlock<S>& tokens, int num_clusters, const KMeansOptions& options);
template <typename S>
Partition kmeans_assign(const Tensor<S>& tokens, int num_clusters, int max_iters, std::uint64_t seed);

/// Sum over clusters of squared distances to the centroids implied by `p`
/// (cluster means).
double clustering_objective(const Eigen::MatrixXd& tokens, const Partition& p);

enum class PartitionMethod { lsh, kmeans };

std::string to_string(PartitionMethod method);

struct ThroughputStats {
  PartitionMethod method = PartitionMethod::lsh;
  Index tokens = 0;
  Index dim = 0;
  int clusters = 0;
  double median = 0.0;  // tokens per second
  double p10 = 0.0;
  double p90 = 0.0;
};

/// Wall-clock throughput of assignment only, on a seeded Gaussian token buffer
/// shared by both methods. K must be a power of two for LSH.
ThroughputStats partition_throughput(PartitionMethod method, Index tokens, Index dim, int clusters,
                                     int repeats, int kmeans_iters = 5, std::uint64_t seed = 0);

/// CSV header and row: method,n,d,K,median_tokens_per_sec,p10,p90
std::string throughput_csv_header();
std::string throughput_csv_row(const ThroughputStats& stats);

}  // namespace dualformer
