#include "dualformer/partition.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

namespace dualformer {

Partition Partition::from_assignment(std::vector<int> assignment, int num_clusters) {
  if (num_clusters <= 0) throw InvariantViolation("partition needs at least one cluster");
  Partition p;
  p.num_clusters = num_clusters;
  p.counts.assign(static_cast<std::size_t>(num_clusters), 0);
  for (int a : assignment) {
    if (a < 0 || a >= num_clusters)
      throw InvariantViolation("cluster index " + std::to_string(a) + " outside [0, " +
                               std::to_string(num_clusters) + ")");
    ++p.counts[static_cast<std::size_t>(a)];
  }
  p.assignment = std::move(assignment);
  return p;
}

void Partition::validate() const {
  if (static_cast<int>(counts.size()) != num_clusters)
    throw InvariantViolation("partition count vector has wrong length");
  std::vector<Index> recount(counts.size(), 0);
  for (int a : assignment) {
    if (a < 0 || a >= num_clusters)
      throw InvariantViolation("cluster index " + std::to_string(a) + " out of range");
    ++recount[static_cast<std::size_t>(a)];
  }
  if (recount != counts) throw InvariantViolation("partition counts disagree with assignment");
}

template <typename S>
NormVectors<S> NormVectors<S>::gaussian(int bits, Index dim, std::mt19937_64& rng) {
  if (bits < 1 || bits > 16) throw ContractError("hash bits must lie in [1, 16]");
  std::normal_distribution<double> dist(0.0, 1.0);
  Vector<S> v(bits * dim);
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<S>(dist(rng));
  return {Tensor<S>::from_vector({bits, dim}, std::move(v))};
}

template <typename S>
Partition lsh_assign(const TokenBlock<S>& tokens, const NormVectors<S>& norms) {
  if (tokens.cols() != norms.dim())
    throw ShapeError("lsh_assign: tokens have dimension " + std::to_string(tokens.cols()) +
                     " but norm vectors have " + std::to_string(norms.dim()));
  const Eigen::Map<const RowMatrix<S>> beta(norms.beta.data().data(), norms.bits(), norms.dim());
  const RowMatrix<S> projections = tokens * beta.transpose();  // n x bits
  std::vector<int> codes(static_cast<std::size_t>(tokens.rows()), 0);
  for (Index t = 0; t < tokens.rows(); ++t) {
    int code = 0;
    for (int i = 0; i < norms.bits(); ++i)
      if (projections(t, i) >= S(0)) code |= 1 << i;
    codes[static_cast<std::size_t>(t)] = code;
  }
  return Partition::from_assignment(std::move(codes), norms.num_clusters());
}

template <typename S>
Partition lsh_assign(const Tensor<S>& tokens, const NormVectors<S>& norms) {
  if (tokens.rank() != 2) throw ShapeError("lsh_assign: tokens must be [n x d], got " + to_string(tokens.shape()));
  return lsh_assign<S>(TokenBlock<S>(tokens.matrix()), norms);
}

double clustering_objective(const Eigen::MatrixXd& tokens, const Partition& p) {
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(p.num_clusters, tokens.cols());
  for (Index i = 0; i < tokens.rows(); ++i) means.row(p.assignment[i]) += tokens.row(i);
  for (int k = 0; k < p.num_clusters; ++k)
    if (p.counts[k] > 0) means.row(k) /= static_cast<double>(p.counts[k]);
  double total = 0.0;
  for (Index i = 0; i < tokens.rows(); ++i)
    total += (tokens.row(i) - means.row(p.assignment[i])).squaredNorm();
  return total;
}

template <typename S>
Partition kmeans_assign(const TokenBlock<S>& tokens, int num_clusters, const KMeansOptions& options) {
  const Index n = tokens.rows();
  if (num_clusters <= 0) throw ContractError("kmeans_assign: K must be positive");
  if (num_clusters > n)
    throw ContractError("kmeans_assign: K = " + std::to_string(num_clusters) + " exceeds n = " +
                        std::to_string(n));
  if (options.max_iters < 1) throw ContractError("kmeans_assign: max_iters must be >= 1");

  const Eigen::MatrixXd x = tokens.template cast<double>();
  const int K = num_clusters;
  std::mt19937_64 rng(options.seed);
  Eigen::MatrixXd centroids(K, x.cols());

  // k-means++ seeding
  std::uniform_int_distribution<Index> pick(0, n - 1);
  centroids.row(0) = x.row(pick(rng));
  Eigen::VectorXd d2(n);
  for (Index i = 0; i < n; ++i) d2[i] = (x.row(i) - centroids.row(0)).squaredNorm();
  for (int c = 1; c < K; ++c) {
    const double total = d2.sum();
    Index chosen = 0;
    if (total <= 0.0) {
      chosen = pick(rng);
    } else {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng);
      chosen = n - 1;
      for (Index i = 0; i < n; ++i) {
        r -= d2[i];
        if (r < 0.0) {
          chosen = i;
          break;
        }
      }
    }
    centroids.row(c) = x.row(chosen);
    for (Index i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], (x.row(i) - centroids.row(c)).squaredNorm());
  }

  std::vector<int> assignment(static_cast<std::size_t>(n), -1);
  double previous = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < options.max_iters; ++iter) {
    bool changed = false;
    for (Index i = 0; i < n; ++i) {
      int best = 0;
      double best_d = (x.row(i) - centroids.row(0)).squaredNorm();
      for (int k = 1; k < K; ++k) {
        const double d = (x.row(i) - centroids.row(k)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      if (assignment[i] != best) {
        assignment[i] = best;
        changed = true;
      }
    }
    if (!changed && iter > 0) break;

    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(K, x.cols());
    std::vector<Index> counts(static_cast<std::size_t>(K), 0);
    for (Index i = 0; i < n; ++i) {
      sums.row(assignment[i]) += x.row(i);
      ++counts[assignment[i]];
    }
    for (int k = 0; k < K; ++k)
      if (counts[k] > 0) centroids.row(k) = sums.row(k) / static_cast<double>(counts[k]);
    for (int k = 0; k < K; ++k) {
      if (counts[k] > 0) continue;
      Index far = 0;
      double far_d = -1.0;
      for (Index i = 0; i < n; ++i) {
        const double d = (x.row(i) - centroids.row(assignment[i])).squaredNorm();
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      centroids.row(k) = x.row(far);
    }

    double objective = 0.0;
    for (Index i = 0; i < n; ++i) objective += (x.row(i) - centroids.row(assignment[i])).squaredNorm();
    if (objective > previous * (1.0 + 1e-12) + 1e-12)
      throw ContractError("k-means objective increased from " + std::to_string(previous) + " to " +
                          std::to_string(objective) + " at iteration " + std::to_string(iter));
    previous = objective;
    if (options.objective_trace) options.objective_trace->push_back(objective);
  }

  Partition p = Partition::from_assignment(std::move(assignment), K);
  p.centroids = std::move(centroids);
  return p;
}

template <typename S>
Partition kmeans_assign(const Tensor<S>& tokens, int num_clusters, int max_iters, std::uint64_t seed) {
  if (tokens.rank() != 2) throw ShapeError("kmeans_assign: tokens must be [n x d], got " + to_string(tokens.shape()));
  KMeansOptions options;
  options.max_iters = max_iters;
  options.seed = seed;
  return kmeans_assign<S>(TokenBlock<S>(tokens.matrix()), num_clusters, options);
}

std::string to_string(PartitionMethod method) {
  return method == PartitionMethod::lsh ? "lsh" : "kmeans";
}

ThroughputStats partition_throughput(PartitionMethod method, Index tokens, Index dim, int clusters,
                                     int repeats, int kmeans_iters, std::uint64_t seed) {
  if (repeats < 3) throw ContractError("partition_throughput needs at least 3 repeats");
  if (tokens < 1 || dim < 1 || clusters < 1) throw ContractError("partition_throughput: sizes must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  RowMatrix<float> buffer(tokens, dim);
  for (Index i = 0; i < buffer.size(); ++i) buffer.data()[i] = dist(rng);

  NormVectors<float> norms;
  if (method == PartitionMethod::lsh) {
    int bits = 0;
    while ((1 << bits) < clusters) ++bits;
    if ((1 << bits) != clusters || bits == 0)
      throw ContractError("LSH needs K to be a power of two >= 2, got " + std::to_string(clusters));
    norms = NormVectors<float>::gaussian(bits, dim, rng);
  }
  const int k_eff = static_cast<int>(std::min<Index>(clusters, tokens));
  KMeansOptions options;
  options.max_iters = kmeans_iters;
  options.seed = seed;

  std::uint64_t sink = 0;
  const auto run_once = [&] {
    const Partition p = method == PartitionMethod::lsh
                            ? lsh_assign<float>(TokenBlock<float>(buffer), norms)
                            : kmeans_assign<float>(TokenBlock<float>(buffer), k_eff, options);
    sink += static_cast<std::uint64_t>(p.assignment.back());
  };
  using Clock = std::chrono::steady_clock;
  const auto seconds_for = [&](int calls) {
    const auto start = Clock::now();
    for (int c = 0; c < calls; ++c) run_once();
    return std::chrono::duration<double>(Clock::now() - start).count();
  };

  // Warmup doubles as calibration: batch enough calls that one sample takes >= 2 ms.
  int calls = 1;
  while (seconds_for(calls) < 2e-3 && calls < (1 << 20)) calls *= 2;

  std::vector<double> rates;
  for (int r = 0; r < repeats; ++r)
    rates.push_back(static_cast<double>(tokens) * calls / seconds_for(calls));
  std::sort(rates.begin(), rates.end());
  const auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(rates.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = static_cast<std::size_t>(std::ceil(pos));
    return rates[lo] + (rates[hi] - rates[lo]) * (pos - static_cast<double>(lo));
  };
  if (sink == std::numeric_limits<std::uint64_t>::max()) rates.push_back(0.0);  // keeps `sink` live

  ThroughputStats stats;
  stats.method = method;
  stats.tokens = tokens;
  stats.dim = dim;
  stats.clusters = clusters;
  stats.median = quantile(0.5);
  stats.p10 = quantile(0.1);
  stats.p90 = quantile(0.9);
  return stats;
}

std::string throughput_csv_header() { return "method,n,d,K,median_tokens_per_sec,p10,p90"; }

std::string throughput_csv_row(const ThroughputStats& s) {
  std::ostringstream os;
  os.precision(10);
  os << to_string(s.method) << ',' << s.tokens << ',' << s.dim << ',' << s.clusters << ','
     << s.median << ',' << s.p10 << ',' << s.p90;
  return os.str();
}

#define DUALFORMER_INSTANTIATE_PARTITION(S)                                                     \
  template struct NormVectors<S>;                                                               \
  template Partition lsh_assign(const TokenBlock<S>&, const NormVectors<S>&);                   \
  template Partition lsh_assign(const Tensor<S>&, const NormVectors<S>&);                       \
  template Partition kmeans_assign(const TokenBlock<S>&, int, const KMeansOptions&);            \
  template Partition kmeans_assign(const Tensor<S>&, int, int, std::uint64_t);

DUALFORMER_INSTANTIATE_PARTITION(float)
DUALFORMER_INSTANTIATE_PARTITION(double)

}  // namespace dualformer
