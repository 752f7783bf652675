#include "oracles.hpp"

#include "dualformer/audit.hpp"
#include "dualformer/flops.hpp"
#include "dualformer/fourier.hpp"
#include "dualformer/train.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <unistd.h>
#include <iostream>
#include <sstream>

using namespace dualformer;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

// ----------------------------------------------------------------- 1

Outcome config_fidelity() {
  const auto start = Clock::now();
  struct Target {
    const char* name;
    std::array<int, 4> depths;
    std::array<Index, 4> channels;
    double params, flops;
  };
  const Target targets[] = {
      {"T", {2, 2, 4, 2}, {64, 128, 256, 320}, 5.5e6, 1.3e9},
      {"XS", {2, 2, 4, 2}, {64, 128, 320, 368}, 10.5e6, 2.3e9},
      {"S", {4, 4, 7, 3}, {64, 128, 320, 512}, 22.6e6, 4.4e9},
      {"B", {6, 12, 25, 7}, {64, 128, 368, 560}, 74.0e6, 15.8e9},
  };
  bool pass = true;
  std::ostringstream os;
  for (const auto& t : targets) {
    const ModelConfig c = ModelConfig::preset(t.name);
    Model<float> m = build_model<float>(c, 0);
    const double params = static_cast<double>(count_params(m));
    const double flops = static_cast<double>(count_flops(c, 224, 224));
    const double dp = params / t.params - 1.0, df = flops / t.flops - 1.0;
    const bool ok = c.depths == t.depths && c.channels == t.channels && std::abs(dp) <= 0.15 && std::abs(df) <= 0.25;
    pass = pass && ok;
    os << t.name << " params " << fmt(params / 1e6) << "M (" << fmt(100 * dp, 3) << "%) flops " << fmt(flops / 1e9)
       << "G (" << fmt(100 * df, 3) << "%); ";
  }
  const double elapsed = seconds_since(start);
  os << "time " << fmt(elapsed, 3) << "s";
  return {pass && elapsed < 10.0, os.str()};
}

// ----------------------------------------------------------------- 2

void randomize(Tensor<double>& t, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (Index i = 0; i < t.numel(); ++i) t.mutable_data()[i] = u(rng);
}

Outcome oracle_equivalence() {
  const auto start = Clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> n_dist(1, 32), d_dist(1, 8), k_dist(1, 8);
  constexpr int instances = 120;
  std::map<std::string, double> worst;

  for (int it = 0; it < instances; ++it) {
    const auto n = static_cast<std::size_t>(n_dist(rng));
    const int H = 1 + it % 2;
    const auto C = static_cast<std::size_t>(H * (1 + d_dist(rng) % (8 / H)));
    const int K = k_dist(rng);
    const auto cluster = oracle::random_clusters(n, K, rng);
    const Partition p = Partition::from_assignment(cluster, K);

    const oracle::Mat x = oracle::random_mat(n, C, rng, 0.05, 1.0);
    const oracle::Mat xt = oracle::random_mat(n, C, rng);
    const auto intra_lib = intra_partition_attention(oracle::from_mat(x), oracle::from_mat(xt), p, 1e-6);
    const oracle::Mat intra_ref = oracle::intra(x, xt, cluster, 1e-6);
    worst["intra_partition_attention"] =
        std::max(worst["intra_partition_attention"], oracle::max_abs_diff(oracle::to_mat(intra_lib), intra_ref));

    Initializer init(rng());
    MhpaParams<double> params = MhpaParams<double>::init(init, static_cast<Index>(C), H, 1, 3);
    for (Tensor<double>* t : {&params.importance_hidden.bias, &params.importance_out.bias, &params.aggregation.bias})
      randomize(*t, rng);
    const auto inter_lib = inter_partition_attention(oracle::from_mat(xt), p, params);
    const auto w1 = oracle::to_mat(params.importance_hidden.weight), w2 = oracle::to_mat(params.importance_out.weight);
    const auto b1 = oracle::to_mat(reshape(params.importance_hidden.bias, {1, params.importance_hidden.bias.numel()}))[0];
    const auto b2 = oracle::to_mat(reshape(params.importance_out.bias, {1, 1}))[0];
    const oracle::Mat inter_ref = oracle::inter(xt, cluster, K, H, w1, b1, w2, b2);
    worst["inter_partition_attention"] =
        std::max(worst["inter_partition_attention"], oracle::max_abs_diff(oracle::to_mat(inter_lib), inter_ref));

    const auto agg_lib = global_local_aggregate(oracle::from_mat(intra_ref), oracle::from_mat(inter_ref), p, params);
    const auto wa = oracle::to_mat(params.aggregation.weight);
    const auto ba = oracle::to_mat(reshape(params.aggregation.bias, {1, params.aggregation.bias.numel()}))[0];
    worst["global_local_aggregate"] = std::max(
        worst["global_local_aggregate"],
        oracle::max_abs_diff(oracle::to_mat(agg_lib), oracle::aggregate(intra_ref, inter_ref, cluster, wa, ba)));

    // channel_to_spatial on [B, C k^2, h, w]
    {
      std::uniform_int_distribution<long> small(1, 3);
      const long B = small(rng), Cs = small(rng), h = small(rng), w = small(rng), k = small(rng);
      const bool with_skip = it % 2 == 0;
      const long total = B * Cs * k * k * h * w;
      std::vector<double> in(static_cast<std::size_t>(total)), skip;
      for (auto& v : in) v = std::uniform_real_distribution<double>(-1, 1)(rng);
      Tensor<double> skip_t;
      if (with_skip) {
        skip.resize(in.size());
        for (auto& v : skip) v = std::uniform_real_distribution<double>(-1, 1)(rng);
        skip_t = Tensor<double>::from_vector({B, Cs, h * k, w * k}, Eigen::Map<Vector<double>>(skip.data(), total));
      }
      const auto lib = channel_to_spatial(
          Tensor<double>::from_vector({B, Cs * k * k, h, w}, Eigen::Map<Vector<double>>(in.data(), total)), k, skip_t);
      const auto ref = oracle::channel_to_spatial(in, B, Cs * k * k, h, w, k, skip);
      double e = 0.0;
      for (long i = 0; i < total; ++i) e = std::max(e, std::abs(lib[i] - ref[static_cast<std::size_t>(i)]));
      worst["channel_to_spatial"] = std::max(worst["channel_to_spatial"], e);
    }

    // lsh_assign: mismatched codes count as error 1
    {
      const int bits = 1 + it % 4;
      const auto d = static_cast<Index>(d_dist(rng));
      const NormVectors<double> norms = NormVectors<double>::gaussian(bits, d, rng);
      const oracle::Mat tokens = oracle::random_mat(n, static_cast<std::size_t>(d), rng);
      const Partition lib = lsh_assign(oracle::from_mat(tokens), norms);
      const auto ref = oracle::lsh(tokens, oracle::to_mat(norms.beta));
      worst["lsh_assign"] = std::max(worst["lsh_assign"], lib.assignment == ref ? 0.0 : 1.0);
    }

    // vanilla_attention
    {
      const auto d = static_cast<std::size_t>(d_dist(rng)), de = static_cast<std::size_t>(d_dist(rng));
      const oracle::Mat xa = oracle::random_mat(n, d, rng), wq = oracle::random_mat(d, de, rng),
                        wk = oracle::random_mat(d, de, rng), wv = oracle::random_mat(d, de, rng);
      const auto lib = vanilla_attention(oracle::from_mat(xa), oracle::from_mat(wq), oracle::from_mat(wk),
                                         oracle::from_mat(wv));
      worst["vanilla_attention"] = std::max(
          worst["vanilla_attention"], oracle::max_abs_diff(oracle::to_mat(lib), oracle::vanilla_attention(xa, wq, wk, wv)));
    }
  }
  bool pass = true;
  std::ostringstream os;
  for (const auto& [name, e] : worst) {
    pass = pass && e <= 1e-6;
    os << name << " " << fmt(e, 3) << "; ";
  }
  const double elapsed = seconds_since(start);
  os << instances << " instances each, time " << fmt(elapsed, 3) << "s";
  return {pass && elapsed < 60.0, os.str()};
}

// ----------------------------------------------------------------- 3

Outcome gradient_audit() {
  const auto start = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  int cases = 0;
  for (const auto& c : audit_operations(3, 10)) {
    ++cases;
    if (c.worst.max_relative_error >= worst) {
      worst = c.worst.max_relative_error;
      worst_name = c.name;
    }
  }
  const GradCheckResult model = audit_model(ModelConfig::preset("Micro"), 3);
  const double elapsed = seconds_since(start);
  std::ostringstream os;
  os << cases << " operations, worst " << worst_name << " " << fmt(worst, 3) << "; Micro model "
     << fmt(model.max_relative_error, 3) << " over " << model.elements_checked << " elements; time " << fmt(elapsed, 3)
     << "s";
  return {worst <= 1e-4 && model.max_relative_error <= 1e-4 && elapsed < 300.0, os.str()};
}

// ----------------------------------------------------------------- 4

Outcome complexity() {
  bool pass = true;
  std::ostringstream os;
  for (Index side : {28, 56}) {
    MhpaShape s{side, side, 64, 2, 1, 3, MhpaPath::both};
    const double base = static_cast<double>(mhpa_flops(s));
    s.height = s.width = 2 * side;
    const double ratio = static_cast<double>(mhpa_flops(s)) / base;
    const Index n = side * side;
    const double vratio = static_cast<double>(vanilla_attention_flops(4 * n, 64, 64)) /
                          static_cast<double>(vanilla_attention_flops(n, 64, 64));
    pass = pass && ratio >= 3.5 && ratio <= 4.5 && vratio >= 14.0 && vratio <= 18.0;
    os << "n=" << n << "->" << 4 * n << ": mhpa x" << fmt(ratio) << ", vanilla x" << fmt(vratio) << "; ";
  }
  return {pass, os.str()};
}

// ----------------------------------------------------------------- 5

Outcome throughput() {
  const auto start = Clock::now();
  const auto lsh = partition_throughput(PartitionMethod::lsh, 3136, 64, 8, 9, 5, 5);
  const auto km = partition_throughput(PartitionMethod::kmeans, 3136, 64, 8, 9, 5, 5);
  const double ratio = lsh.median / km.median;
  const double elapsed = seconds_since(start);
  return {ratio >= 1.2 && elapsed < 120.0,
          "LSH " + fmt(lsh.median, 5) + " tokens/s, K-Means " + fmt(km.median, 5) + " tokens/s, ratio " + fmt(ratio) +
              "; time " + fmt(elapsed, 3) + "s"};
}

// ----------------------------------------------------------------- 6, 7, 8

struct ToyRun {
  TrainReport report;
  Model<float> model;
  double seconds = 0.0;
};

ToyRun train_micro(BlockMode mode, std::uint64_t seed = 1) {
  ModelConfig config = ModelConfig::preset("Micro");
  config.mode = mode;
  const Dataset train = generate_shapes(1, 2000);
  const Dataset val = generate_shapes(2, 500);
  TrainOptions options;
  options.seed = seed;
  const auto start = Clock::now();
  ToyRun run{{}, build_model<float>(config, seed), 0.0};
  run.report = train_toy(run.model, train, val, options);
  run.seconds = seconds_since(start);
  return run;
}

Outcome toy_training() {
  const ToyRun run = train_micro(BlockMode::parallel);
  const double acc = run.report.final_val_accuracy();
  return {acc >= 0.9 && run.seconds < 600.0, "Micro, 2000 images, 30 epochs: validation accuracy " + fmt(acc) +
                                                   " (initial " + fmt(run.report.initial_val_accuracy) + "), time " +
                                                   fmt(run.seconds, 3) + "s"};
}

Outcome ablation_ordering() {
  const double parallel = train_micro(BlockMode::parallel).report.final_loss();
  const double series = train_micro(BlockMode::series).report.final_loss();
  const double intra = train_micro(BlockMode::intra_only).report.final_loss();
  return {parallel <= series && parallel <= intra, "final train loss: parallel " + fmt(parallel) + ", series " +
                                                        fmt(series) + ", intra_only " + fmt(intra)};
}

double stage3_top_quartile(Model<float>& model, const Dataset& images) {
  NoGradGuard no_grad;
  const auto features = forward_stages(model, images.images, ForwardContext{});
  return radial_log_amplitude(features[2]).top_quartile_mean();
}

Outcome fourier_property() {
  ToyRun dual = train_micro(BlockMode::parallel);
  ToyRun attn = train_micro(BlockMode::attn_only);
  const Dataset renders = generate_shapes(3, 64, 128);
  const double a = stage3_top_quartile(dual.model, renders);
  const double b = stage3_top_quartile(attn.model, renders);
  return {a > b, "stage-3 top-quartile relative log amplitude on 128x128 renders: dual " + fmt(a) + " (" +
                     fmt(nepers_to_db(a)) + " dB), attn_only " + fmt(b) + " (" + fmt(nepers_to_db(b)) + " dB)"};
}

// ----------------------------------------------------------------- 9

Outcome invariants() {
  const auto start = Clock::now();
  constexpr int cases = 250;
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> n_dist(1, 64), d_dist(1, 16), bits_dist(1, 4);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::map<std::string, int> failures;
  const auto check = [&](const std::string& name, bool ok) { failures[name] += ok ? 0 : 1; };

  for (int it = 0; it < cases; ++it) {
    const Index n = n_dist(rng), d = d_dist(rng);
    const oracle::Mat tokens = oracle::random_mat(static_cast<std::size_t>(n), static_cast<std::size_t>(d), rng);
    const Tensor<double> t = oracle::from_mat(tokens);

    // Disjoint and exhaustive: one valid cluster per token, counts add up.
    const NormVectors<double> norms = NormVectors<double>::gaussian(bits_dist(rng), d, rng);
    const int K = std::min<int>(static_cast<int>(n), 1 + it % 8);
    for (const Partition& p : {lsh_assign(t, norms), kmeans_assign(t, K, 5, rng())}) {
      bool ok = p.size() == n;
      Index total = 0;
      std::vector<Index> counts(static_cast<std::size_t>(p.num_clusters), 0);
      for (int a : p.assignment) {
        ok = ok && a >= 0 && a < p.num_clusters;
        if (a >= 0 && a < p.num_clusters) ++counts[static_cast<std::size_t>(a)];
      }
      for (int k = 0; k < p.num_clusters; ++k) total += p.counts[k];
      check("partition disjoint and exhaustive", ok && total == n && counts == p.counts);
    }

    // LSH codes are unchanged by positive scaling of a token.
    {
      const double alpha = std::exp(std::uniform_real_distribution<double>(-7.0, 7.0)(rng));
      oracle::Mat scaled = tokens;
      for (auto& row : scaled)
        for (auto& v : row) v *= alpha;
      check("LSH scale invariance",
            lsh_assign(oracle::from_mat(scaled), norms).assignment == lsh_assign(t, norms).assignment);
    }

    // Importance coefficients of each head sum to one over the clusters.
    const int H = 1 + it % 2;
    const Index C = H * (1 + d % 4);
    const int Kc = 1 + it % 8;
    const auto cluster = oracle::random_clusters(static_cast<std::size_t>(n), Kc, rng);
    const Partition p = Partition::from_assignment(cluster, Kc);
    Initializer init(rng());
    const MhpaParams<double> params = MhpaParams<double>::init(init, C, H, 1, 3);
    const oracle::Mat xt = oracle::random_mat(static_cast<std::size_t>(n), static_cast<std::size_t>(C), rng, -3, 3);
    {
      const oracle::Mat coef = oracle::to_mat(importance_coefficients(oracle::from_mat(xt), p, params));
      bool ok = true;
      for (int h = 0; h < H; ++h) {
        double s = 0.0;
        for (int k = 0; k < Kc; ++k) s += coef[k][h];
        ok = ok && std::abs(s - 1.0) <= 1e-6;
      }
      check("importance coefficients sum to one", ok);
    }

    // Singleton clusters: intra attention returns x~ and cluster means are the tokens.
    {
      std::vector<int> own(static_cast<std::size_t>(n));
      for (Index i = 0; i < n; ++i) own[static_cast<std::size_t>(i)] = static_cast<int>(i);
      const Partition singles = Partition::from_assignment(own, static_cast<int>(n));
      const oracle::Mat x = oracle::random_mat(static_cast<std::size_t>(n), static_cast<std::size_t>(C), rng, 0.05, 1);
      const oracle::Mat out =
          oracle::to_mat(intra_partition_attention(oracle::from_mat(x), oracle::from_mat(xt), singles, 1e-6));
      bool ok = true;
      for (Index i = 0; i < n; ++i)
        for (Index c = 0; c < C; ++c) ok = ok && std::abs(out[i][c] - xt[i][c]) <= 1e-4 * std::abs(xt[i][c]) + 1e-12;
      const auto means = partition_mean(reshape(oracle::from_mat(xt), {1, n, C}),
                                        std::vector<Partition>(static_cast<std::size_t>(H), singles), H);
      ok = ok && oracle::max_abs_diff(oracle::to_mat(reshape(means, {n, C})), xt) == 0.0;
      check("singleton cluster identity", ok);
    }

    // Permuting tokens within their clusters permutes intra and aggregate
    // outputs the same way and leaves inter outputs unchanged.
    {
      std::vector<std::size_t> perm(static_cast<std::size_t>(n));
      for (int k = 0; k < Kc; ++k) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < perm.size(); ++i)
          if (cluster[i] == k) members.push_back(i);
        std::vector<std::size_t> shuffled = members;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        for (std::size_t j = 0; j < members.size(); ++j) perm[members[j]] = shuffled[j];
      }
      const oracle::Mat x = oracle::random_mat(static_cast<std::size_t>(n), static_cast<std::size_t>(C), rng, 0.05, 1);
      oracle::Mat xp = x, xtp = xt;
      for (std::size_t i = 0; i < perm.size(); ++i) {
        xp[i] = x[perm[i]];
        xtp[i] = xt[perm[i]];
      }
      const oracle::Mat a = oracle::to_mat(intra_partition_attention(oracle::from_mat(x), oracle::from_mat(xt), p));
      const oracle::Mat b = oracle::to_mat(intra_partition_attention(oracle::from_mat(xp), oracle::from_mat(xtp), p));
      const auto inter_a = inter_partition_attention(oracle::from_mat(xt), p, params);
      const auto inter_b = inter_partition_attention(oracle::from_mat(xtp), p, params);
      const oracle::Mat agg_a = oracle::to_mat(global_local_aggregate(oracle::from_mat(a), inter_a, p, params));
      const oracle::Mat agg_b = oracle::to_mat(global_local_aggregate(oracle::from_mat(b), inter_b, p, params));
      double e = oracle::max_abs_diff(oracle::to_mat(inter_a), oracle::to_mat(inter_b));
      for (std::size_t i = 0; i < perm.size(); ++i)
        for (Index c = 0; c < C; ++c) {
          e = std::max(e, std::abs(b[i][c] - a[perm[i]][c]));
          e = std::max(e, std::abs(agg_b[i][c] - agg_a[perm[i]][c]));
        }
      check("within-cluster permutation equivariance", e <= 1e-9);
    }

    // K-Means objective never increases across Lloyd iterations.
    {
      std::vector<double> trace;
      KMeansOptions o;
      o.max_iters = 20;
      o.seed = rng();
      o.objective_trace = &trace;
      const RowMatrix<double> m = t.matrix();
      bool ok = true;
      try {
        kmeans_assign<double>(m, K, o);
      } catch (const ContractError&) {
        ok = false;
      }
      for (std::size_t i = 1; i < trace.size(); ++i) ok = ok && trace[i] <= trace[i - 1] * (1 + 1e-12) + 1e-12;
      check("K-Means objective monotone", ok);
    }
  }
  bool pass = true;
  std::ostringstream os;
  for (const auto& [name, f] : failures) {
    pass = pass && f == 0;
    os << name << " " << f << " failures; ";
  }
  const double elapsed = seconds_since(start);
  os << cases << " cases each, time " << fmt(elapsed, 3) << "s";
  return {pass && elapsed < 180.0, os.str()};
}

// ----------------------------------------------------------------- 10

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / ("dualformer_determinism_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  std::vector<std::string> csv, checkpoint, maps;
  bool ran = true;
  for (int run = 0; run < 2; ++run) {
    const fs::path out = dir / ("run" + std::to_string(run));
    fs::create_directories(out);
    const std::string cli = DUALFORMER_CLI;
    const std::string train = cli + " train --preset Micro --seed 11 --threads 1 --n 400 --val 100 --epochs 3 --out " +
                              (out / "train.csv").string() + " --checkpoint " + (out / "model.dfck").string();
    const std::string dump = cli + " partitions --checkpoint " + (out / "model.dfck").string() +
                             " --stage 2 --resolution 64 --seed 11 --threads 1 --out " + (out / "map_").string() +
                             " > /dev/null";
    ran = ran && std::system(train.c_str()) == 0 && std::system(dump.c_str()) == 0;
    csv.push_back(slurp(out / "train.csv"));
    checkpoint.push_back(slurp(out / "model.dfck"));
    std::string all;
    for (const auto& e : fs::directory_iterator(out))
      if (e.path().extension() == ".pgm") all += e.path().filename().string() + slurp(e.path());
    maps.push_back(all);
  }
  fs::remove_all(dir);
  const bool same = csv[0] == csv[1] && checkpoint[0] == checkpoint[1] && maps[0] == maps[1];
  return {ran && same && !csv[0].empty() && !checkpoint[0].empty() && !maps[0].empty(),
          "two CLI runs, seed 11, 1 thread: CSV " + std::string(csv[0] == csv[1] ? "identical" : "differs") + " (" +
              std::to_string(csv[0].size()) + " bytes), checkpoint " +
              (checkpoint[0] == checkpoint[1] ? "identical" : "differs") + " (" + std::to_string(checkpoint[0].size()) +
              " bytes), partition maps " + (maps[0] == maps[1] ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria; one line per criterion"};
  int only = 0;
  app.add_option("--criterion", only, "run a single criterion (1-10)")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"config fidelity", config_fidelity},
      {"oracle equivalence", oracle_equivalence},
      {"gradient audit", gradient_audit},
      {"complexity scaling", complexity},
      {"partitioner throughput", throughput},
      {"toy training", toy_training},
      {"ablation ordering", ablation_ordering},
      {"fourier amplitude", fourier_property},
      {"invariant suite", invariants},
      {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only != 0 && static_cast<int>(i) + 1 != only) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " C" << i + 1 << " " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
