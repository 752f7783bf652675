#include "dualformer/audit.hpp"
#include "dualformer/bench.hpp"
#include "dualformer/checkpoint.hpp"
#include "dualformer/data.hpp"
#include "dualformer/flops.hpp"
#include "dualformer/fourier.hpp"
#include "dualformer/partition_maps.hpp"
#include "dualformer/serialize.hpp"
#include "dualformer/train.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace dualformer;

namespace {

struct Common {
  std::string preset = "Micro";
  std::string config_path;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string precision = "f32";
  std::string mode;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool model_flags = true) {
  cmd->add_option("--seed", c.seed, "random seed");
  cmd->add_option("--threads", c.threads, "Eigen worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--out", c.out, "output file (stdout when omitted)");
  if (!model_flags) return;
  cmd->add_option("--preset", c.preset, "T, XS, S, B or Micro")
      ->check(CLI::IsMember(ModelConfig::preset_names()));
  cmd->add_option("--config", c.config_path, "key=value config file")->check(CLI::ExistingFile);
  cmd->add_option("--precision", c.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--mode", c.mode, "parallel, series, conv_only, attn_only, intra_only or inter_only");
}

ModelConfig resolve_config(const Common& c) {
  ModelConfig config;
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    std::stringstream ss;
    ss << in.rdbuf();
    config = ModelConfig::from_text(ss.str());
  } else {
    config = ModelConfig::preset(c.preset);
  }
  if (!c.mode.empty()) config.mode = parse_block_mode(c.mode);
  config.validate();
  return config;
}

void emit(const Common& c, const std::string& text) {
  if (c.out.empty()) {
    std::cout << text;
  } else {
    write_file_atomically(c.out, text);
  }
}

template <typename S>
Tensor<S> to_precision(const Tensor<float>& t) {
  return Tensor<S>::from_vector(t.shape(), t.data().template cast<S>());
}

// Runs `body.template operator()<S>()` with S chosen by --precision.
template <typename F>
void dispatch(const std::string& precision, F&& body) {
  if (precision == "f64") {
    body.template operator()<double>();
  } else {
    body.template operator()<float>();
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual attention vision backbone: training, analysis and benchmarks"};
  app.require_subcommand(1);
  Common c;

  auto* build = app.add_subcommand("build", "initialize a model and write its checkpoint");
  add_common(build, c);
  build->get_option("--out")->required();

  auto* train = app.add_subcommand("train", "train on the synthetic shape set; per-epoch CSV");
  add_common(train, c);
  TrainOptions topt;
  Index train_n = 2000, val_n = 500;
  std::uint64_t data_seed = 1;
  bool no_augment = false;
  train->add_option("--epochs", topt.epochs)->check(CLI::NonNegativeNumber);
  train->add_option("--n", train_n, "training images")->check(CLI::Range(8, 1 << 24));
  train->add_option("--val", val_n, "validation images")->check(CLI::Range(8, 1 << 24));
  train->add_option("--data-seed", data_seed, "dataset seed (validation uses data-seed + 1)");
  train->add_option("--lr", topt.lr)->check(CLI::PositiveNumber);
  train->add_option("--weight-decay", topt.weight_decay)->check(CLI::NonNegativeNumber);
  train->add_option("--batch", topt.batch_size)->check(CLI::PositiveNumber);
  train->add_option("--checkpoint", topt.checkpoint_path, "checkpoint written after the last epoch");
  train->add_flag("--no-augment", no_augment);
  bool verbose = false;
  train->add_flag("-v,--verbose", verbose, "progress to stderr");

  auto* eval = app.add_subcommand("eval", "validation accuracy of a checkpoint");
  add_common(eval, c);
  std::string checkpoint;
  Index eval_n = 500;
  std::uint64_t eval_seed = 2;
  eval->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--n", eval_n)->check(CLI::Range(8, 1 << 24));
  eval->add_option("--data-seed", eval_seed);

  auto* count = app.add_subcommand("count", "parameter count");
  add_common(count, c);

  auto* flops = app.add_subcommand("flops", "analytic multiply-accumulate count");
  add_common(flops, c);
  Index resolution = 224;
  flops->add_option("--resolution", resolution)->check(CLI::PositiveNumber);

  auto* bench = app.add_subcommand("bench", "throughput benchmarks");
  bench->require_subcommand(1);
  auto* bench_part = bench->add_subcommand("partition", "LSH and K-Means assignment throughput");
  add_common(bench_part, c, false);
  Index tokens = 3136, dim = 64;
  int clusters = 8, iters = 5, repeats = 7;
  bench_part->add_option("--n", tokens)->check(CLI::PositiveNumber);
  bench_part->add_option("--d", dim)->check(CLI::PositiveNumber);
  bench_part->add_option("--k", clusters)->check(CLI::PositiveNumber);
  bench_part->add_option("--iters", iters, "Lloyd iterations")->check(CLI::PositiveNumber);
  bench_part->add_option("--repeats", repeats)->check(CLI::Range(5, 100000));
  auto* bench_model = bench->add_subcommand("model", "inference forward throughput");
  add_common(bench_model, c);
  Index batch = 32, bench_res = 32;
  bench_model->add_option("--batch", batch)->check(CLI::PositiveNumber);
  bench_model->add_option("--resolution", bench_res)->check(CLI::PositiveNumber);
  bench_model->add_option("--repeats", repeats)->check(CLI::Range(5, 100000));

  auto* fourier = app.add_subcommand("fourier", "radial relative log amplitude of stage features");
  add_common(fourier, c);
  int stage = 3, bins = 64;
  Index images = 32, image_res = 128;
  fourier->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  fourier->add_option("--stage", stage)->check(CLI::Range(1, kStages));
  fourier->add_option("--images", images)->check(CLI::Range(8, 1 << 20));
  fourier->add_option("--resolution", image_res)->check(CLI::PositiveNumber);
  fourier->add_option("--bins", bins)->check(CLI::Range(2, 1 << 16));
  fourier->add_option("--data-seed", eval_seed);

  auto* partitions = app.add_subcommand("partitions", "write per-head partition maps as PGM");
  add_common(partitions, c);
  std::string image_path;
  Index sample = 0;
  partitions->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  partitions->add_option("--stage", stage);
  partitions->add_option("--image", image_path, "DFT1 tensor [3,S,S]; a synthetic image otherwise")
      ->check(CLI::ExistingFile);
  partitions->add_option("--sample", sample, "index into the synthetic set")->check(CLI::NonNegativeNumber);
  partitions->add_option("--resolution", image_res)->check(CLI::PositiveNumber);
  partitions->get_option("--out")->description("file name prefix")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit in 64-bit");
  add_common(gradcheck, c);
  int points = 10;
  bool skip_model = false;
  gradcheck->add_option("--points", points, "random points per operation")->check(CLI::PositiveNumber);
  gradcheck->add_flag("--ops-only", skip_model, "skip the whole-model audit");

  CLI11_PARSE(app, argc, argv);
  Eigen::setNbThreads(c.threads);

  try {
    if (build->parsed()) {
      const ModelConfig config = resolve_config(c);
      dispatch(c.precision, [&]<typename S>() {
        Model<S> model = build_model<S>(config, c.seed);
        save_checkpoint(model, c.out);
        std::cerr << config.name << ": " << count_params(model) << " parameters\n";
      });
    } else if (train->parsed()) {
      const ModelConfig config = resolve_config(c);
      const Dataset train_set = generate_shapes(data_seed, train_n);
      const Dataset val_set = generate_shapes(data_seed + 1, val_n);
      topt.seed = c.seed;
      topt.augment = !no_augment;
      if (verbose) topt.log = &std::cerr;
      dispatch(c.precision, [&]<typename S>() {
        Model<S> model = build_model<S>(config, c.seed);
        emit(c, train_toy(model, train_set, val_set, topt).csv());
      });
    } else if (eval->parsed()) {
      const Dataset data = generate_shapes(eval_seed, eval_n);
      dispatch(c.precision, [&]<typename S>() {
        Model<S> model = load_checkpoint<S>(checkpoint);
        std::ostringstream os;
        os << "config,images,val_accuracy\n" << model.config.name << ',' << data.size() << ','
           << evaluate(model, data) << '\n';
        emit(c, os.str());
      });
    } else if (count->parsed()) {
      const ModelConfig config = resolve_config(c);
      dispatch(c.precision, [&]<typename S>() {
        Model<S> model = build_model<S>(config, c.seed);
        std::ostringstream os;
        os << "config,mode,params\n" << config.name << ',' << to_string(config.mode) << ','
           << count_params(model) << '\n';
        emit(c, os.str());
      });
    } else if (flops->parsed()) {
      const ModelConfig config = resolve_config(c);
      std::ostringstream os;
      os << "# 1 MAC counted as 1 FLOP\nconfig,mode,resolution,flops\n"
         << config.name << ',' << to_string(config.mode) << ',' << resolution << ','
         << count_flops(config, resolution, resolution) << '\n';
      emit(c, os.str());
    } else if (bench_part->parsed()) {
      if ((clusters & (clusters - 1)) != 0) throw ContractError("--k must be a power of two for LSH");
      std::ostringstream os;
      os << "# threads=" << c.threads << '\n' << throughput_csv_header() << '\n';
      for (PartitionMethod m : {PartitionMethod::lsh, PartitionMethod::kmeans}) {
        os << throughput_csv_row(partition_throughput(m, tokens, dim, clusters, repeats, iters, c.seed)) << '\n';
      }
      emit(c, os.str());
    } else if (bench_model->parsed()) {
      const ModelConfig config = resolve_config(c);
      std::ostringstream os;
      os << "# threads=" << c.threads << '\n' << model_throughput_csv_header() << '\n'
         << model_throughput_csv_row(model_throughput(config, batch, bench_res, repeats, c.seed)) << '\n';
      emit(c, os.str());
    } else if (fourier->parsed()) {
      const Dataset data = generate_shapes(eval_seed, images, image_res);
      dispatch(c.precision, [&]<typename S>() {
        Model<S> model = load_checkpoint<S>(checkpoint);
        NoGradGuard no_grad;
        const auto features = forward_stages(model, to_precision<S>(data.images), ForwardContext{});
        emit(c, radial_log_amplitude(features[static_cast<std::size_t>(stage - 1)], bins).csv());
      });
    } else if (partitions->parsed()) {
      Tensor<float> image;
      if (!image_path.empty()) {
        std::ifstream in(image_path, std::ios::binary);
        image = read_tensor<float>(in);
        if (image.rank() != 3) throw ContractError("--image must hold a [C, H, W] tensor");
        image = Tensor<float>::from_vector({1, image.dim(0), image.dim(1), image.dim(2)}, image.data());
      } else {
        const Dataset data = generate_shapes(eval_seed, std::max<Index>(8, sample + 1), image_res);
        image = data.gather({sample});
      }
      dispatch(c.precision, [&]<typename S>() {
        Model<S> model = load_checkpoint<S>(checkpoint);
        const auto maps = partition_maps(model, to_precision<S>(image), stage);
        for (const auto& path : write_partition_maps(maps, c.out)) std::cout << path << '\n';
      });
    } else if (gradcheck->parsed()) {
      const ModelConfig config = resolve_config(c);
      std::ostringstream os;
      os.precision(6);
      os << "case,points,max_relative_error\n";
      for (const auto& a : audit_operations(c.seed, points)) {
        os << a.name << ',' << a.points << ',' << a.worst.max_relative_error << '\n';
      }
      if (!skip_model) {
        os << "model_" << config.name << ",1," << audit_model(config, c.seed).max_relative_error << '\n';
      }
      emit(c, os.str());
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
