#include "dualformer/checkpoint.hpp"
#include "dualformer/flops.hpp"
#include "dualformer/model.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace dualformer;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dualformer_unit_" + name);
}

Tensor<float> random_images(Index batch, Index size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  Vector<float> v(batch * 3 * size * size);
  for (Index i = 0; i < v.size(); ++i) v[i] = d(rng);
  return Tensor<float>::from_vector({batch, 3, size, size}, v);
}

}  // namespace

TEST_CASE("preset depths, channels and heads") {
  const auto t = ModelConfig::preset("T");
  CHECK(t.depths == std::array<int, 4>{2, 2, 4, 2});
  CHECK(t.channels == std::array<Index, 4>{64, 128, 256, 320});
  CHECK(ModelConfig::preset("B").depths == std::array<int, 4>{6, 12, 25, 7});
  CHECK(ModelConfig::preset("XS").heads == std::array<int, 4>{2, 4, 10, 8});
  CHECK(ModelConfig::preset("Micro").heads == std::array<int, 4>{1, 1, 2, 4});
  CHECK_THROWS_AS(ModelConfig::preset("XXL"), ConfigError);
}

TEST_CASE("default heads divide the attention width") {
  CHECK(default_heads(64, 32) == 2);
  CHECK(default_heads(320, 160) == 10);
  CHECK(default_heads(368, 184) == 8);
  CHECK(default_heads(16, 8) == 1);
}

TEST_CASE("config text round-trips") {
  for (const auto& name : ModelConfig::preset_names()) {
    ModelConfig c = ModelConfig::preset(name);
    c.mode = BlockMode::series;
    c.share_partitions = true;
    CHECK(ModelConfig::from_text(c.to_text()) == c);
  }
  const auto c = ModelConfig::from_text("# comment\npreset=Micro\nnum_classes=7\n");
  CHECK(c.num_classes == 7);
  CHECK(c.channels == ModelConfig::preset("Micro").channels);
  CHECK_THROWS_AS(ModelConfig::from_text("preset=Micro\ncolour=blue\n"), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_text("preset=Micro\ndepths=1,2\n"), ConfigError);
}

TEST_CASE("validation names the offending stage") {
  ModelConfig c = ModelConfig::preset("Micro");
  c.heads[2] = 3;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("stage 3") != std::string::npos);
  }
}

TEST_CASE("forward produces logits and rejects bad resolutions") {
  Model<float> m = build_model<float>(ModelConfig::preset("Micro"), 1);
  const auto logits = forward(m, random_images(2, 32, 2), ForwardContext{});
  CHECK(logits.shape() == Shape{2, 4});
  const auto stages = forward_stages(m, random_images(1, 64, 3), ForwardContext{});
  CHECK(stages[0].shape() == Shape{1, 16, 16, 16});
  CHECK(stages[3].shape() == Shape{1, 128, 2, 2});
  CHECK_THROWS(forward(m, random_images(1, 48, 4), ForwardContext{}));
}

TEST_CASE("instrumented MACs equal the analytic count") {
  for (BlockMode mode : {BlockMode::parallel, BlockMode::series, BlockMode::conv_only, BlockMode::intra_only}) {
    ModelConfig c = ModelConfig::preset("Micro");
    c.mode = mode;
    Model<float> m = build_model<float>(c, 1);
    NoGradGuard guard;
    mac_counter() = 0;
    forward(m, random_images(1, 64, 5), ForwardContext{});
    CHECK(mac_counter() == count_flops(c, 64, 64));
  }
}

TEST_CASE("vanilla attention FLOPs formula") {
  CHECK(vanilla_attention_flops(10, 4, 2) == 3u * 10 * 4 * 2 + 2u * 100 * 2);
}

TEST_CASE("checkpoints round-trip bitwise") {
  Model<float> m = build_model<float>(ModelConfig::preset("Micro"), 3);
  const auto path = temp_path("roundtrip.dfck");
  save_checkpoint(m, path.string());
  Model<float> back = load_checkpoint<float>(path.string());
  CHECK(back.config == m.config);
  CHECK(checkpoint_bytes(back) == checkpoint_bytes(m));
  CHECK(read_checkpoint_config(path.string()) == m.config);
  const auto x = random_images(1, 32, 6);
  CHECK(forward(back, x, ForwardContext{}).data() == forward(m, x, ForwardContext{}).data());
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint loading reports mismatches and damage") {
  Model<float> m = build_model<float>(ModelConfig::preset("Micro"), 3);
  const std::string bytes = checkpoint_bytes(m);
  const auto path = temp_path("damaged.dfck");

  std::ofstream(path, std::ios::binary) << bytes;
  const ModelConfig other = ModelConfig::preset("T");
  try {
    load_checkpoint<float>(path.string(), &other);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    CHECK(what.find("'Micro'") != std::string::npos);
    CHECK(what.find("'T'") != std::string::npos);
  }

  std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS(load_checkpoint<float>(path.string()), FormatError);
  std::ofstream(path, std::ios::binary) << bytes << "x";
  CHECK_THROWS_AS(load_checkpoint<float>(path.string()), FormatError);
  std::ofstream(path, std::ios::binary) << "XXXX" << bytes.substr(4);
  CHECK_THROWS_AS(load_checkpoint<float>(path.string()), FormatError);
  std::filesystem::remove(path);
}
