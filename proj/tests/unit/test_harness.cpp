#include "dualformer/bench.hpp"
#include "dualformer/checkpoint.hpp"
#include "dualformer/data.hpp"
#include "dualformer/fourier.hpp"
#include "dualformer/partition_maps.hpp"
#include "dualformer/train.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

using namespace dualformer;

TEST_CASE("synthetic shapes are deterministic, balanced and normalized") {
  const Dataset a = generate_shapes(7, 400), b = generate_shapes(7, 400);
  CHECK(a.images.data() == b.images.data());
  CHECK(a.labels == b.labels);
  std::array<int, kShapeClasses> hist{};
  for (int l : a.labels) ++hist[static_cast<std::size_t>(l)];
  for (int h : hist) CHECK(std::abs(h - 100) <= 1);
  const Index S = a.image_size(), plane = S * S;
  for (Index c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (Index i = 0; i < a.size(); ++i) mean += a.images.data().segment((i * 3 + c) * plane, plane).sum();
    CHECK(std::abs(mean / static_cast<double>(a.size() * plane)) <= 0.05);
  }
  CHECK(generate_shapes(8, 400).images.data() != a.images.data());
  CHECK_THROWS(generate_shapes(1, 7));
}

TEST_CASE("dataset gather and slice") {
  const Dataset d = generate_shapes(1, 16);
  const auto g = d.gather({3, 5});
  CHECK(g.shape() == Shape{2, 3, 32, 32});
  CHECK(d.gather_labels({3, 5}) == std::vector<int>{d.labels[3], d.labels[5]});
  CHECK(d.slice(4, 8).size() == 8);
}

TEST_CASE("warmup then cosine schedule") {
  CHECK(warmup_cosine(0, 100, 10, 1.0) == doctest::Approx(0.1));
  CHECK(warmup_cosine(9, 100, 10, 1.0) == doctest::Approx(1.0));
  CHECK(warmup_cosine(55, 100, 10, 1.0) == doctest::Approx(0.5).epsilon(0.02));
  CHECK(warmup_cosine(100, 100, 10, 1.0) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("augmentation keeps pixels from the source image") {
  const Dataset d = generate_shapes(2, 8);
  Tensor<float> batch = d.gather({0, 1}).clone();
  const Tensor<float> original = batch.clone();
  std::mt19937_64 rng(1);
  augment_batch(batch, 0, rng);
  for (Index i = 0; i < 2; ++i) {
    // with no shift the only change is an optional horizontal flip
    const Index S = 32;
    bool same = true, flipped = true;
    for (Index c = 0; c < 3; ++c)
      for (Index y = 0; y < S; ++y)
        for (Index x = 0; x < S; ++x) {
          const Index base = ((i * 3 + c) * S + y) * S;
          same = same && batch[base + x] == original[base + x];
          flipped = flipped && batch[base + x] == original[base + S - 1 - x];
        }
    CHECK((same || flipped));
  }
}

TEST_CASE("untrained model sits at chance and training lowers the loss") {
  const Dataset train = generate_shapes(1, 320), val = generate_shapes(2, 200);
  Model<float> m = build_model<float>(ModelConfig::preset("Micro"), 1);
  TrainOptions o;
  o.epochs = 0;
  const auto untrained = train_toy(m, train, val, o);
  CHECK(std::abs(untrained.final_val_accuracy() - 0.25) <= 0.10);

  o.epochs = 5;
  o.seed = 1;
  const auto report = train_toy(m, train, val, o);
  REQUIRE(report.epochs.size() == 5);
  for (const auto& e : report.epochs) CHECK(std::isfinite(e.loss));
  CHECK(report.epochs.back().loss < report.epochs.front().loss);
  CHECK(report.csv().rfind("epoch,loss,train_accuracy,val_accuracy\n0,,,", 0) == 0);
}

TEST_CASE("divergence aborts with the step") {
  const Dataset train = generate_shapes(1, 64), val = generate_shapes(2, 16);
  Model<float> m = build_model<float>(ModelConfig::preset("Micro"), 1);
  TrainOptions o;
  o.epochs = 3;
  o.lr = 1e30;
  o.warmup_epochs = 0;
  try {
    train_toy(m, train, val, o);
    FAIL("expected divergence");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("constant maps have only a DC component") {
  const auto f = Tensor<double>::full({2, 3, 16, 16}, 2.5);
  const RadialSpectrum s = radial_log_amplitude(f, 64);
  CHECK(s.amplitude[0] == 0.0);
  for (int b = 1; b < s.bins(); ++b)
    if (!std::isnan(s.amplitude[static_cast<std::size_t>(b)])) CHECK(s.amplitude[static_cast<std::size_t>(b)] == kLogAmplitudeFloor);
}

TEST_CASE("white noise has a flat spectrum") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d(0.0, 1.0);
  Vector<double> v(100 * 64 * 64);
  for (Index i = 0; i < v.size(); ++i) v[i] = d(rng);
  const RadialSpectrum s = radial_log_amplitude(Tensor<double>::from_vector({100, 1, 64, 64}, v), 64);
  double lo = INFINITY, hi = -INFINITY;
  int filled = 0;
  for (int b = 1; b < s.bins(); ++b) {
    const double a = s.amplitude[static_cast<std::size_t>(b)];
    if (std::isnan(a)) continue;
    ++filled;
    lo = std::min(lo, a);
    hi = std::max(hi, a);
  }
  CHECK(filled >= 48);
  CHECK(nepers_to_db(hi - lo) < 3.0);
}

TEST_CASE("partition maps: gray levels, determinism and sensitivity to the image") {
  Model<float> m = build_model<float>(ModelConfig::preset("Micro"), 4);
  const Dataset d = generate_shapes(5, 8, 64);
  const auto maps = partition_maps(m, d.gather({0}), 2);
  REQUIRE_FALSE(maps.empty());
  for (const auto& map : maps) {
    CHECK(map.assignment.size() == static_cast<std::size_t>(map.height * map.width));
    const std::string pgm = to_pgm(map);
    const std::string header = "P5\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n255\n";
    REQUIRE(pgm.rfind(header, 0) == 0);
    std::set<unsigned char> levels(pgm.begin() + static_cast<long>(header.size()), pgm.end());
    CHECK(levels.size() <= static_cast<std::size_t>(map.clusters));
    std::set<unsigned char> allowed;
    for (int k = 0; k < map.clusters; ++k)
      allowed.insert(static_cast<unsigned char>(std::lround(k * 255.0 / (map.clusters - 1))));
    for (unsigned char g : levels) CHECK(allowed.count(g) == 1);
  }
  const auto again = partition_maps(m, d.gather({0}), 2);
  CHECK(again[0].assignment == maps[0].assignment);
  std::size_t differing = 0;
  for (Index i = 1; i < 8 && differing == 0; ++i) {
    const auto other = partition_maps(m, d.gather({i}), 2);
    for (std::size_t k = 0; k < maps[0].assignment.size(); ++k) differing += other[0].assignment[k] != maps[0].assignment[k];
  }
  CHECK(differing > 0);
  CHECK_THROWS(partition_maps(m, d.gather({0}), 0));
  CHECK_THROWS(partition_maps(m, d.gather({0}), 5));
}

TEST_CASE("partition maps are written atomically with stable names") {
  Model<float> m = build_model<float>(ModelConfig::preset("Micro"), 4);
  const auto maps = partition_maps(m, generate_shapes(5, 8).gather({0}), 1);
  const auto prefix = (std::filesystem::temp_directory_path() / "dualformer_unit_map_").string();
  const auto paths = write_partition_maps(maps, prefix);
  REQUIRE(paths.size() == maps.size());
  CHECK(paths[0] == prefix + "stage1_block0_head0.pgm");
  for (const auto& p : paths) {
    CHECK(std::filesystem::exists(p));
    std::filesystem::remove(p);
  }
}

TEST_CASE("quantiles interpolate linearly") {
  const Quantiles q = quantiles({5, 1, 4, 2, 3});
  CHECK(q.median == 3.0);
  CHECK(q.p10 == doctest::Approx(1.4));
  CHECK(q.p90 == doctest::Approx(4.6));
  CHECK_THROWS(quantiles({}));
}

TEST_CASE("model throughput is positive") {
  const auto t = model_throughput(ModelConfig::preset("Micro"), 4, 32, 5);
  CHECK(t.images_per_sec.median > 0.0);
  CHECK(model_throughput_csv_header() == "config,batch,resolution,median_images_per_sec,p10,p90");
}
