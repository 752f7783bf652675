#include "dualformer/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

namespace dualformer {

Quantiles quantiles(std::vector<double> samples) {
  if (samples.empty()) throw ContractError("quantiles of an empty sample");
  std::sort(samples.begin(), samples.end());
  const auto at = [&](double q) {
    const double pos = q * static_cast<double>(samples.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = static_cast<std::size_t>(std::ceil(pos));
    return samples[lo] + (samples[hi] - samples[lo]) * (pos - static_cast<double>(lo));
  };
  return {at(0.5), at(0.1), at(0.9)};
}

ModelThroughput model_throughput(const ModelConfig& config, Index batch, Index resolution, int repeats,
                                 std::uint64_t seed) {
  if (repeats < 1 || batch < 1) throw ContractError("model_throughput needs positive batch and repeats");
  Model<float> model = build_model<float>(config, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  Vector<float> pixels(batch * config.in_channels * resolution * resolution);
  for (Index i = 0; i < pixels.size(); ++i) pixels[i] = dist(rng);
  const Tensor<float> images = Tensor<float>::from_vector({batch, config.in_channels, resolution, resolution}, pixels);

  NoGradGuard no_grad;
  const ForwardContext ctx;
  using Clock = std::chrono::steady_clock;
  forward(model, images, ctx);
  std::vector<double> rates;
  for (int r = 0; r < repeats; ++r) {
    const auto start = Clock::now();
    forward(model, images, ctx);
    rates.push_back(static_cast<double>(batch) / std::chrono::duration<double>(Clock::now() - start).count());
  }
  return {config.name, batch, resolution, quantiles(std::move(rates))};
}

std::string model_throughput_csv_header() { return "config,batch,resolution,median_images_per_sec,p10,p90"; }

std::string model_throughput_csv_row(const ModelThroughput& t) {
  std::ostringstream os;
  os.precision(10);
  os << t.config << ',' << t.batch << ',' << t.resolution << ',' << t.images_per_sec.median << ','
     << t.images_per_sec.p10 << ',' << t.images_per_sec.p90;
  return os.str();
}

}  // namespace dualformer
