#pragma once

#include "dualformer/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace dualformer {

struct Quantiles {
  double median = 0.0;
  double p10 = 0.0;
  double p90 = 0.0;
};

/// Linear-interpolated 10th, 50th and 90th percentiles.
Quantiles quantiles(std::vector<double> samples);

struct ModelThroughput {
  std::string config;
  Index batch = 0;
  Index resolution = 0;
  Quantiles images_per_sec;
};

/// Inference forward throughput of a freshly built model on random images,
/// after one warmup pass.
ModelThroughput model_throughput(const ModelConfig& config, Index batch, Index resolution, int repeats,
                                 std::uint64_t seed = 0);

std::string model_throughput_csv_header();
std::string model_throughput_csv_row(const ModelThroughput& t);

}  // namespace dualformer
