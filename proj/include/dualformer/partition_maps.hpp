#pragma once

#include "dualformer/model.hpp"

#include <string>
#include <vector>

namespace dualformer {

/// Cluster index of every token of one head of one MHPA layer.
struct PartitionMap {
  std::string tag;  // layer, e.g. "stage2.block0"
  int head = 0;
  Index height = 0;
  Index width = 0;
  int clusters = 0;
  std::vector<int> assignment;  // row-major, height x width
};

/// Maps of every head of every block in `stage` (1-based) for one image
/// [1, C, H, W], inference mode.
template <typename S>
std::vector<PartitionMap> partition_maps(Model<S>& model, const Tensor<S>& image, int stage);

/// Binary 8-bit PGM; gray level = cluster index * 255 / (K - 1), rounded.
std::string to_pgm(const PartitionMap& map);

/// Writes one PGM per map as <prefix><tag>_head<h>.pgm; returns the paths.
std::vector<std::string> write_partition_maps(const std::vector<PartitionMap>& maps, const std::string& prefix);

}  // namespace dualformer
