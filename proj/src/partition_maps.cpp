#include "dualformer/partition_maps.hpp"

#include "dualformer/serialize.hpp"

#include <algorithm>
#include <cmath>

namespace dualformer {

template <typename S>
std::vector<PartitionMap> partition_maps(Model<S>& model, const Tensor<S>& image, int stage) {
  if (stage < 1 || stage > kStages)
    throw ContractError("stage " + std::to_string(stage) + " does not exist (expected 1.." + std::to_string(kStages) + ")");
  if (model.config.mode == BlockMode::conv_only) throw ContractError("conv_only models have no partitions");
  if (image.rank() != 4 || image.dim(0) != 1)
    throw ShapeError("partition_maps: expected one image [1, C, H, W], got " + to_string(image.shape()));

  PartitionTape tape;
  ForwardContext ctx;
  ctx.tape = &tape;
  {
    NoGradGuard no_grad;
    forward_stages(model, image, ctx);
  }
  const std::string prefix = "stage" + std::to_string(stage) + ".";
  std::vector<PartitionMap> maps;
  for (const PartitionRecord& r : tape.records()) {
    if (r.tag.rfind(prefix, 0) != 0) continue;
    for (int h = 0; h < r.heads; ++h) {
      const Partition& p = r.parts[h];
      maps.push_back({r.tag, h, r.height, r.width, p.num_clusters, p.assignment});
    }
  }
  return maps;
}

std::string to_pgm(const PartitionMap& map) {
  std::string out = "P5\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n255\n";
  const double step = map.clusters > 1 ? 255.0 / (map.clusters - 1) : 0.0;
  for (int k : map.assignment) out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(k * step))));
  return out;
}

std::vector<std::string> write_partition_maps(const std::vector<PartitionMap>& maps, const std::string& prefix) {
  std::vector<std::string> paths;
  for (const PartitionMap& m : maps) {
    std::string tag = m.tag;
    std::replace(tag.begin(), tag.end(), '.', '_');
    paths.push_back(prefix + tag + "_head" + std::to_string(m.head) + ".pgm");
  }
  for (std::size_t i = 0; i < maps.size(); ++i) write_file_atomically(paths[i], to_pgm(maps[i]));
  return paths;
}

template std::vector<PartitionMap> partition_maps(Model<float>&, const Tensor<float>&, int);
template std::vector<PartitionMap> partition_maps(Model<double>&, const Tensor<double>&, int);

}  // namespace dualformer
