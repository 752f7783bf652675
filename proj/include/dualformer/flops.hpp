#pragma once

#include "dualformer/model.hpp"

#include <cstdint>

namespace dualformer {

// Analytic multiply-accumulate counts; one MAC counts as one FLOP. Products
// inside convolutions, linear maps and matmuls are counted, plus the
// per-token arithmetic of hashing and partition attention. Normalization,
// activations, biases and pooling are not.

struct MhpaShape {
  Index height = 0;  // input feature map, before downsampling
  Index width = 0;
  Index channels = 0;
  int heads = 1;
  Index rate = 1;
  int hash_bits = 3;
  MhpaPath path = MhpaPath::both;
};

/// One MHPA layer on a single image.
std::uint64_t mhpa_flops(const MhpaShape& shape);

/// Vanilla attention on n tokens: three d -> d_e projections, Q K^T and A V.
std::uint64_t vanilla_attention_flops(Index tokens, Index dim, Index embed_dim);

/// Whole network for one image of size height x width.
std::uint64_t count_flops(const ModelConfig& config, Index height, Index width);

}  // namespace dualformer
