#include "dualformer/flops.hpp"

namespace dualformer {

namespace {

using u64 = std::uint64_t;

u64 conv_flops(Index pixels_out, Index in_per_group, Index out, Index kernel) {
  return static_cast<u64>(pixels_out * in_per_group * out * kernel * kernel);
}

u64 mbconv_flops(Index pixels, Index channels, Index ratio) {
  const Index hidden = channels * ratio;
  return conv_flops(pixels, channels, hidden, 1) + conv_flops(pixels, 1, hidden, 3) +
         conv_flops(pixels, hidden, channels, 1);
}

}  // namespace

u64 mhpa_flops(const MhpaShape& s) {
  const Index k = s.rate, C = s.channels;
  const Index n = (s.height / k) * (s.width / k);
  const Index d = C / s.heads;
  const Index r = importance_hidden_width(d);
  const Index K = Index{1} << s.hash_bits;
  u64 total = 0;
  total += conv_flops(n, 1, C, k);                              // depthwise downsample
  total += static_cast<u64>(n * C * s.hash_bits);               // hashing projections
  total += static_cast<u64>(n * C * C);                         // token projection
  if (s.path != MhpaPath::inter_only) total += static_cast<u64>(2 * n * C);  // intra
  if (s.path != MhpaPath::intra_only)
    total += static_cast<u64>(n * C + K * s.heads * (d * r + r) + K * C);  // mean, importance, scale
  total += static_cast<u64>(n * 2 * C * C);                     // aggregation
  total += conv_flops(n, C, C * k * k, 1);                      // channel expansion
  return total;
}

u64 vanilla_attention_flops(Index tokens, Index dim, Index embed_dim) {
  return static_cast<u64>(3 * tokens * dim * embed_dim + 2 * tokens * tokens * embed_dim);
}

u64 count_flops(const ModelConfig& config, Index height, Index width) {
  config.validate();
  u64 total = 0;
  const Index mid = std::max<Index>(1, config.channels[0] / 2);
  total += conv_flops((height / 2) * (width / 2), config.in_channels, mid, 3);
  Index h = height / 4, w = width / 4;
  total += conv_flops(h * w, mid, config.channels[0], 3);
  for (int i = 0; i < kStages; ++i) {
    const Index C = config.channels[i];
    if (i > 0) {
      h /= 2;
      w /= 2;
      total += conv_flops(h * w, config.channels[i - 1], C, 3);
    }
    const BlockSpec spec = config.block_spec(i);
    const BlockMode mode = spec.mode;
    const Index pixels = h * w;
    u64 block = 0;
    if (mode == BlockMode::parallel || mode == BlockMode::series || mode == BlockMode::conv_only)
      block += mbconv_flops(pixels, spec.conv_channels(), spec.mbconv_ratio);
    if (mode != BlockMode::conv_only) {
      MhpaShape m{h, w, spec.attention_channels(), spec.heads, spec.rate, spec.hash_bits, MhpaPath::both};
      if (mode == BlockMode::intra_only) m.path = MhpaPath::intra_only;
      if (mode == BlockMode::inter_only) m.path = MhpaPath::inter_only;
      block += mhpa_flops(m);
    }
    block += conv_flops(pixels, C, C, 1);                          // fuse
    block += 2 * conv_flops(pixels, C, C * spec.ffn_ratio, 1);     // FFN
    total += block * static_cast<u64>(config.depths[i]);
  }
  total += static_cast<u64>(config.channels[kStages - 1] * config.num_classes);
  return total;
}

}  // namespace dualformer
