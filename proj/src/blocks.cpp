#include "dualformer/blocks.hpp"

#include <cmath>

namespace dualformer {

namespace {

constexpr std::pair<BlockMode, const char*> kModeNames[] = {
    {BlockMode::parallel, "parallel"},   {BlockMode::series, "series"},
    {BlockMode::conv_only, "conv_only"}, {BlockMode::attn_only, "attn_only"},
    {BlockMode::intra_only, "intra_only"}, {BlockMode::inter_only, "inter_only"},
};

bool uses_conv(BlockMode mode) { return mode == BlockMode::parallel || mode == BlockMode::series || mode == BlockMode::conv_only; }
bool uses_attention(BlockMode mode) { return mode != BlockMode::conv_only; }

MhpaOptions mhpa_options(const BlockSpec& spec, BlockMode mode) {
  MhpaOptions o;
  o.share_partitions = spec.share_partitions;
  o.resample_norms = spec.resample_norms;
  if (mode == BlockMode::intra_only) o.path = MhpaPath::intra_only;
  if (mode == BlockMode::inter_only) o.path = MhpaPath::inter_only;
  return o;
}

template <typename S>
void require_divisible(const Tensor<S>& x, Index factor, const char* what) {
  if (x.rank() != 4) throw ShapeError(std::string(what) + ": expected NCHW input, got " + to_string(x.shape()));
  if (x.dim(2) % factor != 0 || x.dim(3) % factor != 0)
    throw ShapeError(std::string(what) + ": spatial size of " + to_string(x.shape()) +
                     " not divisible by " + std::to_string(factor));
}

}  // namespace

std::string to_string(BlockMode mode) {
  for (const auto& [m, name] : kModeNames)
    if (m == mode) return name;
  return "unknown";
}

BlockMode parse_block_mode(const std::string& name) {
  for (const auto& [m, n] : kModeNames)
    if (name == n) return m;
  throw ContractError("unknown block mode '" + name +
                      "' (expected parallel, series, conv_only, attn_only, intra_only or inter_only)");
}

template <typename S>
MBConv<S> MBConv<S>::init(Initializer& init, Index channels, Index ratio, bool zero_project) {
  const Index hidden = channels * ratio;
  MBConv m;
  m.expand = Conv2d<S>::init(init, channels, hidden, 1, {}, false);
  m.bn1 = BatchNorm2d<S>::init(hidden);
  m.depthwise = Conv2d<S>::init(init, hidden, hidden, 3, {1, 1, hidden}, false);
  m.bn2 = BatchNorm2d<S>::init(hidden);
  m.project = Conv2d<S>::init(init, hidden, channels, 1, {}, false, zero_project);
  return m;
}

template <typename S>
Tensor<S> MBConv<S>::delta(const Tensor<S>& x, bool training) {
  const Tensor<S> h1 = gelu(bn1(expand(x), training));
  const Tensor<S> h2 = gelu(bn2(depthwise(h1), training));
  return project(h2);
}

template <typename S>
void MBConv<S>::visit(const std::string& prefix, const StateVisitor<S>& f) {
  expand.visit(prefix + ".expand", f);
  bn1.visit(prefix + ".bn1", f);
  depthwise.visit(prefix + ".depthwise", f);
  bn2.visit(prefix + ".bn2", f);
  project.visit(prefix + ".project", f);
}

template <typename S>
Tensor<S> mbconv_forward(const Tensor<S>& x, MBConv<S>& params, bool training) {
  return add(x, params.delta(x, training));
}

Index BlockSpec::conv_channels() const {
  if (mode == BlockMode::series) return channels;
  return static_cast<Index>(std::lround(static_cast<double>(channels) * split_ratio));
}

Index BlockSpec::attention_channels() const {
  if (mode == BlockMode::series) return channels;
  return channels - conv_channels();
}

template <typename S>
DualBlock<S> DualBlock<S>::init(Initializer& init, const BlockSpec& spec) {
  const Index C = spec.channels;
  const Index c = spec.conv_channels(), a = spec.attention_channels();
  if (spec.mode != BlockMode::series && (c <= 0 || a <= 0))
    throw ContractError("split ratio " + std::to_string(spec.split_ratio) + " leaves an empty branch for " +
                        std::to_string(C) + " channels");
  DualBlock b;
  b.spec = spec;
  b.has_conv = uses_conv(spec.mode);
  b.has_attention = uses_attention(spec.mode);
  if (b.has_conv) b.conv = MBConv<S>::init(init, c, spec.mbconv_ratio);
  if (b.has_attention) {
    b.attn_norm = LayerNorm<S>::init(a);
    b.mhpa = MhpaParams<S>::init(init, a, spec.heads, spec.rate, spec.hash_bits);
  }
  b.fuse = Conv2d<S>::init(init, C, C, 1, {}, true, true);
  b.ffn_norm = LayerNorm<S>::init(C);
  b.ffn_in = Conv2d<S>::init(init, C, C * spec.ffn_ratio, 1, {}, true);
  b.ffn_out = Conv2d<S>::init(init, C * spec.ffn_ratio, C, 1, {}, true, true);
  return b;
}

template <typename S>
void DualBlock<S>::visit(const std::string& prefix, const StateVisitor<S>& f) {
  if (has_conv) conv.visit(prefix + ".conv", f);
  if (has_attention) {
    attn_norm.visit(prefix + ".attn_norm", f);
    mhpa.visit(prefix + ".mhpa", f);
  }
  fuse.visit(prefix + ".fuse", f);
  ffn_norm.visit(prefix + ".ffn_norm", f);
  ffn_in.visit(prefix + ".ffn_in", f);
  ffn_out.visit(prefix + ".ffn_out", f);
}

template <typename S>
Tensor<S> ffn_forward(const Tensor<S>& x, const DualBlock<S>& block) {
  return block.ffn_out(gelu(block.ffn_in(x)));
}

template <typename S>
Tensor<S> dual_block_forward(const Tensor<S>& x, DualBlock<S>& block, BlockMode mode,
                             const ForwardContext& ctx, const std::string& tag) {
  const BlockSpec& spec = block.spec;
  if (x.rank() != 4 || x.dim(1) != spec.channels)
    throw ShapeError("dual block: input " + to_string(x.shape()) + " does not have " +
                     std::to_string(spec.channels) + " channels");
  if ((mode == BlockMode::series) != (spec.mode == BlockMode::series))
    throw ContractError("dual block built for " + to_string(spec.mode) + " cannot run in " + to_string(mode));
  if ((uses_conv(mode) && !block.has_conv) || (uses_attention(mode) && !block.has_attention))
    throw ContractError("dual block built for " + to_string(spec.mode) + " lacks the branch " +
                        to_string(mode) + " needs");
  const MhpaOptions options = mhpa_options(spec, mode);

  Tensor<S> x1;
  if (mode == BlockMode::series) {
    const Tensor<S> local = mbconv_forward(x, block.conv, ctx.training);
    const Tensor<S> global = mhpa_delta(block.attn_norm(local), block.mhpa, options, ctx, tag);
    x1 = add(local, block.fuse(global));
  } else {
    const Index B = x.dim(0), H = x.dim(2), W = x.dim(3);
    const Index c = spec.conv_channels(), a = spec.attention_channels();
    const Tensor<S> local = uses_conv(mode) ? block.conv.delta(slice(x, 1, 0, c), ctx.training)
                                            : Tensor<S>::zeros({B, c, H, W});
    const Tensor<S> global = uses_attention(mode)
                                 ? mhpa_delta(block.attn_norm(slice(x, 1, c, a)), block.mhpa, options, ctx, tag)
                                 : Tensor<S>::zeros({B, a, H, W});
    x1 = add(x, block.fuse(concat<S>({local, global}, 1)));
  }
  return add(x1, ffn_forward(block.ffn_norm(x1), block));
}

template <typename S>
Tensor<S> dual_block_forward(const Tensor<S>& x, DualBlock<S>& block, const ForwardContext& ctx,
                             const std::string& tag) {
  return dual_block_forward(x, block, block.spec.mode, ctx, tag);
}

template <typename S>
Stem<S> Stem<S>::init(Initializer& init, Index in_channels, Index out_channels) {
  const Index mid = std::max<Index>(1, out_channels / 2);
  Stem s;
  s.conv1 = Conv2d<S>::init(init, in_channels, mid, 3, {2, 1, 1}, false);
  s.bn1 = BatchNorm2d<S>::init(mid);
  s.conv2 = Conv2d<S>::init(init, mid, out_channels, 3, {2, 1, 1}, false);
  s.bn2 = BatchNorm2d<S>::init(out_channels);
  return s;
}

template <typename S>
void Stem<S>::visit(const std::string& prefix, const StateVisitor<S>& f) {
  conv1.visit(prefix + ".conv1", f);
  bn1.visit(prefix + ".bn1", f);
  conv2.visit(prefix + ".conv2", f);
  bn2.visit(prefix + ".bn2", f);
}

template <typename S>
StageDownsample<S> StageDownsample<S>::init(Initializer& init, Index in_channels, Index out_channels) {
  return {Conv2d<S>::init(init, in_channels, out_channels, 3, {2, 1, 1}, false),
          BatchNorm2d<S>::init(out_channels)};
}

template <typename S>
void StageDownsample<S>::visit(const std::string& prefix, const StateVisitor<S>& f) {
  conv.visit(prefix + ".conv", f);
  bn.visit(prefix + ".bn", f);
}

template <typename S>
Tensor<S> patch_embed_forward(const Tensor<S>& x, Stem<S>& stem, bool training) {
  require_divisible(x, 4, "stem");
  const Tensor<S> h = gelu(stem.bn1(stem.conv1(x), training));
  return stem.bn2(stem.conv2(h), training);
}

template <typename S>
Tensor<S> patch_embed_forward(const Tensor<S>& x, StageDownsample<S>& down, bool training) {
  require_divisible(x, 2, "stage downsample");
  return down.bn(down.conv(x), training);
}

#define DUALFORMER_INSTANTIATE_BLOCKS(S)                                                              \
  template struct MBConv<S>;                                                                          \
  template struct DualBlock<S>;                                                                       \
  template struct Stem<S>;                                                                            \
  template struct StageDownsample<S>;                                                                 \
  template Tensor<S> mbconv_forward(const Tensor<S>&, MBConv<S>&, bool);                              \
  template Tensor<S> ffn_forward(const Tensor<S>&, const DualBlock<S>&);                              \
  template Tensor<S> dual_block_forward(const Tensor<S>&, DualBlock<S>&, BlockMode,                   \
                                        const ForwardContext&, const std::string&);                   \
  template Tensor<S> dual_block_forward(const Tensor<S>&, DualBlock<S>&, const ForwardContext&,       \
                                        const std::string&);                                          \
  template Tensor<S> patch_embed_forward(const Tensor<S>&, Stem<S>&, bool);                           \
  template Tensor<S> patch_embed_forward(const Tensor<S>&, StageDownsample<S>&, bool);

DUALFORMER_INSTANTIATE_BLOCKS(float)
DUALFORMER_INSTANTIATE_BLOCKS(double)

}  // namespace dualformer
