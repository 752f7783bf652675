#pragma once

#include "dualformer/mhpa.hpp"

#include <string>

namespace dualformer {

/// How a dual block combines its convolution and attention branches.
enum class BlockMode { parallel, series, conv_only, attn_only, intra_only, inter_only };

std::string to_string(BlockMode mode);
/// Throws ContractError for unknown names.
BlockMode parse_block_mode(const std::string& name);

/// Inverted residual: 1x1 expand -> BN -> GELU -> depthwise 3x3 -> BN -> GELU -> 1x1 project.
template <typename S>
struct MBConv {
  Conv2d<S> expand, depthwise, project;
  BatchNorm2d<S> bn1, bn2;

  static MBConv init(Initializer& init, Index channels, Index ratio, bool zero_project = false);
  /// Residual branch only, without the skip.
  Tensor<S> delta(const Tensor<S>& x, bool training);
  void visit(const std::string& prefix, const StateVisitor<S>& f);
};

/// x + MBConv branch(x).
template <typename S>
Tensor<S> mbconv_forward(const Tensor<S>& x, MBConv<S>& params, bool training);

struct BlockSpec {
  Index channels = 0;
  double split_ratio = 0.5;  // fraction of channels for the conv branch
  int heads = 1;             // heads over the attention channels
  Index rate = 1;
  int hash_bits = 3;
  Index ffn_ratio = 4;
  Index mbconv_ratio = 4;
  BlockMode mode = BlockMode::parallel;
  bool share_partitions = false;
  bool resample_norms = false;

  /// Channels seen by the conv branch (all of them in series mode).
  Index conv_channels() const;
  /// Channels seen by the attention branch (all of them in series mode).
  Index attention_channels() const;
};

/// Channel-split dual attention block followed by an FFN:
///   parallel: x1 = x + fuse([MBConv(x_c) || MHPA(LN(x_a))]),  out = x1 + FFN(LN(x1))
///   series:   x1 = MBConv(x) over all channels, x1' = x1 + fuse(MHPA(LN(x1))), out = x1' + FFN(LN(x1'))
/// The *_only modes keep the parallel layout and drop the other branch (or one MHPA path).
template <typename S>
struct DualBlock {
  BlockSpec spec;
  bool has_conv = false;
  bool has_attention = false;
  MBConv<S> conv;
  LayerNorm<S> attn_norm;
  MhpaParams<S> mhpa;
  Conv2d<S> fuse;  // 1x1, zero init
  LayerNorm<S> ffn_norm;
  Conv2d<S> ffn_in, ffn_out;  // ffn_out zero init

  static DualBlock init(Initializer& init, const BlockSpec& spec);
  void visit(const std::string& prefix, const StateVisitor<S>& f);
};

/// Runs the block in its built mode.
template <typename S>
Tensor<S> dual_block_forward(const Tensor<S>& x, DualBlock<S>& block, const ForwardContext& ctx,
                             const std::string& tag = {});
/// Runs the block in `mode`, which must fit the built parameters: series needs
/// a series-built block, and the other modes need the branches they use.
template <typename S>
Tensor<S> dual_block_forward(const Tensor<S>& x, DualBlock<S>& block, BlockMode mode,
                             const ForwardContext& ctx, const std::string& tag = {});

/// Feed-forward sub-block on NCHW: ffn_out(GELU(ffn_in(x))).
template <typename S>
Tensor<S> ffn_forward(const Tensor<S>& x, const DualBlock<S>& block);

/// Two overlapping 3x3 stride-2 convolutions: [B,3,H,W] -> [B,D,H/4,W/4].
template <typename S>
struct Stem {
  Conv2d<S> conv1, conv2;
  BatchNorm2d<S> bn1, bn2;

  static Stem init(Initializer& init, Index in_channels, Index out_channels);
  void visit(const std::string& prefix, const StateVisitor<S>& f);
};

/// One 3x3 stride-2 convolution between stages: [B,D_i,H,W] -> [B,D_{i+1},H/2,W/2].
template <typename S>
struct StageDownsample {
  Conv2d<S> conv;
  BatchNorm2d<S> bn;

  static StageDownsample init(Initializer& init, Index in_channels, Index out_channels);
  void visit(const std::string& prefix, const StateVisitor<S>& f);
};

template <typename S>
Tensor<S> patch_embed_forward(const Tensor<S>& x, Stem<S>& stem, bool training);
template <typename S>
Tensor<S> patch_embed_forward(const Tensor<S>& x, StageDownsample<S>& down, bool training);

}  // namespace dualformer
