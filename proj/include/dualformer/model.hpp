#pragma once

#include "dualformer/blocks.hpp"

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dualformer {

/// Invalid model configuration or configuration text.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kStages = 4;

struct ModelConfig {
  std::string name = "custom";
  std::array<int, kStages> depths{1, 1, 1, 1};
  std::array<Index, kStages> channels{16, 32, 64, 128};
  std::array<int, kStages> heads{1, 1, 1, 1};
  std::array<int, kStages> hash_bits{3, 3, 3, 3};
  std::array<Index, kStages> rates{4, 2, 1, 1};
  double split_ratio = 0.5;
  Index ffn_ratio = 4;
  Index mbconv_ratio = 4;
  Index in_channels = 3;
  int num_classes = 1000;
  BlockMode mode = BlockMode::parallel;
  bool share_partitions = false;
  bool resample_norms = false;

  /// Named configurations T, XS, S, B and the desk-scale Micro.
  static ModelConfig preset(const std::string& name);
  static std::vector<std::string> preset_names();

  /// Throws ConfigError naming the offending stage.
  void validate() const;
  BlockSpec block_spec(int stage) const;

  /// Canonical key=value text, one field per line in a fixed order.
  std::string to_text() const;
  /// Parses key=value lines ('#' starts a comment). A `preset` key loads that
  /// preset before the remaining keys apply; unknown keys are errors.
  static ModelConfig from_text(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

/// Heads for a stage: the largest h <= max(1, channels / 32) dividing the
/// attention-branch width.
int default_heads(Index stage_channels, Index attention_channels);

template <typename S>
struct Model {
  ModelConfig config;
  Stem<S> stem;
  std::array<StageDownsample<S>, kStages - 1> downsamples;
  std::array<std::vector<DualBlock<S>>, kStages> stages;
  Linear<S> head;

  /// Every learnable parameter and persistent buffer, in a fixed order.
  void visit(const StateVisitor<S>& f);
  std::vector<Tensor<S>> parameters();
};

template <typename S>
Model<S> build_model(const ModelConfig& config, std::uint64_t seed);

/// Outputs of the four stages, [B, D_i, H/2^{i+1}, W/2^{i+1}].
template <typename S>
std::array<Tensor<S>, kStages> forward_stages(Model<S>& model, const Tensor<S>& images,
                                              const ForwardContext& ctx);

/// Class logits [B, num_classes].
template <typename S>
Tensor<S> forward(Model<S>& model, const Tensor<S>& images, const ForwardContext& ctx);

/// Number of learnable scalars.
template <typename S>
std::uint64_t count_params(Model<S>& model);

}  // namespace dualformer
