#pragma once

#include "dualformer/tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace dualformer {

enum class ShapeClass { circle = 0, square = 1, triangle = 2, cross = 3 };
inline constexpr int kShapeClasses = 4;

/// Labeled images [N, 3, S, S], normalized per channel.
struct Dataset {
  Tensor<float> images;
  std::vector<int> labels;
  std::array<double, 3> channel_mean{};  // statistics removed during normalization
  std::array<double, 3> channel_std{};

  Index size() const { return static_cast<Index>(labels.size()); }
  Index image_size() const { return images.dim(2); }
  /// Images [count, 3, S, S] and labels for the given sample indices.
  Tensor<float> gather(const std::vector<Index>& indices) const;
  std::vector<int> gather_labels(const std::vector<Index>& indices) const;
  Dataset slice(Index begin, Index count) const;
};

/// Renders n shapes (circle, square, triangle, cross) at random position, size
/// and colors with pixel noise, then normalizes each channel to zero mean and
/// unit variance over the set. Labels are i mod 4 in shuffled order, so each
/// class holds n/4 (+-1) images. Deterministic in (seed, n, image_size).
Dataset generate_shapes(std::uint64_t seed, Index n, Index image_size = 32);

/// Loads a folder of DFT1 tensors [3, S, S], one subdirectory per class
/// (classes ordered by directory name), and normalizes it like generate_shapes.
Dataset load_image_folder(const std::string& root);

}  // namespace dualformer
