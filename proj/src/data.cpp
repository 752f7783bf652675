#include "dualformer/data.hpp"

#include "dualformer/serialize.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

namespace dualformer {

namespace {

bool inside(ShapeClass shape, double dx, double dy, double s) {
  switch (shape) {
    case ShapeClass::circle:
      return dx * dx + dy * dy <= s * s;
    case ShapeClass::square:
      return std::abs(dx) <= 0.8 * s && std::abs(dy) <= 0.8 * s;
    case ShapeClass::triangle:  // apex up, base at dy = +s
      return dy >= -s && dy <= s && std::abs(dx) <= 0.5 * (dy + s);
    case ShapeClass::cross:
      return (std::abs(dx) <= s / 3 && std::abs(dy) <= s) || (std::abs(dy) <= s / 3 && std::abs(dx) <= s);
  }
  return false;
}

void normalize(Dataset& ds) {
  const Index N = ds.size(), P = ds.image_size() * ds.image_size();
  Vector<float>& v = ds.images.mutable_data();
  for (Index c = 0; c < 3; ++c) {
    double sum = 0.0, sq = 0.0;
    for (Index i = 0; i < N; ++i)
      for (Index p = 0; p < P; ++p) {
        const double x = v[(i * 3 + c) * P + p];
        sum += x;
        sq += x * x;
      }
    const double count = static_cast<double>(N * P);
    const double mean = sum / count;
    const double std = std::sqrt(std::max(sq / count - mean * mean, 1e-12));
    for (Index i = 0; i < N; ++i)
      for (Index p = 0; p < P; ++p) {
        float& x = v[(i * 3 + c) * P + p];
        x = static_cast<float>((x - mean) / std);
      }
    ds.channel_mean[c] = mean;
    ds.channel_std[c] = std;
  }
}

}  // namespace

Tensor<float> Dataset::gather(const std::vector<Index>& indices) const {
  const Index S = image_size(), per = 3 * S * S;
  Vector<float> out(static_cast<Index>(indices.size()) * per);
  for (std::size_t j = 0; j < indices.size(); ++j)
    out.segment(static_cast<Index>(j) * per, per) = images.data().segment(indices[j] * per, per);
  return Tensor<float>::from_vector({static_cast<Index>(indices.size()), 3, S, S}, std::move(out));
}

std::vector<int> Dataset::gather_labels(const std::vector<Index>& indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (Index i : indices) out.push_back(labels[i]);
  return out;
}

Dataset Dataset::slice(Index begin, Index count) const {
  std::vector<Index> idx(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) idx[i] = begin + i;
  Dataset d;
  d.images = gather(idx);
  d.labels = gather_labels(idx);
  d.channel_mean = channel_mean;
  d.channel_std = channel_std;
  return d;
}

Dataset generate_shapes(std::uint64_t seed, Index n, Index image_size) {
  if (n < 8) throw ContractError("dataset needs at least 8 images, got " + std::to_string(n));
  if (image_size < 16) throw ContractError("image size must be >= 16");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.05);

  Dataset ds;
  ds.labels.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(i % kShapeClasses);
  std::shuffle(ds.labels.begin(), ds.labels.end(), rng);

  const Index S = image_size, P = S * S;
  const double unit_scale = static_cast<double>(S) / 32.0;
  Vector<float> pixels(n * 3 * P);
  for (Index i = 0; i < n; ++i) {
    const auto shape = static_cast<ShapeClass>(ds.labels[i]);
    const double s = (6.0 + 5.0 * unit(rng)) * unit_scale;
    const double lo = s + 1.0, hi = static_cast<double>(S) - s - 1.0;
    const double cx = lo + (hi - lo) * unit(rng), cy = lo + (hi - lo) * unit(rng);
    std::array<double, 3> bg{}, fg{};
    for (;;) {
      double diff = 0.0;
      for (int c = 0; c < 3; ++c) {
        bg[c] = unit(rng);
        fg[c] = unit(rng);
        diff += std::abs(fg[c] - bg[c]);
      }
      if (diff >= 0.6) break;
    }
    for (Index y = 0; y < S; ++y)
      for (Index x = 0; x < S; ++x) {
        const bool on = inside(shape, static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy, s);
        for (int c = 0; c < 3; ++c)
          pixels[(i * 3 + c) * P + y * S + x] = static_cast<float>((on ? fg[c] : bg[c]) + noise(rng));
      }
  }
  ds.images = Tensor<float>::from_vector({n, 3, S, S}, std::move(pixels));
  normalize(ds);
  return ds;
}

Dataset load_image_folder(const std::string& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw ContractError(root + " is not a directory");
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) classes.push_back(e.path());
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw ContractError(root + " has no class subdirectories");

  std::vector<Tensor<float>> images;
  Dataset ds;
  for (std::size_t label = 0; label < classes.size(); ++label) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(classes[label]))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::ifstream in(f, std::ios::binary);
      Tensor<float> t = read_tensor<float>(in);
      if (t.rank() != 3 || t.dim(0) != 3 || t.dim(1) != t.dim(2))
        throw FormatError(f.string() + ": expected a [3, S, S] tensor, got " + to_string(t.shape()));
      if (!images.empty() && t.shape() != images.front().shape())
        throw FormatError(f.string() + ": image size differs from the rest of the folder");
      images.push_back(std::move(t));
      ds.labels.push_back(static_cast<int>(label));
    }
  }
  if (images.empty()) throw ContractError(root + " holds no images");
  const Index S = images.front().dim(1), per = 3 * S * S, n = static_cast<Index>(images.size());
  Vector<float> pixels(n * per);
  for (Index i = 0; i < n; ++i) pixels.segment(i * per, per) = images[i].data();
  ds.images = Tensor<float>::from_vector({n, 3, S, S}, std::move(pixels));
  normalize(ds);
  return ds;
}

}  // namespace dualformer
