#include "dualformer/fourier.hpp"

#include <cmath>
#include <complex>
#include <limits>
#include <sstream>

namespace dualformer {

namespace {

Eigen::MatrixXcd dft_matrix(Index n) {
  Eigen::MatrixXcd m(n, n);
  for (Index u = 0; u < n; ++u)
    for (Index x = 0; x < n; ++x)
      m(u, x) = std::polar(1.0, -2.0 * M_PI * static_cast<double>((u * x) % n) / static_cast<double>(n));
  return m;
}

double frequency(Index u, Index n) {
  return static_cast<double>(std::min(u, n - u)) / static_cast<double>(n);
}

}  // namespace

double RadialSpectrum::top_quartile_mean() const {
  double sum = 0.0;
  int count = 0;
  for (int b = (3 * bins()) / 4; b < bins(); ++b)
    if (!std::isnan(amplitude[b])) {
      sum += amplitude[b];
      ++count;
    }
  return count ? sum / count : std::numeric_limits<double>::quiet_NaN();
}

std::string RadialSpectrum::csv() const {
  std::ostringstream os;
  os.precision(9);
  os << "bin,radius,relative_log_amplitude\n";
  for (int b = 0; b < bins(); ++b) {
    os << b << ',' << radius[b] << ',';
    if (std::isnan(amplitude[b]))
      os << "nan";
    else
      os << amplitude[b];
    os << '\n';
  }
  return os.str();
}

template <typename S>
RadialSpectrum radial_log_amplitude(const Tensor<S>& features, int bins) {
  if (features.rank() != 4) throw ShapeError("radial_log_amplitude: expected [B, C, H, W], got " + to_string(features.shape()));
  if (bins < 2) throw ContractError("radial_log_amplitude needs at least 2 bins");
  const Index B = features.dim(0), C = features.dim(1), H = features.dim(2), W = features.dim(3);
  const double r_max = std::sqrt(0.5);

  RadialSpectrum out;
  out.radius.assign(static_cast<std::size_t>(bins), 0.0);
  out.frequencies.assign(static_cast<std::size_t>(bins), 0);
  for (int b = 1; b < bins; ++b) out.radius[b] = r_max * (b - 0.5) / (bins - 1);

  // Bin of every frequency; bin 0 only for (0, 0).
  std::vector<int> bin_of(static_cast<std::size_t>(H * W), 0);
  for (Index u = 0; u < H; ++u)
    for (Index v = 0; v < W; ++v) {
      int b = 0;
      if (u != 0 || v != 0) {
        const double r = std::hypot(frequency(u, H), frequency(v, W));
        b = 1 + std::min(bins - 2, static_cast<int>(std::floor(r / r_max * (bins - 1))));
      }
      bin_of[u * W + v] = b;
      ++out.frequencies[b];
    }

  const Eigen::MatrixXcd fh = dft_matrix(H), fw = dft_matrix(W);
  std::vector<double> total(static_cast<std::size_t>(bins), 0.0);
  Index maps = 0;
  std::vector<double> per_map(static_cast<std::size_t>(bins));
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c) {
      Eigen::MatrixXd x(H, W);
      for (Index y = 0; y < H; ++y)
        for (Index z = 0; z < W; ++z) x(y, z) = static_cast<double>(features[((b * C + c) * H + y) * W + z]);
      const Eigen::MatrixXcd f = fh * x.cast<std::complex<double>>() * fw.transpose();
      const double dc = std::abs(f(0, 0));
      if (!(dc > 0.0)) continue;
      std::fill(per_map.begin(), per_map.end(), 0.0);
      for (Index u = 0; u < H; ++u)
        for (Index v = 0; v < W; ++v) {
          const double ratio = std::abs(f(u, v)) / dc;
          per_map[bin_of[u * W + v]] += ratio < 1e-12 ? kLogAmplitudeFloor : std::log(ratio);
        }
      for (int k = 0; k < bins; ++k)
        if (out.frequencies[k] > 0) total[k] += per_map[k] / static_cast<double>(out.frequencies[k]);
      ++maps;
    }

  out.amplitude.assign(static_cast<std::size_t>(bins), std::numeric_limits<double>::quiet_NaN());
  if (maps == 0) return out;
  for (int k = 0; k < bins; ++k)
    if (out.frequencies[k] > 0) out.amplitude[k] = total[k] / static_cast<double>(maps);
  return out;
}

template RadialSpectrum radial_log_amplitude(const Tensor<float>&, int);
template RadialSpectrum radial_log_amplitude(const Tensor<double>&, int);

}  // namespace dualformer
