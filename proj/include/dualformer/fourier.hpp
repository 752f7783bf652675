#pragma once

#include "dualformer/tensor.hpp"

#include <string>
#include <vector>

namespace dualformer {

/// Radially binned spectrum: bin 0 holds the zero frequency alone, bins
/// 1..bins-1 split radii (0, r_max] evenly, r_max = |(1/2, 1/2)| in cycles per
/// pixel. Values are natural-log amplitudes relative to the zero frequency,
/// averaged over frequencies in a bin, then over channels and images. Bins no
/// frequency falls into are NaN.
struct RadialSpectrum {
  std::vector<double> radius;     // bin centre, cycles per pixel
  std::vector<double> amplitude;  // relative log amplitude
  std::vector<Index> frequencies; // frequencies per bin (per map)

  int bins() const { return static_cast<int>(amplitude.size()); }
  /// Mean over non-empty bins with index >= 3/4 of the bin count.
  double top_quartile_mean() const;
  /// bin,radius,relative_log_amplitude
  std::string csv() const;
};

/// Log of a zero amplitude is reported as this floor.
inline constexpr double kLogAmplitudeFloor = -50.0;

/// Spectrum of a feature map batch [B, C, H, W]. Maps whose zero-frequency
/// amplitude vanishes are skipped.
template <typename S>
RadialSpectrum radial_log_amplitude(const Tensor<S>& features, int bins = 64);

/// Converts a natural-log amplitude difference to decibels.
inline double nepers_to_db(double v) { return v * 8.685889638065035; }

}  // namespace dualformer
