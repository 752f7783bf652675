#pragma once

#include "dualformer/gradcheck.hpp"
#include "dualformer/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace dualformer {

/// Worst finite-difference result of one differentiable operation over
/// several random points.
struct AuditCase {
  std::string name;
  GradCheckResult worst;
  int points = 0;
};

/// Gradient audit of every differentiable operation, 64-bit. Non-scalar
/// outputs are reduced with a fixed random weighting so no gradient is
/// trivially zero. Partitions are drawn at random and held fixed.
std::vector<AuditCase> audit_operations(std::uint64_t seed, int points = 10, double eps = 1e-3);

struct ModelAuditOptions {
  Index batch = 2;
  Index resolution = 64;
  Index max_elements_per_input = 4;
  double eps = 1e-3;
  bool training = true;  // batch statistics in normalization layers
};

/// Gradient audit of a whole network with every parameter (zero-initialized
/// ones re-drawn at random) and the input image as checked inputs. The
/// partitions of the first forward pass are replayed in every later one.
GradCheckResult audit_model(const ModelConfig& config, std::uint64_t seed, const ModelAuditOptions& options = {});

}  // namespace dualformer
