#pragma once

#include "dualformer/tensor.hpp"

#include <iosfwd>
#include <stdexcept>
#include <string>

namespace dualformer {

/// Malformed or truncated binary input.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor blob layout (little-endian): "DFT1", u32 rank, u32 dims[rank],
// f32 payload. 64-bit tensors are narrowed to f32 on write.

template <typename S>
void write_tensor(std::ostream& out, const Tensor<S>& tensor);
template <typename S>
Tensor<S> read_tensor(std::istream& in);

void write_u32(std::ostream& out, std::uint32_t value);
std::uint32_t read_u32(std::istream& in);

/// Writes `contents` through a sibling temporary file renamed into place, so a
/// failed write never leaves a partial file at `path`.
void write_file_atomically(const std::string& path, const std::string& contents);

}  // namespace dualformer
