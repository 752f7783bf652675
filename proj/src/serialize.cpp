#include "dualformer/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>

namespace dualformer {

namespace {

constexpr std::array<char, 4> kTensorMagic{'D', 'F', 'T', '1'};

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

void read_exact(std::istream& in, char* dst, std::size_t n, const char* what) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw FormatError(std::string("truncated input while reading ") + what);
}

}  // namespace

void write_u32(std::ostream& out, std::uint32_t value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof value);
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t value = 0;
  read_exact(in, reinterpret_cast<char*>(&value), sizeof value, "u32");
  return value;
}

template <typename S>
void write_tensor(std::ostream& out, const Tensor<S>& tensor) {
  out.write(kTensorMagic.data(), kTensorMagic.size());
  write_u32(out, static_cast<std::uint32_t>(tensor.rank()));
  for (Index d : tensor.shape()) write_u32(out, static_cast<std::uint32_t>(d));
  const Eigen::VectorXf payload = tensor.data().template cast<float>();
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
}

template <typename S>
Tensor<S> read_tensor(std::istream& in) {
  std::array<char, 4> magic{};
  read_exact(in, magic.data(), magic.size(), "tensor magic");
  if (magic != kTensorMagic) throw FormatError("bad tensor magic (expected DFT1)");
  const std::uint32_t rank = read_u32(in);
  if (rank == 0 || rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t d = read_u32(in);
    if (d == 0) throw FormatError("zero-sized tensor dimension");
    shape.push_back(static_cast<Index>(d));
  }
  const Index n = num_elements(shape);
  Eigen::VectorXf payload(n);
  read_exact(in, reinterpret_cast<char*>(payload.data()), static_cast<std::size_t>(n) * sizeof(float),
             "tensor payload");
  return Tensor<S>::from_vector(std::move(shape), payload.template cast<S>());
}

void write_file_atomically(const std::string& path, const std::string& contents) {
  const std::filesystem::path target(path);
  std::filesystem::path tmp = target;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw std::runtime_error("failed writing " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, target);
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);

}  // namespace dualformer
