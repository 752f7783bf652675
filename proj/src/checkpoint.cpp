#include "dualformer/checkpoint.hpp"

#include <array>
#include <fstream>
#include <map>
#include <sstream>

namespace dualformer {

namespace {

constexpr std::array<char, 4> kMagic{'D', 'F', 'C', 'K'};

std::string read_string(std::istream& in, std::uint32_t limit, const char* what) {
  const std::uint32_t n = read_u32(in);
  if (n > limit) throw FormatError(std::string(what) + " length " + std::to_string(n) + " is implausible");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (static_cast<std::uint32_t>(in.gcount()) != n) throw FormatError(std::string("truncated ") + what);
  return s;
}

std::ifstream open_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  return in;
}

ModelConfig read_header(std::istream& in, const std::string& path) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != 4) throw FormatError("truncated checkpoint header in " + path);
  if (magic != kMagic) throw FormatError(path + " is not a checkpoint (bad magic)");
  const std::uint32_t version = read_u32(in);
  if (version != kCheckpointVersion)
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  return ModelConfig::from_text(read_string(in, 1 << 16, "config text"));
}

}  // namespace

template <typename S>
std::string checkpoint_bytes(Model<S>& model) {
  std::ostringstream out(std::ios::binary);
  out.write(kMagic.data(), kMagic.size());
  write_u32(out, kCheckpointVersion);
  const std::string config = model.config.to_text();
  write_u32(out, static_cast<std::uint32_t>(config.size()));
  out.write(config.data(), static_cast<std::streamsize>(config.size()));
  std::vector<std::pair<std::string, Tensor<S>>> tensors;
  model.visit([&](const std::string& name, Tensor<S>& t, bool) { tensors.emplace_back(name, t); });
  write_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(out, t);
  }
  return out.str();
}

template <typename S>
void save_checkpoint(Model<S>& model, const std::string& path) {
  write_file_atomically(path, checkpoint_bytes(model));
}

ModelConfig read_checkpoint_config(const std::string& path) {
  std::ifstream in = open_checkpoint(path);
  return read_header(in, path);
}

template <typename S>
Model<S> load_checkpoint(const std::string& path, const ModelConfig* expected) {
  std::ifstream in = open_checkpoint(path);
  const ModelConfig config = read_header(in, path);
  if (expected && !(*expected == config))
    throw ConfigError("checkpoint " + path + " holds configuration '" + config.name +
                      "' but '" + expected->name + "' was requested");

  std::map<std::string, Tensor<S>> stored;
  const std::uint32_t count = read_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = read_string(in, 1 << 12, "tensor name");
    stored.emplace(std::move(name), read_tensor<S>(in));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path + ": trailing bytes after last tensor");

  Model<S> model = build_model<S>(config, 0);
  std::size_t matched = 0;
  model.visit([&](const std::string& name, Tensor<S>& t, bool) {
    const auto it = stored.find(name);
    if (it == stored.end()) throw FormatError(path + ": missing tensor " + name);
    if (it->second.shape() != t.shape())
      throw FormatError(path + ": tensor " + name + " has shape " + to_string(it->second.shape()) +
                        ", expected " + to_string(t.shape()));
    t.mutable_data() = it->second.data();
    ++matched;
  });
  if (matched != stored.size()) throw FormatError(path + ": checkpoint holds unknown tensors");
  return model;
}

template std::string checkpoint_bytes(Model<float>&);
template std::string checkpoint_bytes(Model<double>&);
template void save_checkpoint(Model<float>&, const std::string&);
template void save_checkpoint(Model<double>&, const std::string&);
template Model<float> load_checkpoint(const std::string&, const ModelConfig*);
template Model<double> load_checkpoint(const std::string&, const ModelConfig*);

}  // namespace dualformer
