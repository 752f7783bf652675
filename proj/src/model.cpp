#include "dualformer/model.hpp"

#include <charconv>
#include <sstream>

namespace dualformer {

namespace {

template <typename T, std::size_t N>
std::string join(const std::array<T, N>& values) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) s += (i ? "," : "") + std::to_string(values[i]);
  return s;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const auto res = std::from_chars(text.data(), text.data() + text.size(), value);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  return value;
}

template <typename T>
std::array<T, kStages> parse_stages(const std::string& key, const std::string& text) {
  std::array<T, kStages> out{};
  std::stringstream ss(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == kStages) throw ConfigError("config key '" + key + "' has more than 4 values");
    out[i++] = parse_number<T>(key, trim(item));
  }
  if (i != kStages) throw ConfigError("config key '" + key + "' needs 4 comma-separated values");
  return out;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "1" || text == "true") return true;
  if (text == "0" || text == "false") return false;
  throw ConfigError("config key '" + key + "': expected 0/1, got '" + text + "'");
}

}  // namespace

int default_heads(Index stage_channels, Index attention_channels) {
  const Index cap = std::max<Index>(1, stage_channels / 32);
  for (Index h = cap; h > 1; --h)
    if (attention_channels % h == 0) return static_cast<int>(h);
  return 1;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig c;
  c.name = name;
  if (name == "T") {
    c.depths = {2, 2, 4, 2};
    c.channels = {64, 128, 256, 320};
    c.ffn_ratio = 2;
  } else if (name == "XS") {
    c.depths = {2, 2, 4, 2};
    c.channels = {64, 128, 320, 368};
  } else if (name == "S") {
    c.depths = {4, 4, 7, 3};
    c.channels = {64, 128, 320, 512};
  } else if (name == "B") {
    c.depths = {6, 12, 25, 7};
    c.channels = {64, 128, 368, 560};
  } else if (name == "Micro") {
    c.depths = {1, 1, 1, 1};
    c.channels = {16, 32, 64, 128};
    c.num_classes = 4;
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected T, XS, S, B or Micro)");
  }
  for (int i = 0; i < kStages; ++i) c.heads[i] = default_heads(c.channels[i], c.block_spec(i).attention_channels());
  return c;
}

std::vector<std::string> ModelConfig::preset_names() { return {"T", "XS", "S", "B", "Micro"}; }

BlockSpec ModelConfig::block_spec(int stage) const {
  BlockSpec s;
  s.channels = channels[stage];
  s.split_ratio = split_ratio;
  s.heads = heads[stage];
  s.rate = rates[stage];
  s.hash_bits = hash_bits[stage];
  s.ffn_ratio = ffn_ratio;
  s.mbconv_ratio = mbconv_ratio;
  s.mode = mode;
  s.share_partitions = share_partitions;
  s.resample_norms = resample_norms;
  return s;
}

void ModelConfig::validate() const {
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ConfigError("split_ratio must lie in (0, 1)");
  if (ffn_ratio < 1 || mbconv_ratio < 1) throw ConfigError("expansion ratios must be >= 1");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  for (int i = 0; i < kStages; ++i) {
    const std::string stage = "stage " + std::to_string(i + 1) + ": ";
    if (depths[i] < 1) throw ConfigError(stage + "depth must be >= 1");
    if (channels[i] < 2) throw ConfigError(stage + "channels must be >= 2");
    if (rates[i] < 1) throw ConfigError(stage + "downsample rate must be >= 1");
    if (hash_bits[i] < 1 || hash_bits[i] > 16) throw ConfigError(stage + "hash bits must lie in [1, 16]");
    const BlockSpec spec = block_spec(i);
    if (mode != BlockMode::series && (spec.conv_channels() < 1 || spec.attention_channels() < 1))
      throw ConfigError(stage + "split ratio leaves an empty branch");
    if (heads[i] < 1 || spec.attention_channels() % heads[i] != 0)
      throw ConfigError(stage + std::to_string(spec.attention_channels()) +
                        " attention channels are not divisible by " + std::to_string(heads[i]) + " heads");
  }
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "name=" << name << '\n'
     << "mode=" << to_string(mode) << '\n'
     << "depths=" << join(depths) << '\n'
     << "channels=" << join(channels) << '\n'
     << "heads=" << join(heads) << '\n'
     << "hash_bits=" << join(hash_bits) << '\n'
     << "rates=" << join(rates) << '\n'
     << "split_ratio=" << format_double(split_ratio) << '\n'
     << "ffn_ratio=" << ffn_ratio << '\n'
     << "mbconv_ratio=" << mbconv_ratio << '\n'
     << "in_channels=" << in_channels << '\n'
     << "num_classes=" << num_classes << '\n'
     << "share_partitions=" << (share_partitions ? 1 : 0) << '\n'
     << "resample_norms=" << (resample_norms ? 1 : 0) << '\n';
  return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "preset") c = preset(value);
    else if (key == "name") c.name = value;
    else if (key == "mode") {
      try {
        c.mode = parse_block_mode(value);
      } catch (const ContractError& e) {
        throw ConfigError(e.what());
      }
    }
    else if (key == "depths") c.depths = parse_stages<int>(key, value);
    else if (key == "channels") c.channels = parse_stages<Index>(key, value);
    else if (key == "heads") c.heads = parse_stages<int>(key, value);
    else if (key == "hash_bits") c.hash_bits = parse_stages<int>(key, value);
    else if (key == "rates") c.rates = parse_stages<Index>(key, value);
    else if (key == "split_ratio") c.split_ratio = parse_number<double>(key, value);
    else if (key == "ffn_ratio") c.ffn_ratio = parse_number<Index>(key, value);
    else if (key == "mbconv_ratio") c.mbconv_ratio = parse_number<Index>(key, value);
    else if (key == "in_channels") c.in_channels = parse_number<Index>(key, value);
    else if (key == "num_classes") c.num_classes = parse_number<int>(key, value);
    else if (key == "share_partitions") c.share_partitions = parse_bool(key, value);
    else if (key == "resample_norms") c.resample_norms = parse_bool(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  return c;
}

template <typename S>
void Model<S>::visit(const StateVisitor<S>& f) {
  stem.visit("stem", f);
  for (int i = 0; i < kStages; ++i) {
    if (i > 0) downsamples[i - 1].visit("down" + std::to_string(i + 1), f);
    for (std::size_t j = 0; j < stages[i].size(); ++j)
      stages[i][j].visit("stage" + std::to_string(i + 1) + ".block" + std::to_string(j), f);
  }
  head.visit("head", f);
}

template <typename S>
std::vector<Tensor<S>> Model<S>::parameters() {
  std::vector<Tensor<S>> out;
  visit([&](const std::string&, Tensor<S>& t, bool learnable) {
    if (learnable) out.push_back(t);
  });
  return out;
}

template <typename S>
Model<S> build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Initializer init(seed);
  Model<S> m;
  m.config = config;
  m.stem = Stem<S>::init(init, config.in_channels, config.channels[0]);
  for (int i = 0; i < kStages; ++i) {
    if (i > 0) m.downsamples[i - 1] = StageDownsample<S>::init(init, config.channels[i - 1], config.channels[i]);
    const BlockSpec spec = config.block_spec(i);
    for (int j = 0; j < config.depths[i]; ++j) m.stages[i].push_back(DualBlock<S>::init(init, spec));
  }
  m.head = Linear<S>::init(init, config.channels[kStages - 1], config.num_classes);
  return m;
}

template <typename S>
std::array<Tensor<S>, kStages> forward_stages(Model<S>& model, const Tensor<S>& images,
                                              const ForwardContext& ctx) {
  if (images.rank() != 4 || images.dim(1) != model.config.in_channels)
    throw ShapeError("forward: expected [B, " + std::to_string(model.config.in_channels) + ", H, W], got " +
                     to_string(images.shape()));
  if (images.dim(2) % 32 != 0 || images.dim(3) % 32 != 0)
    throw ShapeError("forward: resolution " + std::to_string(images.dim(2)) + "x" +
                     std::to_string(images.dim(3)) + " is not divisible by 32");
  std::array<Tensor<S>, kStages> outs;
  Tensor<S> x = patch_embed_forward(images, model.stem, ctx.training);
  for (int i = 0; i < kStages; ++i) {
    if (i > 0) x = patch_embed_forward(x, model.downsamples[i - 1], ctx.training);
    for (std::size_t j = 0; j < model.stages[i].size(); ++j)
      x = dual_block_forward(x, model.stages[i][j], ctx,
                             "stage" + std::to_string(i + 1) + ".block" + std::to_string(j));
    outs[i] = x;
  }
  return outs;
}

template <typename S>
Tensor<S> forward(Model<S>& model, const Tensor<S>& images, const ForwardContext& ctx) {
  const auto stages = forward_stages(model, images, ctx);
  return model.head(global_avg_pool(stages.back()));
}

template <typename S>
std::uint64_t count_params(Model<S>& model) {
  std::uint64_t total = 0;
  model.visit([&](const std::string&, Tensor<S>& t, bool learnable) {
    if (learnable) total += static_cast<std::uint64_t>(t.numel());
  });
  return total;
}

#define DUALFORMER_INSTANTIATE_MODEL(S)                                                             \
  template struct Model<S>;                                                                         \
  template Model<S> build_model(const ModelConfig&, std::uint64_t);                                 \
  template std::array<Tensor<S>, kStages> forward_stages(Model<S>&, const Tensor<S>&,               \
                                                         const ForwardContext&);                    \
  template Tensor<S> forward(Model<S>&, const Tensor<S>&, const ForwardContext&);                   \
  template std::uint64_t count_params(Model<S>&);

DUALFORMER_INSTANTIATE_MODEL(float)
DUALFORMER_INSTANTIATE_MODEL(double)

}  // namespace dualformer
