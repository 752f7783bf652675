#pragma once

#include "dualformer/model.hpp"
#include "dualformer/serialize.hpp"

#include <cstdint>
#include <string>

namespace dualformer {

// Layout (little-endian): "DFCK", u32 version, u32 length + canonical config
// text, u32 tensor count, then per tensor u32 name length, name bytes and a
// DFT1 tensor blob. Parameters and persistent buffers are both stored.

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Writes atomically: `path` either holds the complete checkpoint or is untouched.
template <typename S>
void save_checkpoint(Model<S>& model, const std::string& path);

/// Checkpoint bytes, exactly as save_checkpoint would write them.
template <typename S>
std::string checkpoint_bytes(Model<S>& model);

ModelConfig read_checkpoint_config(const std::string& path);

/// Loads a checkpoint. When `expected` is given its config must match the
/// stored one; mismatches raise ConfigError naming both configurations.
template <typename S>
Model<S> load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr);

}  // namespace dualformer
