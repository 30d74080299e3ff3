#pragma once

#include <filesystem>

#include <json.hpp>

#include "lmdir/network.hpp"

namespace lmdir {

// Single-file archive: 8-byte magic, u64 little-endian header length, a JSON
// header (format version, canonical config, tensor index, metadata) and the
// concatenated f32le tensor payloads.
struct Checkpoint {
  net::NetworkConfig config;
  net::NetworkParams params;
  // Optimizer moments and other training tensors, stored alongside params.
  ParamSet<float> extra;
  nlohmann::json metadata = nlohmann::json::object();
};

inline constexpr int kCheckpointFormatVersion = 1;

// Atomic: writes a temporary sibling and renames it over the target.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);

// Verifies payload digests and that the parameter names and shapes are exactly
// those the stored config implies.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Same, and rejects a checkpoint whose config differs from `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const net::NetworkConfig& expected);

}  // namespace lmdir
