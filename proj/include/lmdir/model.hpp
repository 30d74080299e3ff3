#pragma once

#include <filesystem>
#include <string>

#include "lmdir/network.hpp"
#include "lmdir/prior.hpp"

namespace lmdir {

// A restoration network ready for inference.
struct Model {
  net::NetworkConfig config;
  net::NetworkParams params;
  // First 16 hex digits of the checkpoint's sha256, or "init-<seed>".
  std::string id;
};

Model load_model(const std::filesystem::path& checkpoint);
Model init_model(const net::NetworkConfig& config, std::uint64_t seed);

// Automatic mode: every prior comes from the bundle.
TensorImage restore_auto(const Model& model, const TensorImage& image, const prior::PriorBundle& bundle);

// Instruction mode: the degradation embedding is the encoding of the
// instruction; content embedding and reference stay those of the bundle.
TensorImage restore_guided(const Model& model, const TensorImage& image, const std::string& instruction,
                           const prior::PriorBundle& bundle, prior::PriorPipeline& pipeline);

}  // namespace lmdir
