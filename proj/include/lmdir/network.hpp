#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmdir/blocks.hpp"
#include "lmdir/image.hpp"
#include "lmdir/params.hpp"
#include "lmdir/prior_types.hpp"
#include "lmdir/prompt_encoder.hpp"

namespace lmdir::net {

// U-shaped restoration network: degradation-aware encoder, content-aware
// bottleneck, reference-based decoder.
//
// channels_per_level and heads_per_level have one entry per level (level 0 is
// full resolution). The encoder list covers levels 0..levels-2 in order; the
// bottleneck runs at the deepest level; the decoder list is in execution order,
// deepest decoder level first.
struct NetworkConfig {
  int levels = 4;
  std::vector<int> channels_per_level{48, 96, 192, 384};
  std::vector<int> blocks_per_level_encoder{4, 6, 6};
  int bottleneck_blocks = 8;
  std::vector<int> blocks_per_level_decoder{6, 6, 4};
  std::vector<int> heads_per_level{1, 2, 4, 8};
  int prompt_channels = 256;
  int query_tokens = 8;
  int prompt_heads = 8;
  int text_tokens = 77;
  int text_channels = 768;
  std::vector<int> image_encoder_channels{32, 64, 128, 256};
  double gfn_ratio = 2.66;
  bool global_residual = true;
  blocks::SoftmaxAxis lra_softmax_axis = blocks::SoftmaxAxis::Channel;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

NetworkConfig full_config();
// Desk-scale network used by tests and the smoke experiments.
NetworkConfig tiny_config();

// Throws InvalidConfig naming the first violated constraint.
void validate(const NetworkConfig& config);

nlohmann::json to_json(const NetworkConfig& config);
NetworkConfig config_from_json(const nlohmann::json& j);
// sha256 of the canonical JSON form.
std::string config_hash(const NetworkConfig& config);

prompt::PromptEncoderDims prompt_dims(const NetworkConfig& config);

// Multiple the padded input size must reach: 2^(levels-1).
std::int64_t size_multiple(const NetworkConfig& config);

using NetworkParams = ParamSet<float>;

// Deterministic in the seed. Degradation adapters start at zero output, every
// other weight is fan-in scaled uniform, biases zero.
template <typename T>
ParamSet<T> init_params(const NetworkConfig& config, std::uint64_t seed);

// image (H, W, 3), z_d (query_tokens, prompt_channels), e_c (N, text_channels),
// reference (Hr, Wr, 3). Returns Y as (1, H, W, 3), clamped to [0, 1].
template <typename T>
Var<T> forward(const Scope<T>& root, const NetworkConfig& config, const Tensor<T>& image, const Var<T>& z_d,
               const Var<T>& e_c, const Tensor<T>& reference);

// Full pipeline on raw tensors: image encoder -> prompt refiner -> forward.
// When z_d_out is given it receives the refined degradation tokens.
template <typename T>
Var<T> restore_graph(const Scope<T>& root, const NetworkConfig& config, const Tensor<T>& image,
                     const Tensor<T>& e_d, const Tensor<T>& e_c, const Tensor<T>& reference,
                     Var<T>* z_d_out = nullptr, Var<T>* i_d_out = nullptr);

// Inference entry point: uses the bundle's e_d, e_c and reference.
TensorImage restore(const TensorImage& image, const prior::PriorBundle& bundle, const NetworkParams& params,
                    const NetworkConfig& config);

// Same, with the degradation embedding supplied by the caller (guided mode).
TensorImage restore_with_degradation(const TensorImage& image, const Tensor<float>& e_d,
                                     const prior::PriorBundle& bundle, const NetworkParams& params,
                                     const NetworkConfig& config);

}  // namespace lmdir::net
