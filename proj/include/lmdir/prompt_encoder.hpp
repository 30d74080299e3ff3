#pragma once

#include <array>

#include "lmdir/ops.hpp"
#include "lmdir/params.hpp"

// Query-based prompt encoder: learnable queries attend to the degradation text
// embedding and to a global feature of the degraded image, producing the
// refined degradation tokens consumed by every degradation-aware block.
namespace lmdir::prompt {

inline constexpr std::int64_t kMinImageSide = 16;

struct PromptEncoderDims {
  int text_channels = 768;
  int prompt_channels = 256;
  int query_tokens = 8;
  int heads = 8;
  std::array<int, 4> image_channels{32, 64, 128, 256};
};

template <typename T> void init_image_encoder(ParamInit<T> init, const PromptEncoderDims& dims);
template <typename T> void init_refiner(ParamInit<T> init, const PromptEncoderDims& dims);

// Four residual conv stages with stride-2 convs between them, global average
// pooling and a linear map. image: (B, H, W, 3) -> (B, prompt_channels).
// Reflect padding keeps constant images constant at every stage.
template <typename T> Var<T> encode_degraded_image(const Scope<T>& p, const Var<T>& image);

// e_d (N, Ctext), i_d (prompt_channels) -> Z_d (query_tokens, prompt_channels).
template <typename T>
Var<T> refine_degradation(const Scope<T>& p, const Var<T>& e_d, const Var<T>& i_d, int heads,
                          ops::AttentionTrace<T>* trace = nullptr);

}  // namespace lmdir::prompt
