#pragma once

#include "lmdir/ops.hpp"
#include "lmdir/params.hpp"

// Conditioned transformer blocks on (B, H, W, C) feature maps. Every function
// reads its weights from a Scope, so the same code serves float inference,
// float training and double-precision verification.
namespace lmdir::blocks {

template <typename T>
using Trace = ops::AttentionTrace<T>;

enum class SoftmaxAxis { Channel, Spatial };

// Hidden width of the gated feed-forward network.
int gfn_hidden(int channels, double ratio);

// Per-channel modulation produced by the degradation adapter. Gates and
// scales are already offset by one, so a zero adapter output is the identity.
template <typename T>
struct Modulation {
  Var<T> gate_attn;
  Var<T> gate_ffn;
  Var<T> scale_attn;
  Var<T> shift_attn;
  Var<T> scale_ffn;
  Var<T> shift_ffn;
};

// --- parameter layouts -------------------------------------------------------

template <typename T> void init_layer_norm(ParamInit<T> init, int channels);
template <typename T> void init_tsa(ParamInit<T> init, int channels, int heads);
template <typename T> void init_gfn(ParamInit<T> init, int channels, double ratio);
// The final projection is zero so that a fresh adapter yields the identity.
template <typename T> void init_dea(ParamInit<T> init, int prompt_channels, int channels);
template <typename T> void init_plain_block(ParamInit<T> init, int channels, int heads, double ratio);
template <typename T>
void init_dat_block(ParamInit<T> init, int channels, int heads, double ratio, int prompt_channels);
template <typename T> void init_text_projection(ParamInit<T> init, int text_channels, int channels);
template <typename T> void init_reference_attention(ParamInit<T> init, int channels);
template <typename T>
void init_cat_block(ParamInit<T> init, int channels, int heads, double ratio, int text_channels);
template <typename T> void init_reference_projection(ParamInit<T> init, int channels);
template <typename T> void init_lra(ParamInit<T> init, int channels);
template <typename T> void init_rbt_block(ParamInit<T> init, int channels, int heads, double ratio);

// --- operations --------------------------------------------------------------

// Transposed self-attention: 1x1 qkv projection, depthwise 3x3, channel
// attention with per-head temperature, 1x1 output projection.
template <typename T> Var<T> tsa(const Scope<T>& p, const Var<T>& x, Trace<T>* trace = nullptr);

// Cross-attention form of tsa: queries from x, keys and values from ref.
// gra(p, x, x) == tsa(p, x).
template <typename T>
Var<T> gra(const Scope<T>& p, const Var<T>& x, const Var<T>& ref, Trace<T>* trace = nullptr);

// Gated feed-forward: 1x1 expand to 2*hidden, depthwise 3x3, gelu(x1) * x2,
// 1x1 back to C.
template <typename T> Var<T> gfn(const Scope<T>& p, const Var<T>& x);

// z_d (N, Cp) -> mean over tokens -> silu(adapt) -> linear -> six C-vectors.
template <typename T> Modulation<T> dea(const Scope<T>& p, const Var<T>& z_d);

// Unconditioned block: x + tsa(ln(x)), then + gfn(ln(.)).
template <typename T> Var<T> plain_block(const Scope<T>& p, const Var<T>& x, Trace<T>* trace = nullptr);

template <typename T>
Var<T> dat_block_modulated(const Scope<T>& p, const Var<T>& x, const Modulation<T>& m, Trace<T>* trace = nullptr);
template <typename T>
Var<T> dat_block(const Scope<T>& p, const Var<T>& x, const Var<T>& z_d, Trace<T>* trace = nullptr);

// Two-layer perceptron (Ctext -> C -> C, gelu between).
template <typename T> Var<T> project_text(const Scope<T>& p, const Var<T>& e_c);

// Spatial positions of x query the N projected text tokens:
// softmax(Q K^T / sqrt(C)) V, single head.
template <typename T>
Var<T> reference_attention(const Scope<T>& p, const Var<T>& x, const Var<T>& e_proj, Trace<T>* trace = nullptr);

template <typename T>
Var<T> cat_block(const Scope<T>& p, const Var<T>& x, const Var<T>& e_c, Trace<T>* trace = nullptr);

// Bilinear resize of reference (Hr, Wr, 3) to (height, width), then a 3x3
// convolution (reflect padding) to C channels. Returns (1, height, width, C).
template <typename T>
Var<T> project_reference(const Scope<T>& p, const Tensor<T>& reference, std::int64_t height, std::int64_t width);

// Local reference attention with shared w1/w2 3x3 convolutions:
// fj = w2(relu(w1(x))), fk = w2(relu(w1(ref))), out = fj + softmax(wa(fj + fk)) * fk.
template <typename T>
Var<T> lra(const Scope<T>& p, const Var<T>& x, const Var<T>& ref, SoftmaxAxis axis = SoftmaxAxis::Channel,
           Trace<T>* trace = nullptr);

// Reference block on a projected reference feature map (B, H, W, C). The first
// channel half goes through lra against ref[..., :C/2], the second through gra
// against ref[..., C/2:]; the halves are fused by a pointwise linear map.
template <typename T>
Var<T> rbt_block(const Scope<T>& p, const Var<T>& x, const Var<T>& ref_features,
                 SoftmaxAxis axis = SoftmaxAxis::Channel, Trace<T>* trace = nullptr);

// Same, projecting the reference image with the phi parameters first.
template <typename T>
Var<T> rbt_block(const Scope<T>& p, const Scope<T>& phi, const Var<T>& x, const Tensor<T>& reference,
                 SoftmaxAxis axis = SoftmaxAxis::Channel, Trace<T>* trace = nullptr);

}  // namespace lmdir::blocks
