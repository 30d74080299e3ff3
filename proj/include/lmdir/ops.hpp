#pragma once

#include <vector>

#include "lmdir/autodiff.hpp"

// Differentiable primitives. Each op computes its value eagerly and, when the
// graph records, registers an analytic backward. Instantiated for float
// (training and inference) and double (verification).
namespace lmdir::ops {

enum class PadMode { Zero, Reflect };

// Attention matrices captured during a forward pass, one (rows x cols) tensor
// per (batch, head) in evaluation order.
template <typename T>
struct AttentionTrace {
  std::vector<Tensor<T>> maps;
};

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
// scale * x + shift, elementwise with scalar constants.
template <typename T> Var<T> affine(const Var<T>& x, T scale, T shift);

// Broadcast a length-C vector over every leading position of x (..., C).
template <typename T> Var<T> add_channels(const Var<T>& x, const Var<T>& bias);
template <typename T> Var<T> mul_channels(const Var<T>& x, const Var<T>& scale);

// x (..., K) @ w (K, N) [+ b (N)].
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w);
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

// x (B, H, W, Cin), w (k, k, Cin, Cout), b (Cout); padding k / 2.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride = 1, PadMode pad = PadMode::Zero);

// x (B, H, W, C), w (3, 3, C), b (C); zero padding.
template <typename T> Var<T> depthwise_conv3x3(const Var<T>& x, const Var<T>& w, const Var<T>& b);

// Normalizes over the last axis.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

template <typename T> Var<T> gelu(const Var<T>& x);
template <typename T> Var<T> relu(const Var<T>& x);
template <typename T> Var<T> silu(const Var<T>& x);
template <typename T> Var<T> clamp(const Var<T>& x, T lo, T hi);

template <typename T> Var<T> softmax_last(const Var<T>& x, AttentionTrace<T>* trace = nullptr);
// Softmax over all spatial positions of x (B, H, W, C), independently per (b, c).
template <typename T> Var<T> softmax_spatial(const Var<T>& x, AttentionTrace<T>* trace = nullptr);

template <typename T> Var<T> slice_last(const Var<T>& x, std::int64_t begin, std::int64_t end);
template <typename T> Var<T> concat_last(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);

// (B, H, W, C*r*r) -> (B, H*r, W*r, C); channel c*r*r + i*r + j lands at
// spatial offset (i, j).
template <typename T> Var<T> pixel_shuffle(const Var<T>& x, int r);

// (..., R, C) -> (..., C), mean over R using pairwise summation.
template <typename T> Var<T> mean_tokens(const Var<T>& x);

// Top-left crop of (B, H, W, C) to (B, h, w, C).
template <typename T> Var<T> crop_spatial(const Var<T>& x, std::int64_t h, std::int64_t w);

// Transposed (channel) attention. q, k, v: (B, ..., C) with N spatial
// positions. Per head, columns of q and k are L2-normalised over positions and
// A = softmax(temperature[h] * q^T k) is (C/heads x C/heads); out = v A^T.
template <typename T>
Var<T> channel_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& temperature,
                         AttentionTrace<T>* trace = nullptr);

// Token attention. q (Nq, C), k (Nk, C), v (Nk, C); per head
// softmax(scale * q k^T) v with d = C / heads.
template <typename T>
Var<T> token_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, T scale,
                       AttentionTrace<T>* trace = nullptr);

// Mean absolute error against a constant target; subgradient 0 at zero residual.
template <typename T> Var<T> l1_loss(const Var<T>& y, const Tensor<T>& target);

// sum(x * weights); used to project outputs to a scalar for gradient checks.
template <typename T> Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights);

}  // namespace lmdir::ops
