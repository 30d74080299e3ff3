#pragma once

#include <array>
#include <string>
#include <vector>

#include "lmdir/params.hpp"

// Straight-loop float64 reference implementations of the blocks. They index
// every element explicitly and share no code with the library, so agreement
// checks the vectorised kernels, the channel-last layout and the parameter
// naming at once. Feature maps are single images (H, W, C).
namespace lmdir::oracle {

using Map = Tensor<double>;
using Params = ParamSet<double>;

double gelu(double x);
double silu(double x);

Map pointwise(const Map& x, const Tensor<double>& w, const Tensor<double>& b);
Map conv3x3(const Map& x, const Tensor<double>& w, const Tensor<double>& b, bool reflect);
Map depthwise3x3(const Map& x, const Tensor<double>& w, const Tensor<double>& b);
Map layer_norm(const Map& x, const Tensor<double>& g, const Tensor<double>& b);
Map channel_attention(const Map& q, const Map& k, const Map& v, const Tensor<double>& temperature);

Map tsa(const Params& p, const std::string& prefix, const Map& x);
Map gra(const Params& p, const std::string& prefix, const Map& x, const Map& ref);
Map gfn(const Params& p, const std::string& prefix, const Map& x);

// (gate_attn, gate_ffn, scale_attn, shift_attn, scale_ffn, shift_ffn).
std::array<std::vector<double>, 6> dea(const Params& p, const std::string& prefix, const Tensor<double>& z_d);

// x (H, W, C) queries the already projected tokens (N, C).
Map reference_attention(const Params& p, const std::string& prefix, const Map& x, const Tensor<double>& tokens);

Map lra(const Params& p, const std::string& prefix, const Map& x, const Map& ref, bool spatial_softmax);

}  // namespace lmdir::oracle
