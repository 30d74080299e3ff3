#include "lmdir/blocks.hpp"

#include <cmath>

#include "lmdir/image.hpp"

namespace lmdir::blocks {

using namespace lmdir::ops;

int gfn_hidden(int channels, double ratio) { return static_cast<int>(static_cast<double>(channels) * ratio); }

template <typename T>
void init_layer_norm(ParamInit<T> init, int channels) {
  init.constant("g", Shape{channels}, T(1));
  init.zeros("b", Shape{channels});
}

template <typename T>
void init_tsa(ParamInit<T> init, int channels, int heads) {
  if (heads < 1 || channels % heads != 0) {
    throw Error(ErrorCode::InvalidConfig, std::to_string(channels) + " channels cannot split into " +
                                              std::to_string(heads) + " heads");
  }
  init.uniform("qkv.w", Shape{channels, 3 * channels}, channels);
  init.zeros("qkv.b", Shape{3 * channels});
  init.uniform("dw.w", Shape{3, 3, 3 * channels}, 9);
  init.zeros("dw.b", Shape{3 * channels});
  init.constant("temperature", Shape{heads}, T(1));
  init.uniform("proj.w", Shape{channels, channels}, channels);
  init.zeros("proj.b", Shape{channels});
}

template <typename T>
void init_gfn(ParamInit<T> init, int channels, double ratio) {
  const int hidden = gfn_hidden(channels, ratio);
  init.uniform("in.w", Shape{channels, 2 * hidden}, channels);
  init.zeros("in.b", Shape{2 * hidden});
  init.uniform("dw.w", Shape{3, 3, 2 * hidden}, 9);
  init.zeros("dw.b", Shape{2 * hidden});
  init.uniform("out.w", Shape{hidden, channels}, hidden);
  init.zeros("out.b", Shape{channels});
}

template <typename T>
void init_dea(ParamInit<T> init, int prompt_channels, int channels) {
  init.uniform("adapt.w", Shape{prompt_channels, channels}, prompt_channels);
  init.zeros("adapt.b", Shape{channels});
  init.zeros("linear.w", Shape{channels, 6 * channels});
  init.zeros("linear.b", Shape{6 * channels});
}

template <typename T>
void init_plain_block(ParamInit<T> init, int channels, int heads, double ratio) {
  init_layer_norm(init.sub("norm1"), channels);
  init_tsa(init.sub("attn"), channels, heads);
  init_layer_norm(init.sub("norm2"), channels);
  init_gfn(init.sub("ffn"), channels, ratio);
}

template <typename T>
void init_dat_block(ParamInit<T> init, int channels, int heads, double ratio, int prompt_channels) {
  init_plain_block(init, channels, heads, ratio);
  init_dea(init.sub("dea"), prompt_channels, channels);
}

template <typename T>
void init_text_projection(ParamInit<T> init, int text_channels, int channels) {
  init.uniform("fc1.w", Shape{text_channels, channels}, text_channels);
  init.zeros("fc1.b", Shape{channels});
  init.uniform("fc2.w", Shape{channels, channels}, channels);
  init.zeros("fc2.b", Shape{channels});
}

template <typename T>
void init_reference_attention(ParamInit<T> init, int channels) {
  for (const char* name : {"q", "k", "v"}) {
    auto sub = init.sub(name);
    sub.uniform("w", Shape{channels, channels}, channels);
    sub.zeros("b", Shape{channels});
  }
}

template <typename T>
void init_cat_block(ParamInit<T> init, int channels, int heads, double ratio, int text_channels) {
  init_plain_block(init, channels, heads, ratio);
  init_text_projection(init.sub("text"), text_channels, channels);
  init_reference_attention(init.sub("ra"), channels);
}

template <typename T>
void init_reference_projection(ParamInit<T> init, int channels) {
  init.uniform("w", Shape{3, 3, 3, channels}, 27);
  init.zeros("b", Shape{channels});
}

template <typename T>
void init_lra(ParamInit<T> init, int channels) {
  for (const char* name : {"w1", "w2", "wa"}) {
    auto sub = init.sub(name);
    sub.uniform("w", Shape{3, 3, channels, channels}, 9 * channels);
    sub.zeros("b", Shape{channels});
  }
}

template <typename T>
void init_rbt_block(ParamInit<T> init, int channels, int heads, double ratio) {
  if (channels % 2 != 0) {
    throw Error(ErrorCode::OddChannelCount, "reference block needs an even channel count, got " +
                                                std::to_string(channels));
  }
  init_plain_block(init, channels, heads, ratio);
  init_lra(init.sub("lra"), channels / 2);
  init_tsa(init.sub("gra"), channels / 2, heads);
  init.uniform("fuse.w", Shape{channels, channels}, channels);
  init.zeros("fuse.b", Shape{channels});
}

namespace {

template <typename T>
Var<T> norm(const Scope<T>& p, const Var<T>& x) {
  return layer_norm(x, p["g"], p["b"]);
}

template <typename T>
Var<T> qkv(const Scope<T>& p, const Var<T>& x) {
  return depthwise_conv3x3(linear(x, p["qkv.w"], p["qkv.b"]), p["dw.w"], p["dw.b"]);
}

template <typename T>
Var<T> attention_core(const Scope<T>& p, const Var<T>& xq, const Var<T>& xkv, Trace<T>* trace) {
  const std::int64_t c = xq.dim(-1);
  if (xkv.shape() != xq.shape()) {
    throw Error(ErrorCode::ShapeMismatch, "attention: query features " + shape_string(xq.shape()) +
                                              " vs key/value features " + shape_string(xkv.shape()));
  }
  const Var<T> from_q = qkv(p, xq);
  const Var<T> from_kv = xq.node() == xkv.node() ? from_q : qkv(p, xkv);
  Var<T> out = channel_attention(slice_last(from_q, 0, c), slice_last(from_kv, c, 2 * c),
                                 slice_last(from_kv, 2 * c, 3 * c), p["temperature"], trace);
  return linear(out, p["proj.w"], p["proj.b"]);
}

template <typename T>
void require_feature_map(const Var<T>& x, const char* what) {
  require_rank(x.shape(), 4, what);
}

}  // namespace

template <typename T>
Var<T> tsa(const Scope<T>& p, const Var<T>& x, Trace<T>* trace) {
  require_feature_map(x, "tsa input");
  return attention_core(p, x, x, trace);
}

template <typename T>
Var<T> gra(const Scope<T>& p, const Var<T>& x, const Var<T>& ref, Trace<T>* trace) {
  require_feature_map(x, "gra input");
  return attention_core(p, x, ref, trace);
}

template <typename T>
Var<T> gfn(const Scope<T>& p, const Var<T>& x) {
  require_feature_map(x, "gfn input");
  Var<T> h = depthwise_conv3x3(linear(x, p["in.w"], p["in.b"]), p["dw.w"], p["dw.b"]);
  const std::int64_t hidden = h.dim(-1) / 2;
  Var<T> gated = mul(gelu(slice_last(h, 0, hidden)), slice_last(h, hidden, 2 * hidden));
  return linear(gated, p["out.w"], p["out.b"]);
}

template <typename T>
Modulation<T> dea(const Scope<T>& p, const Var<T>& z_d) {
  require_rank(z_d.shape(), 2, "dea input");
  const Var<T> pooled = mean_tokens(z_d);
  const Var<T> adapted = silu(linear(pooled, p["adapt.w"], p["adapt.b"]));
  const Var<T> e = linear(adapted, p["linear.w"], p["linear.b"]);
  const std::int64_t c = adapted.dim(-1);
  auto part = [&](int i) { return slice_last(e, i * c, (i + 1) * c); };
  auto plus_one = [](const Var<T>& v) { return affine(v, T(1), T(1)); };
  return Modulation<T>{plus_one(part(0)), plus_one(part(1)), plus_one(part(2)),
                       part(3),           plus_one(part(4)), part(5)};
}

template <typename T>
Var<T> plain_block(const Scope<T>& p, const Var<T>& x, Trace<T>* trace) {
  const Var<T> f = add(tsa(p.sub("attn"), norm(p.sub("norm1"), x), trace), x);
  return add(gfn(p.sub("ffn"), norm(p.sub("norm2"), f)), f);
}

template <typename T>
Var<T> dat_block_modulated(const Scope<T>& p, const Var<T>& x, const Modulation<T>& m, Trace<T>* trace) {
  const Var<T> x1 = add_channels(mul_channels(norm(p.sub("norm1"), x), m.scale_attn), m.shift_attn);
  const Var<T> f = add(mul_channels(tsa(p.sub("attn"), x1, trace), m.gate_attn), x);
  const Var<T> x2 = add_channels(mul_channels(norm(p.sub("norm2"), f), m.scale_ffn), m.shift_ffn);
  return add(mul_channels(gfn(p.sub("ffn"), x2), m.gate_ffn), f);
}

template <typename T>
Var<T> dat_block(const Scope<T>& p, const Var<T>& x, const Var<T>& z_d, Trace<T>* trace) {
  return dat_block_modulated(p, x, dea(p.sub("dea"), z_d), trace);
}

template <typename T>
Var<T> project_text(const Scope<T>& p, const Var<T>& e_c) {
  require_rank(e_c.shape(), 2, "text embedding");
  return linear(gelu(linear(e_c, p["fc1.w"], p["fc1.b"])), p["fc2.w"], p["fc2.b"]);
}

template <typename T>
Var<T> reference_attention(const Scope<T>& p, const Var<T>& x, const Var<T>& e_proj, Trace<T>* trace) {
  require_feature_map(x, "reference_attention input");
  require_rank(e_proj.shape(), 2, "reference_attention tokens");
  const std::int64_t c = x.dim(-1);
  if (e_proj.dim(1) != c) {
    throw Error(ErrorCode::ShapeMismatch, "reference_attention: tokens " + shape_string(e_proj.shape()) +
                                              " do not match features " + shape_string(x.shape()));
  }
  const Var<T> flat = reshape(x, Shape{x.value().size() / c, c});
  const Var<T> q = linear(flat, p["q.w"], p["q.b"]);
  const Var<T> k = linear(e_proj, p["k.w"], p["k.b"]);
  const Var<T> v = linear(e_proj, p["v.w"], p["v.b"]);
  const Var<T> out = token_attention(q, k, v, 1, T(1) / std::sqrt(static_cast<T>(c)), trace);
  return reshape(out, x.shape());
}

template <typename T>
Var<T> cat_block(const Scope<T>& p, const Var<T>& x, const Var<T>& e_c, Trace<T>* trace) {
  require_feature_map(x, "cat_block input");
  const Var<T> f = add(tsa(p.sub("attn"), norm(p.sub("norm1"), x), trace), x);
  const Var<T> tokens = project_text(p.sub("text"), e_c);
  const Var<T> g = add(reference_attention(p.sub("ra"), f, tokens, trace), f);
  return gfn(p.sub("ffn"), norm(p.sub("norm2"), g));
}

template <typename T>
Var<T> project_reference(const Scope<T>& p, const Tensor<T>& reference, std::int64_t height, std::int64_t width) {
  require_rank(reference.shape(), 3, "reference image");
  Tensor<T> resized = resize_bilinear(reference, height, width);
  const std::int64_t c = resized.dim(2);
  const Var<T> image = p.graph().constant(std::move(resized).reshaped(Shape{1, height, width, c}));
  return conv2d(image, p["w"], p["b"], 1, PadMode::Reflect);
}

template <typename T>
Var<T> lra(const Scope<T>& p, const Var<T>& x, const Var<T>& ref, SoftmaxAxis axis, Trace<T>* trace) {
  require_feature_map(x, "lra input");
  require_shape(ref.shape(), x.shape(), "lra reference features");
  auto branch = [&](const Var<T>& in) {
    const Var<T> h = relu(conv2d(in, p["w1.w"], p["w1.b"]));
    return conv2d(h, p["w2.w"], p["w2.b"]);
  };
  const Var<T> fj = branch(x);
  const Var<T> fk = branch(ref);
  const Var<T> logits = conv2d(add(fj, fk), p["wa.w"], p["wa.b"]);
  const Var<T> sim = axis == SoftmaxAxis::Channel ? softmax_last(logits, trace) : softmax_spatial(logits, trace);
  return add(fj, mul(sim, fk));
}

template <typename T>
Var<T> rbt_block(const Scope<T>& p, const Var<T>& x, const Var<T>& ref_features, SoftmaxAxis axis,
                 Trace<T>* trace) {
  require_feature_map(x, "rbt_block input");
  const std::int64_t c = x.dim(-1);
  if (c % 2 != 0) {
    throw Error(ErrorCode::OddChannelCount, "reference block needs an even channel count, got " +
                                                std::to_string(c));
  }
  require_shape(ref_features.shape(), x.shape(), "rbt_block reference features");
  const std::int64_t half = c / 2;
  const Var<T> f = add(tsa(p.sub("attn"), norm(p.sub("norm1"), x), trace), x);
  const Var<T> local = lra(p.sub("lra"), slice_last(f, 0, half), slice_last(ref_features, 0, half), axis, trace);
  const Var<T> global = gra(p.sub("gra"), slice_last(f, half, c), slice_last(ref_features, half, c), trace);
  const Var<T> fused = add(linear(concat_last(local, global), p["fuse.w"], p["fuse.b"]), f);
  return add(gfn(p.sub("ffn"), norm(p.sub("norm2"), fused)), fused);
}

template <typename T>
Var<T> rbt_block(const Scope<T>& p, const Scope<T>& phi, const Var<T>& x, const Tensor<T>& reference,
                 SoftmaxAxis axis, Trace<T>* trace) {
  require_feature_map(x, "rbt_block input");
  if (x.dim(-1) % 2 != 0) {
    throw Error(ErrorCode::OddChannelCount, "reference block needs an even channel count, got " +
                                                std::to_string(x.dim(-1)));
  }
  const Var<T> ref = project_reference(phi, reference, x.dim(1), x.dim(2));
  return rbt_block(p, x, ref, axis, trace);
}

#define LMDIR_INSTANTIATE_BLOCKS(T)                                                                        \
  template void init_layer_norm(ParamInit<T>, int);                                                        \
  template void init_tsa(ParamInit<T>, int, int);                                                          \
  template void init_gfn(ParamInit<T>, int, double);                                                       \
  template void init_dea(ParamInit<T>, int, int);                                                          \
  template void init_plain_block(ParamInit<T>, int, int, double);                                          \
  template void init_dat_block(ParamInit<T>, int, int, double, int);                                       \
  template void init_text_projection(ParamInit<T>, int, int);                                              \
  template void init_reference_attention(ParamInit<T>, int);                                               \
  template void init_cat_block(ParamInit<T>, int, int, double, int);                                       \
  template void init_reference_projection(ParamInit<T>, int);                                              \
  template void init_lra(ParamInit<T>, int);                                                               \
  template void init_rbt_block(ParamInit<T>, int, int, double);                                            \
  template Var<T> tsa(const Scope<T>&, const Var<T>&, Trace<T>*);                                          \
  template Var<T> gra(const Scope<T>&, const Var<T>&, const Var<T>&, Trace<T>*);                           \
  template Var<T> gfn(const Scope<T>&, const Var<T>&);                                                     \
  template Modulation<T> dea(const Scope<T>&, const Var<T>&);                                              \
  template Var<T> plain_block(const Scope<T>&, const Var<T>&, Trace<T>*);                                  \
  template Var<T> dat_block_modulated(const Scope<T>&, const Var<T>&, const Modulation<T>&, Trace<T>*);    \
  template Var<T> dat_block(const Scope<T>&, const Var<T>&, const Var<T>&, Trace<T>*);                     \
  template Var<T> project_text(const Scope<T>&, const Var<T>&);                                            \
  template Var<T> reference_attention(const Scope<T>&, const Var<T>&, const Var<T>&, Trace<T>*);           \
  template Var<T> cat_block(const Scope<T>&, const Var<T>&, const Var<T>&, Trace<T>*);                     \
  template Var<T> project_reference(const Scope<T>&, const Tensor<T>&, std::int64_t, std::int64_t);        \
  template Var<T> lra(const Scope<T>&, const Var<T>&, const Var<T>&, SoftmaxAxis, Trace<T>*);              \
  template Var<T> rbt_block(const Scope<T>&, const Var<T>&, const Var<T>&, SoftmaxAxis, Trace<T>*);        \
  template Var<T> rbt_block(const Scope<T>&, const Scope<T>&, const Var<T>&, const Tensor<T>&, SoftmaxAxis, \
                            Trace<T>*);

LMDIR_INSTANTIATE_BLOCKS(float)
LMDIR_INSTANTIATE_BLOCKS(double)

}  // namespace lmdir::blocks
