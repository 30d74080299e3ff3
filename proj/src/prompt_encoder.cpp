#include "lmdir/prompt_encoder.hpp"

#include <cmath>

namespace lmdir::prompt {

using namespace lmdir::ops;

namespace {

template <typename T>
void init_conv(ParamInit<T> init, int cin, int cout) {
  init.uniform("w", Shape{3, 3, cin, cout}, 9 * cin);
  init.zeros("b", Shape{cout});
}

template <typename T>
void init_dense(ParamInit<T> init, int in, int out) {
  init.uniform("w", Shape{in, out}, in);
  init.zeros("b", Shape{out});
}

template <typename T>
Var<T> conv(const Scope<T>& p, const Var<T>& x, int stride = 1) {
  return conv2d(x, p["w"], p["b"], stride, PadMode::Reflect);
}

template <typename T>
Var<T> dense(const Scope<T>& p, const Var<T>& x) {
  return linear(x, p["w"], p["b"]);
}

}  // namespace

template <typename T>
void init_image_encoder(ParamInit<T> init, const PromptEncoderDims& dims) {
  const auto& ch = dims.image_channels;
  init_conv(init.sub("stem"), 3, ch[0]);
  for (int i = 0; i < 4; ++i) {
    const std::string res = "res" + std::to_string(i);
    init_conv(init.sub(res + ".conv1"), ch[i], ch[i]);
    init_conv(init.sub(res + ".conv2"), ch[i], ch[i]);
    if (i < 3) init_conv(init.sub("down" + std::to_string(i)), ch[i], ch[i + 1]);
  }
  init_dense(init.sub("head"), ch[3], dims.prompt_channels);
}

template <typename T>
void init_refiner(ParamInit<T> init, const PromptEncoderDims& dims) {
  const int cp = dims.prompt_channels;
  init.uniform("queries", Shape{dims.query_tokens, cp}, cp);
  init_dense(init.sub("text_proj"), dims.text_channels, cp);
  for (const char* name : {"sa.q", "sa.k", "sa.v", "sa.o", "qp", "kd", "vd", "ki", "vi"}) {
    init_dense(init.sub(name), cp, cp);
  }
  init.constant("ffn.norm.g", Shape{cp}, T(1));
  init.zeros("ffn.norm.b", Shape{cp});
  init_dense(init.sub("ffn.fc1"), cp, 4 * cp);
  init_dense(init.sub("ffn.fc2"), 4 * cp, cp);
}

template <typename T>
Var<T> encode_degraded_image(const Scope<T>& p, const Var<T>& image) {
  require_rank(image.shape(), 4, "degraded image");
  if (image.dim(3) != 3) throw Error(ErrorCode::ShapeMismatch, "degraded image must have 3 channels");
  if (std::min(image.dim(1), image.dim(2)) < kMinImageSide) {
    throw Error(ErrorCode::ImageTooSmall, "image encoder needs at least " + std::to_string(kMinImageSide) +
                                              " pixels per side, got " + shape_string(image.shape()));
  }
  Var<T> x = conv(p.sub("stem"), image);
  for (int i = 0; i < 4; ++i) {
    const Scope<T> res = p.sub("res" + std::to_string(i));
    x = add(x, conv(res.sub("conv2"), relu(conv(res.sub("conv1"), x))));
    if (i < 3) x = conv(p.sub("down" + std::to_string(i)), x, 2);
  }
  const std::int64_t b = x.dim(0), c = x.dim(3);
  const Var<T> pooled = mean_tokens(reshape(x, Shape{b, x.dim(1) * x.dim(2), c}));
  return dense(p.sub("head"), pooled);
}

template <typename T>
Var<T> refine_degradation(const Scope<T>& p, const Var<T>& e_d, const Var<T>& i_d, int heads,
                          AttentionTrace<T>* trace) {
  require_rank(e_d.shape(), 2, "degradation embedding");
  const Var<T> queries = p["queries"];
  const std::int64_t cp = queries.dim(1);
  if (i_d.value().size() != cp) {
    throw Error(ErrorCode::ShapeMismatch, "image feature " + shape_string(i_d.shape()) + " does not have " +
                                              std::to_string(cp) + " channels");
  }
  if (heads < 1 || cp % heads != 0) {
    throw Error(ErrorCode::ShapeMismatch, std::to_string(cp) + " prompt channels over " + std::to_string(heads) +
                                              " heads");
  }
  const T scale = T(1) / std::sqrt(static_cast<T>(cp / heads));

  const Var<T> text = dense(p.sub("text_proj"), e_d);

  const Var<T> self = token_attention(dense(p.sub("sa.q"), queries), dense(p.sub("sa.k"), queries),
                                      dense(p.sub("sa.v"), queries), heads, scale, trace);
  const Var<T> refined_queries = dense(p.sub("sa.o"), self);
  const Var<T> q = dense(p.sub("qp"), refined_queries);

  const Var<T> z_text = token_attention(q, dense(p.sub("kd"), text), dense(p.sub("vd"), text), heads, scale, trace);
  const Var<T> image_token = reshape(i_d, Shape{1, cp});
  const Var<T> z_image =
      token_attention(q, dense(p.sub("ki"), image_token), dense(p.sub("vi"), image_token), heads, scale, trace);

  const Var<T> fused = add(z_text, z_image);
  const Var<T> normed = layer_norm(fused, p["ffn.norm.g"], p["ffn.norm.b"]);
  return add(fused, dense(p.sub("ffn.fc2"), gelu(dense(p.sub("ffn.fc1"), normed))));
}

#define LMDIR_INSTANTIATE_PROMPT(T)                                                              \
  template void init_image_encoder(ParamInit<T>, const PromptEncoderDims&);                      \
  template void init_refiner(ParamInit<T>, const PromptEncoderDims&);                            \
  template Var<T> encode_degraded_image(const Scope<T>&, const Var<T>&);                         \
  template Var<T> refine_degradation(const Scope<T>&, const Var<T>&, const Var<T>&, int, AttentionTrace<T>*);

LMDIR_INSTANTIATE_PROMPT(float)
LMDIR_INSTANTIATE_PROMPT(double)

}  // namespace lmdir::prompt
