#include "lmdir/network.hpp"

#include <algorithm>

#include "lmdir/hash.hpp"

namespace lmdir::net {

using namespace lmdir::ops;

NetworkConfig full_config() { return NetworkConfig{}; }

NetworkConfig tiny_config() {
  NetworkConfig c;
  c.channels_per_level = {16, 32, 64, 128};
  c.blocks_per_level_encoder = {1, 1, 1};
  c.bottleneck_blocks = 2;
  c.blocks_per_level_decoder = {1, 1, 1};
  c.heads_per_level = {1, 2, 4, 8};
  c.prompt_channels = 64;
  c.query_tokens = 4;
  c.prompt_heads = 4;
  c.image_encoder_channels = {8, 16, 32, 64};
  return c;
}

namespace {

[[noreturn]] void invalid(const std::string& what) { throw Error(ErrorCode::InvalidConfig, what); }

std::string level_name(int level) { return std::to_string(level); }

// Decoder list entry j runs at level levels-2-j.
int decoder_blocks_at(const NetworkConfig& c, int level) {
  return c.blocks_per_level_decoder[static_cast<std::size_t>(c.levels - 2 - level)];
}

}  // namespace

void validate(const NetworkConfig& c) {
  if (c.levels < 2) invalid("levels must be at least 2, got " + std::to_string(c.levels));
  const auto levels = static_cast<std::size_t>(c.levels);
  if (c.channels_per_level.size() != levels) invalid("channels_per_level needs one entry per level");
  if (c.heads_per_level.size() != levels) invalid("heads_per_level needs one entry per level");
  if (c.blocks_per_level_encoder.size() != levels - 1) {
    invalid("blocks_per_level_encoder needs levels-1 entries (the bottleneck has its own count)");
  }
  if (c.blocks_per_level_decoder.size() != levels - 1) invalid("blocks_per_level_decoder needs levels-1 entries");
  for (std::size_t l = 0; l < levels; ++l) {
    const int ch = c.channels_per_level[l];
    const int heads = c.heads_per_level[l];
    if (ch < 1) invalid("channel counts must be positive");
    if (l > 0 && ch <= c.channels_per_level[l - 1]) invalid("channels must strictly increase with depth");
    if (heads < 1 || ch % heads != 0) {
      invalid("level " + std::to_string(l) + ": " + std::to_string(heads) + " heads do not divide " +
              std::to_string(ch) + " channels");
    }
    if (l + 1 < levels) {
      if (ch % 2 != 0) invalid("decoder level " + std::to_string(l) + " has odd channel count " + std::to_string(ch));
      if ((ch / 2) % heads != 0) {
        invalid("level " + std::to_string(l) + ": heads must divide half the channels for the reference branch");
      }
    }
  }
  for (int n : c.blocks_per_level_encoder) {
    if (n < 0) invalid("block counts must be non-negative");
  }
  for (int n : c.blocks_per_level_decoder) {
    if (n < 0) invalid("block counts must be non-negative");
  }
  if (c.bottleneck_blocks < 0) invalid("block counts must be non-negative");
  if (c.prompt_channels < 1 || c.prompt_heads < 1 || c.prompt_channels % c.prompt_heads != 0) {
    invalid("prompt_heads must divide prompt_channels");
  }
  if (c.query_tokens < 1) invalid("query_tokens must be at least 1");
  if (c.text_tokens < 1 || c.text_channels < 1) invalid("text embedding shape must be positive");
  if (c.image_encoder_channels.size() != 4) invalid("image_encoder_channels needs 4 entries");
  for (int ch : c.image_encoder_channels) {
    if (ch < 1) invalid("image encoder channel counts must be positive");
  }
  if (!(c.gfn_ratio > 0) || blocks::gfn_hidden(c.channels_per_level[0], c.gfn_ratio) < 1) {
    invalid("gfn_ratio leaves no hidden channels");
  }
}

nlohmann::json to_json(const NetworkConfig& c) {
  return nlohmann::json{
      {"levels", c.levels},
      {"channels_per_level", c.channels_per_level},
      {"blocks_per_level_encoder", c.blocks_per_level_encoder},
      {"bottleneck_blocks", c.bottleneck_blocks},
      {"blocks_per_level_decoder", c.blocks_per_level_decoder},
      {"heads_per_level", c.heads_per_level},
      {"prompt_channels", c.prompt_channels},
      {"query_tokens", c.query_tokens},
      {"prompt_heads", c.prompt_heads},
      {"text_tokens", c.text_tokens},
      {"text_channels", c.text_channels},
      {"image_encoder_channels", c.image_encoder_channels},
      {"gfn_ratio", c.gfn_ratio},
      {"global_residual", c.global_residual},
      {"lra_softmax_axis", c.lra_softmax_axis == blocks::SoftmaxAxis::Channel ? "channel" : "spatial"},
  };
}

NetworkConfig config_from_json(const nlohmann::json& j) {
  NetworkConfig c;
  try {
    j.at("levels").get_to(c.levels);
    j.at("channels_per_level").get_to(c.channels_per_level);
    j.at("blocks_per_level_encoder").get_to(c.blocks_per_level_encoder);
    j.at("bottleneck_blocks").get_to(c.bottleneck_blocks);
    j.at("blocks_per_level_decoder").get_to(c.blocks_per_level_decoder);
    j.at("heads_per_level").get_to(c.heads_per_level);
    j.at("prompt_channels").get_to(c.prompt_channels);
    j.at("query_tokens").get_to(c.query_tokens);
    j.at("prompt_heads").get_to(c.prompt_heads);
    j.at("text_tokens").get_to(c.text_tokens);
    j.at("text_channels").get_to(c.text_channels);
    j.at("image_encoder_channels").get_to(c.image_encoder_channels);
    j.at("gfn_ratio").get_to(c.gfn_ratio);
    j.at("global_residual").get_to(c.global_residual);
    const std::string axis = j.at("lra_softmax_axis").get<std::string>();
    if (axis == "channel") {
      c.lra_softmax_axis = blocks::SoftmaxAxis::Channel;
    } else if (axis == "spatial") {
      c.lra_softmax_axis = blocks::SoftmaxAxis::Spatial;
    } else {
      invalid("lra_softmax_axis must be 'channel' or 'spatial', got '" + axis + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    invalid(std::string("malformed network config: ") + e.what());
  }
  validate(c);
  return c;
}

std::string config_hash(const NetworkConfig& config) { return sha256_hex(to_json(config).dump()); }

prompt::PromptEncoderDims prompt_dims(const NetworkConfig& c) {
  prompt::PromptEncoderDims d;
  d.text_channels = c.text_channels;
  d.prompt_channels = c.prompt_channels;
  d.query_tokens = c.query_tokens;
  d.heads = c.prompt_heads;
  std::copy_n(c.image_encoder_channels.begin(), 4, d.image_channels.begin());
  return d;
}

std::int64_t size_multiple(const NetworkConfig& config) { return std::int64_t{1} << (config.levels - 1); }

template <typename T>
ParamSet<T> init_params(const NetworkConfig& c, std::uint64_t seed) {
  validate(c);
  ParamSet<T> params;
  Rng rng(seed);
  ParamInit<T> root(params, rng);
  const auto& ch = c.channels_per_level;
  const prompt::PromptEncoderDims dims = prompt_dims(c);

  prompt::init_image_encoder(root.sub("prompt.image"), dims);
  prompt::init_refiner(root.sub("prompt.refine"), dims);

  auto conv = [](ParamInit<T> init, int k, int cin, int cout) {
    init.uniform("w", Shape{k, k, cin, cout}, static_cast<std::int64_t>(k) * k * cin);
    init.zeros("b", Shape{cout});
  };
  conv(root.sub("shallow"), 3, 3, ch[0]);

  for (int l = 0; l + 1 < c.levels; ++l) {
    const ParamInit<T> enc = root.sub("enc." + level_name(l));
    for (int i = 0; i < c.blocks_per_level_encoder[l]; ++i) {
      blocks::init_dat_block(enc.sub(std::to_string(i)), ch[l], c.heads_per_level[l], c.gfn_ratio, c.prompt_channels);
    }
    conv(root.sub("down." + level_name(l)), 3, ch[l], ch[l + 1]);
  }
  const int deep = c.levels - 1;
  for (int i = 0; i < c.bottleneck_blocks; ++i) {
    blocks::init_cat_block(root.sub("mid." + std::to_string(i)), ch[deep], c.heads_per_level[deep], c.gfn_ratio,
                           c.text_channels);
  }
  for (int l = c.levels - 2; l >= 0; --l) {
    conv(root.sub("up." + level_name(l)), 3, ch[l + 1], 4 * ch[l]);
    ParamInit<T> fuse = root.sub("fuse." + level_name(l));
    fuse.uniform("w", Shape{2 * ch[l], ch[l]}, 2 * ch[l]);
    fuse.zeros("b", Shape{ch[l]});
    blocks::init_reference_projection(root.sub("phi." + level_name(l)), ch[l]);
    const ParamInit<T> dec = root.sub("dec." + level_name(l));
    for (int i = 0; i < decoder_blocks_at(c, l); ++i) {
      blocks::init_rbt_block(dec.sub(std::to_string(i)), ch[l], c.heads_per_level[l], c.gfn_ratio);
    }
  }
  conv(root.sub("out"), 3, ch[0], 3);
  return params;
}

namespace {

template <typename T>
void check_finite(const Var<T>& x, const std::string& where) {
  if (!x.value().all_finite()) {
    throw Error(ErrorCode::NonFiniteActivation, "non-finite activation after " + where);
  }
}

}  // namespace

template <typename T>
Var<T> forward(const Scope<T>& root, const NetworkConfig& c, const Tensor<T>& image, const Var<T>& z_d,
               const Var<T>& e_c, const Tensor<T>& reference) {
  require_rank(image.shape(), 3, "input image");
  if (image.dim(2) != 3) throw Error(ErrorCode::ShapeMismatch, "input image must have 3 channels");
  require_rank(reference.shape(), 3, "reference image");
  if (reference.dim(2) != 3) throw Error(ErrorCode::ShapeMismatch, "reference image must have 3 channels");
  require_shape(z_d.shape(), Shape{c.query_tokens, c.prompt_channels}, "refined degradation");
  require_rank(e_c.shape(), 2, "content embedding");
  if (e_c.dim(1) != c.text_channels) {
    throw Error(ErrorCode::ShapeMismatch, "content embedding " + shape_string(e_c.shape()) + " does not have " +
                                              std::to_string(c.text_channels) + " channels");
  }

  Graph<T>& graph = root.graph();
  const std::int64_t h = image.dim(0), w = image.dim(1);
  const std::int64_t m = size_multiple(c);
  const std::int64_t hp = (h + m - 1) / m * m, wp = (w + m - 1) / m * m;
  const Var<T> input = graph.constant(reflect_pad(image, hp, wp).reshaped(Shape{1, hp, wp, 3}));

  Var<T> x = conv2d(input, root["shallow.w"], root["shallow.b"]);
  check_finite(x, "shallow conv");

  std::vector<Var<T>> skips;
  for (int l = 0; l + 1 < c.levels; ++l) {
    const Scope<T> enc = root.sub("enc." + level_name(l));
    for (int i = 0; i < c.blocks_per_level_encoder[l]; ++i) x = blocks::dat_block(enc.sub(std::to_string(i)), x, z_d);
    check_finite(x, "encoder level " + level_name(l));
    skips.push_back(x);
    const Scope<T> down = root.sub("down." + level_name(l));
    x = conv2d(x, down["w"], down["b"], 2);
  }

  for (int i = 0; i < c.bottleneck_blocks; ++i) x = blocks::cat_block(root.sub("mid." + std::to_string(i)), x, e_c);
  check_finite(x, "bottleneck");

  for (int l = c.levels - 2; l >= 0; --l) {
    const Scope<T> up = root.sub("up." + level_name(l));
    x = pixel_shuffle(conv2d(x, up["w"], up["b"]), 2);
    const Scope<T> fuse = root.sub("fuse." + level_name(l));
    x = linear(concat_last(x, skips[static_cast<std::size_t>(l)]), fuse["w"], fuse["b"]);
    const Var<T> ref = blocks::project_reference(root.sub("phi." + level_name(l)), reference, x.dim(1), x.dim(2));
    const Scope<T> dec = root.sub("dec." + level_name(l));
    for (int i = 0; i < decoder_blocks_at(c, l); ++i) {
      x = blocks::rbt_block(dec.sub(std::to_string(i)), x, ref, c.lra_softmax_axis);
    }
    check_finite(x, "decoder level " + level_name(l));
  }

  const Var<T> delta = crop_spatial(conv2d(x, root["out.w"], root["out.b"]), h, w);
  check_finite(delta, "output conv");
  if (!c.global_residual) return clamp(delta, T(0), T(1));
  const Var<T> base = graph.constant(image.reshaped(Shape{1, h, w, 3}));
  return clamp(add(base, delta), T(0), T(1));
}

template <typename T>
Var<T> restore_graph(const Scope<T>& root, const NetworkConfig& c, const Tensor<T>& image, const Tensor<T>& e_d,
                     const Tensor<T>& e_c, const Tensor<T>& reference, Var<T>* z_d_out, Var<T>* i_d_out) {
  require_rank(image.shape(), 3, "input image");
  Graph<T>& graph = root.graph();
  const Var<T> batch = graph.constant(image.reshaped(Shape{1, image.dim(0), image.dim(1), image.dim(2)}));
  const Var<T> i_d = prompt::encode_degraded_image(root.sub("prompt.image"), batch);
  const Var<T> z_d = prompt::refine_degradation(root.sub("prompt.refine"), graph.constant(e_d), i_d, c.prompt_heads);
  check_finite(z_d, "prompt encoder");
  if (z_d_out) *z_d_out = z_d;
  if (i_d_out) *i_d_out = i_d;
  return forward(root, c, image, z_d, graph.constant(e_c), reference);
}

TensorImage restore_with_degradation(const TensorImage& image, const Tensor<float>& e_d,
                                     const prior::PriorBundle& bundle, const NetworkParams& params,
                                     const NetworkConfig& config) {
  if (bundle.reference.empty()) throw Error(ErrorCode::MissingBundle, "bundle has no reference image");
  Graph<float> graph(false);
  ParamBinding<float> binding(graph, params, false);
  const Var<float> y = restore_graph(Scope<float>(binding), config, image.pixels(), e_d, bundle.e_c.tokens,
                                     bundle.reference.pixels());
  return TensorImage(y.value().reshaped(Shape{image.height(), image.width(), 3}));
}

TensorImage restore(const TensorImage& image, const prior::PriorBundle& bundle, const NetworkParams& params,
                    const NetworkConfig& config) {
  return restore_with_degradation(image, bundle.e_d.tokens, bundle, params, config);
}

#define LMDIR_INSTANTIATE_NETWORK(T)                                                                           \
  template ParamSet<T> init_params<T>(const NetworkConfig&, std::uint64_t);                                    \
  template Var<T> forward(const Scope<T>&, const NetworkConfig&, const Tensor<T>&, const Var<T>&,              \
                          const Var<T>&, const Tensor<T>&);                                                    \
  template Var<T> restore_graph(const Scope<T>&, const NetworkConfig&, const Tensor<T>&, const Tensor<T>&,     \
                                const Tensor<T>&, const Tensor<T>&, Var<T>*, Var<T>*);

LMDIR_INSTANTIATE_NETWORK(float)
LMDIR_INSTANTIATE_NETWORK(double)

}  // namespace lmdir::net
