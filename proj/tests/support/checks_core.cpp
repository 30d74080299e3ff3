#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

#include "lmdir/blocks.hpp"
#include "lmdir/prompt_encoder.hpp"
#include "support/checks.hpp"
#include "support/oracles.hpp"

namespace lmdir::testing {

using namespace lmdir::ops;
using namespace lmdir::blocks;
using P = ParamSet<double>;
using S = Scope<double>;
using V = Var<double>;

namespace {

constexpr int kC = 8;
constexpr int kHeads = 2;
constexpr double kRatio = 2.66;
const Shape kMap{1, 4, 4, kC};

P make_params(Rng& rng, const std::function<void(ParamInit<double>)>& init) {
  P p;
  init(ParamInit<double>(p, rng));
  randomize(p, rng);
  return p;
}

void add_input(P& p, Rng& rng, const std::string& name, Shape shape, double lo = -1, double hi = 1) {
  p.emplace("in." + name, random_tensor(rng, std::move(shape), lo, hi));
}

V concat_all(const std::vector<V>& parts) {
  V out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) out = concat_last(out, parts[i]);
  return out;
}

prompt::PromptEncoderDims small_prompt_dims() {
  prompt::PromptEncoderDims d;
  d.text_channels = 6;
  d.prompt_channels = 8;
  d.query_tokens = 3;
  d.heads = 2;
  d.image_channels = {2, 2, 2, 2};
  return d;
}

double max_abs(const Tensor<double>& t) {
  double m = 0;
  for (double v : t.values()) m = std::max(m, std::abs(v));
  return m;
}

double relative_gap(const Tensor<double>& got, const Tensor<double>& want) {
  if (got.shape() != want.shape()) return INFINITY;
  double diff = 0;
  for (std::int64_t i = 0; i < got.size(); ++i) diff = std::max(diff, std::abs(got[i] - want[i]));
  return diff / std::max(max_abs(want), 1e-300);
}

Tensor<double> image_of(const V& v) {
  return v.value().reshaped(Shape{v.dim(1), v.dim(2), v.dim(3)});
}

}  // namespace

std::vector<GradCase> gradient_cases() {
  Rng rng(20240611);
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name, P params, GradFn fn) {
    cases.push_back(GradCase{std::move(name), std::move(params), std::move(fn)});
  };
  auto inputs = [&](std::initializer_list<std::pair<const char*, Shape>> list, double lo = -1, double hi = 1) {
    P p;
    for (const auto& [name, shape] : list) add_input(p, rng, name, shape, lo, hi);
    return p;
  };

  // Primitive ops.
  add_case("add_sub_mul_affine", inputs({{"a", kMap}, {"b", kMap}}),
      [](const S& s) { return affine(mul(add(s["in.a"], s["in.b"]), sub(s["in.a"], s["in.b"])), 0.7, -0.2); });
  add_case("broadcast_channels", inputs({{"x", kMap}, {"g", {kC}}, {"b", {kC}}}),
      [](const S& s) { return add_channels(mul_channels(s["in.x"], s["in.g"]), s["in.b"]); });
  add_case("linear", inputs({{"x", kMap}, {"w", {kC, 5}}, {"b", {5}}}),
      [](const S& s) { return linear(s["in.x"], s["in.w"], s["in.b"]); });
  add_case("conv2d_zero_pad", inputs({{"x", {1, 4, 4, 3}}, {"w", {3, 3, 3, 4}}, {"b", {4}}}),
      [](const S& s) { return conv2d(s["in.x"], s["in.w"], s["in.b"]); });
  add_case("conv2d_reflect_stride2", inputs({{"x", {1, 4, 4, 3}}, {"w", {3, 3, 3, 4}}, {"b", {4}}}),
      [](const S& s) { return conv2d(s["in.x"], s["in.w"], s["in.b"], 2, PadMode::Reflect); });
  add_case("depthwise_conv3x3", inputs({{"x", kMap}, {"w", {3, 3, kC}}, {"b", {kC}}}),
      [](const S& s) { return depthwise_conv3x3(s["in.x"], s["in.w"], s["in.b"]); });
  add_case("layer_norm", inputs({{"x", kMap}, {"g", {kC}}, {"b", {kC}}}),
      [](const S& s) { return layer_norm(s["in.x"], s["in.g"], s["in.b"]); });
  add_case("gelu_silu_relu", inputs({{"x", kMap}}),
      [](const S& s) { return concat_all({gelu(s["in.x"]), silu(s["in.x"]), relu(s["in.x"])}); });
  add_case("clamp", inputs({{"x", kMap}}, -0.5, 1.5), [](const S& s) { return clamp(s["in.x"], 0.0, 1.0); });
  add_case("softmax_last", inputs({{"x", kMap}}, -2, 2), [](const S& s) { return softmax_last(s["in.x"]); });
  add_case("softmax_spatial", inputs({{"x", kMap}}, -2, 2), [](const S& s) { return softmax_spatial(s["in.x"]); });
  add_case("slice_concat_reshape", inputs({{"x", kMap}, {"y", {1, 4, 4, 2}}}), [](const S& s) {
    return reshape(concat_last(slice_last(s["in.x"], 2, 5), s["in.y"]), Shape{16, 5});
  });
  add_case("pixel_shuffle", inputs({{"x", {1, 2, 2, kC}}}), [](const S& s) { return pixel_shuffle(s["in.x"], 2); });
  add_case("mean_tokens", inputs({{"x", {5, kC}}}), [](const S& s) { return mean_tokens(s["in.x"]); });
  add_case("crop_spatial", inputs({{"x", kMap}}), [](const S& s) { return crop_spatial(s["in.x"], 3, 2); });
  add_case("channel_attention", inputs({{"q", kMap}, {"k", kMap}, {"v", kMap}, {"t", {kHeads}}}),
      [](const S& s) { return channel_attention(s["in.q"], s["in.k"], s["in.v"], s["in.t"]); });
  add_case("token_attention", inputs({{"q", {3, kC}}, {"k", {5, kC}}, {"v", {5, kC}}}),
      [](const S& s) { return token_attention(s["in.q"], s["in.k"], s["in.v"], kHeads, 0.5); });
  {
    P p = inputs({{"y", kMap}});
    Tensor<double> target = p.at("in.y");
    for (std::int64_t i = 0; i < target.size(); ++i) target[i] += (i % 2 == 0 ? 0.25 : -0.25);
    add_case("l1_loss", std::move(p), [target](const S& s) { return l1_loss(s["in.y"], target); });
  }

  // Blocks.
  {
    P p = make_params(rng, [](ParamInit<double> i) { init_tsa(i.sub("tsa"), kC, kHeads); });
    add_input(p, rng, "x", kMap);
    add_case("tsa", std::move(p), [](const S& s) { return tsa(s.sub("tsa"), s["in.x"]); });
  }
  {
    P p = make_params(rng, [](ParamInit<double> i) { init_tsa(i.sub("gra"), kC, kHeads); });
    add_input(p, rng, "x", kMap);
    add_input(p, rng, "ref", kMap);
    add_case("gra", std::move(p), [](const S& s) { return gra(s.sub("gra"), s["in.x"], s["in.ref"]); });
  }
  {
    P p = make_params(rng, [](ParamInit<double> i) { init_gfn(i.sub("gfn"), kC, kRatio); });
    add_input(p, rng, "x", kMap);
    add_case("gfn", std::move(p), [](const S& s) { return gfn(s.sub("gfn"), s["in.x"]); });
  }
  {
    P p = make_params(rng, [](ParamInit<double> i) { init_dea(i.sub("dea"), 6, kC); });
    add_input(p, rng, "z", {3, 6});
    add_case("dea", std::move(p), [](const S& s) {
      const Modulation<double> m = dea(s.sub("dea"), s["in.z"]);
      return concat_all({m.gate_attn, m.gate_ffn, m.scale_attn, m.shift_attn, m.scale_ffn, m.shift_ffn});
    });
  }
  {
    P p = make_params(rng, [](ParamInit<double> i) { init_plain_block(i.sub("blk"), kC, kHeads, kRatio); });
    add_input(p, rng, "x", kMap);
    add_case("plain_block", std::move(p), [](const S& s) { return plain_block(s.sub("blk"), s["in.x"]); });
  }
  {
    P p = make_params(rng, [](ParamInit<double> i) { init_dat_block(i.sub("blk"), kC, kHeads, kRatio, 6); });
    add_input(p, rng, "x", kMap);
    add_input(p, rng, "z", {3, 6});
    add_case("dat_block", std::move(p), [](const S& s) { return dat_block(s.sub("blk"), s["in.x"], s["in.z"]); });
  }
  {
    P p = make_params(rng, [](ParamInit<double> i) { init_text_projection(i.sub("text"), 6, kC); });
    add_input(p, rng, "e", {5, 6});
    add_case("project_text", std::move(p), [](const S& s) { return project_text(s.sub("text"), s["in.e"]); });
  }
  {
    P p = make_params(rng, [](ParamInit<double> i) { init_reference_attention(i.sub("ra"), kC); });
    add_input(p, rng, "x", kMap);
    add_input(p, rng, "tokens", {5, kC});
    add_case("reference_attention", std::move(p),
        [](const S& s) { return reference_attention(s.sub("ra"), s["in.x"], s["in.tokens"]); });
  }
  {
    P p = make_params(rng, [](ParamInit<double> i) { init_cat_block(i.sub("blk"), kC, kHeads, kRatio, 6); });
    add_input(p, rng, "x", kMap);
    add_input(p, rng, "e", {5, 6});
    add_case("cat_block", std::move(p), [](const S& s) { return cat_block(s.sub("blk"), s["in.x"], s["in.e"]); });
  }
  {
    P p = make_params(rng, [](ParamInit<double> i) { init_reference_projection(i.sub("phi"), kC); });
    const Tensor<double> reference = random_tensor(rng, Shape{6, 5, 3}, 0, 1);
    add_case("project_reference", std::move(p),
        [reference](const S& s) { return project_reference(s.sub("phi"), reference, 4, 4); });
  }
  for (SoftmaxAxis axis : {SoftmaxAxis::Channel, SoftmaxAxis::Spatial}) {
    P p = make_params(rng, [](ParamInit<double> i) { init_lra(i.sub("lra"), kC / 2); });
    add_input(p, rng, "x", {1, 4, 4, kC / 2});
    add_input(p, rng, "ref", {1, 4, 4, kC / 2});
    add_case(axis == SoftmaxAxis::Channel ? "lra_channel_softmax" : "lra_spatial_softmax", std::move(p),
        [axis](const S& s) { return lra(s.sub("lra"), s["in.x"], s["in.ref"], axis); });
  }
  {
    P p = make_params(rng, [](ParamInit<double> i) {
      init_rbt_block(i.sub("blk"), kC, kHeads / 2, kRatio);
      init_reference_projection(i.sub("phi"), kC);
    });
    add_input(p, rng, "x", kMap);
    const Tensor<double> reference = random_tensor(rng, Shape{5, 7, 3}, 0, 1);
    add_case("rbt_block", std::move(p), [reference](const S& s) {
      return rbt_block(s.sub("blk"), s.sub("phi"), s["in.x"], reference);
    });
  }

  // Prompt encoder.
  {
    const prompt::PromptEncoderDims dims = small_prompt_dims();
    P p = make_params(rng, [&](ParamInit<double> i) { prompt::init_image_encoder(i.sub("enc"), dims); });
    add_input(p, rng, "image", {1, 16, 16, 3}, 0, 1);
    add_case("encode_degraded_image", std::move(p),
        [](const S& s) { return prompt::encode_degraded_image(s.sub("enc"), s["in.image"]); });
  }
  {
    const prompt::PromptEncoderDims dims = small_prompt_dims();
    P p = make_params(rng, [&](ParamInit<double> i) { prompt::init_refiner(i.sub("ref"), dims); });
    add_input(p, rng, "e_d", {5, 6});
    add_input(p, rng, "i_d", {8});
    add_case("refine_degradation", std::move(p), [heads = dims.heads](const S& s) {
      return prompt::refine_degradation(s.sub("ref"), s["in.e_d"], s["in.i_d"], heads);
    });
  }
  return cases;
}

CheckResult gradient_suite() {
  double worst = 0;
  std::string where;
  std::int64_t checked = 0;
  const std::vector<GradCase> cases = gradient_cases();
  std::uint64_t seed = 1;
  for (const GradCase& c : cases) {
    const GradReport r = check_gradients(c.params, c.fn, seed++);
    checked += r.checked;
    if (r.max_error >= worst) {
      worst = r.max_error;
      where = c.name + " " + r.worst;
    }
  }
  std::ostringstream os;
  os << cases.size() << " ops, " << checked << " entries, max rel err " << worst << " (" << where << ")";
  return {worst < kGradTolerance, os.str()};
}

CheckResult identity_at_init() {
  Rng rng(77);
  bool same_as_plain = true;
  bool gated_identity = true;
  for (int trial = 0; trial < 10; ++trial) {
    P fresh;
    init_dat_block(ParamInit<double>(fresh, rng, "blk"), kC, kHeads, kRatio, 6);
    const Tensor<double> x = random_tensor(rng, kMap);
    const Tensor<double> z = random_tensor(rng, Shape{3, 6});
    {
      Graph<double> g(false);
      ParamBinding<double> b(g, fresh, false);
      const S s(b);
      const V dat = dat_block(s.sub("blk"), g.constant(x), g.constant(z));
      const V plain = plain_block(s.sub("blk"), g.constant(x));
      same_as_plain = same_as_plain && dat.value() == plain.value();
    }
    // Zero gates: the final projection produces -1 for both gate slots, so
    // 1 + raw = 0, while scales and shifts stay random.
    P gated = fresh;
    randomize(gated, rng);
    Tensor<double>& w = gated.at("blk.dea.linear.w");
    Tensor<double>& bias = gated.at("blk.dea.linear.b");
    for (std::int64_t i = 0; i < kC; ++i) {
      for (std::int64_t col = 0; col < 2 * kC; ++col) w[i * 6 * kC + col] = 0;
    }
    for (std::int64_t col = 0; col < 2 * kC; ++col) bias[col] = -1;
    Graph<double> g(false);
    ParamBinding<double> b(g, gated, false);
    const V out = dat_block(S(b).sub("blk"), g.constant(x), g.constant(z));
    gated_identity = gated_identity && out.value() == x;
  }
  std::string detail = std::string("fresh adapter == unconditioned block: ") + (same_as_plain ? "yes" : "no") +
                       "; zero gates == identity: " + (gated_identity ? "yes" : "no") + " (10 trials, float64)";
  return {same_as_plain && gated_identity, detail};
}

CheckResult attention_normalization(int instances) {
  Rng rng(4242);
  struct Mechanism {
    std::string name;
    double worst = 0;
    std::int64_t rows = 0;
  };
  std::vector<Mechanism> mechanisms{{"tsa"}, {"ra"}, {"lra"}, {"gra"}};
  auto record = [](Mechanism& m, const AttentionTrace<float>& trace) {
    for (const Tensor<float>& map : trace.maps) {
      const std::int64_t cols = map.dim(1);
      for (std::int64_t r = 0; r < map.dim(0); ++r) {
        double sum = 0;
        bool nonnegative = true;
        for (std::int64_t c = 0; c < cols; ++c) {
          sum += map[r * cols + c];
          nonnegative = nonnegative && map[r * cols + c] >= 0;
        }
        m.worst = std::max(m.worst, nonnegative ? std::abs(sum - 1.0) : INFINITY);
        ++m.rows;
      }
    }
  };
  for (int n = 0; n < instances; ++n) {
    const int heads = 1 + static_cast<int>(rng.index(2));
    const std::int64_t h = 2 + static_cast<std::int64_t>(rng.index(6));
    const std::int64_t w = 2 + static_cast<std::int64_t>(rng.index(6));
    const Shape shape{1, h, w, kC};
    const SoftmaxAxis axis = n % 2 == 0 ? SoftmaxAxis::Channel : SoftmaxAxis::Spatial;
    ParamSet<double> pd;
    ParamInit<double> init(pd, rng);
    init_tsa(init.sub("tsa"), kC, heads);
    init_reference_attention(init.sub("ra"), kC);
    init_lra(init.sub("lra"), kC);
    init_tsa(init.sub("gra"), kC, heads);
    randomize(pd, rng, 1.0);
    const ParamSet<float> pf = cast_params<float>(pd);
    const Tensor<float> x = random_tensor(rng, shape, -3, 3).cast<float>();
    const Tensor<float> ref = random_tensor(rng, shape, -3, 3).cast<float>();
    const Tensor<float> tokens = random_tensor(rng, Shape{1 + static_cast<std::int64_t>(rng.index(9)), kC}, -3, 3)
                                     .cast<float>();
    Graph<float> g(false);
    ParamBinding<float> b(g, pf, false);
    const Scope<float> s(b);
    AttentionTrace<float> t_tsa, t_ra, t_lra, t_gra;
    tsa(s.sub("tsa"), g.constant(x), &t_tsa);
    reference_attention(s.sub("ra"), g.constant(x), g.constant(tokens), &t_ra);
    lra(s.sub("lra"), g.constant(x), g.constant(ref), axis, &t_lra);
    gra(s.sub("gra"), g.constant(x), g.constant(ref), &t_gra);
    record(mechanisms[0], t_tsa);
    record(mechanisms[1], t_ra);
    record(mechanisms[2], t_lra);
    record(mechanisms[3], t_gra);
  }
  bool pass = true;
  std::ostringstream os;
  os << instances << " instances each, float32; max |row sum - 1|:";
  for (const Mechanism& m : mechanisms) {
    pass = pass && m.rows > 0 && m.worst < kRowSumTolerance;
    os << " " << m.name << " " << m.worst << " (" << m.rows << " rows)";
  }
  return {pass, os.str()};
}

CheckResult oracle_equivalence(int instances) {
  Rng rng(99);
  std::vector<std::pair<std::string, double>> worst{{"tsa", 0}, {"gfn", 0}, {"dea", 0},
                                                    {"reference_attention", 0}, {"lra", 0}, {"gra", 0}};
  for (int n = 0; n < instances; ++n) {
    const std::int64_t h = 1 + static_cast<std::int64_t>(rng.index(5));
    const std::int64_t w = 1 + static_cast<std::int64_t>(rng.index(5));
    const int heads = 1 + static_cast<int>(rng.index(2));
    const Shape shape{1, h, w, kC};
    P p;
    ParamInit<double> init(p, rng);
    init_tsa(init.sub("tsa"), kC, heads);
    init_gfn(init.sub("gfn"), kC, kRatio);
    init_dea(init.sub("dea"), 6, kC);
    init_reference_attention(init.sub("ra"), kC);
    init_lra(init.sub("lra"), kC);
    init_tsa(init.sub("gra"), kC, heads);
    randomize(p, rng, 0.8);
    const Tensor<double> x = random_tensor(rng, shape);
    const Tensor<double> ref = random_tensor(rng, shape);
    const Tensor<double> z = random_tensor(rng, Shape{3, 6});
    const Tensor<double> tokens = random_tensor(rng, Shape{4, kC});
    const Tensor<double> xi = x.reshaped(Shape{h, w, kC});
    const Tensor<double> refi = ref.reshaped(Shape{h, w, kC});
    const bool spatial = n % 2 == 1;

    Graph<double> g(false);
    ParamBinding<double> b(g, p, false);
    const S s(b);
    auto bump = [&](std::size_t i, double gap) { worst[i].second = std::max(worst[i].second, gap); };
    bump(0, relative_gap(image_of(tsa(s.sub("tsa"), g.constant(x))), oracle::tsa(p, "tsa", xi)));
    bump(1, relative_gap(image_of(gfn(s.sub("gfn"), g.constant(x))), oracle::gfn(p, "gfn", xi)));
    {
      const Modulation<double> m = dea(s.sub("dea"), g.constant(z));
      const auto want = oracle::dea(p, "dea", z);
      const V* got[6] = {&m.gate_attn, &m.gate_ffn, &m.scale_attn, &m.shift_attn, &m.scale_ffn, &m.shift_ffn};
      for (int k = 0; k < 6; ++k) {
        bump(2, relative_gap(got[k]->value(), Tensor<double>(Shape{kC}, want[k])));
      }
    }
    bump(3, relative_gap(image_of(reference_attention(s.sub("ra"), g.constant(x), g.constant(tokens))),
                         oracle::reference_attention(p, "ra", xi, tokens)));
    bump(4, relative_gap(image_of(lra(s.sub("lra"), g.constant(x), g.constant(ref),
                                      spatial ? SoftmaxAxis::Spatial : SoftmaxAxis::Channel)),
                         oracle::lra(p, "lra", xi, refi, spatial)));
    bump(5, relative_gap(image_of(gra(s.sub("gra"), g.constant(x), g.constant(ref))),
                         oracle::gra(p, "gra", xi, refi)));
  }
  bool pass = true;
  std::ostringstream os;
  os << instances << " instances each, float64; max relative gap:";
  for (const auto& [name, gap] : worst) {
    pass = pass && gap < kOracleTolerance;
    os << " " << name << " " << gap;
  }
  return {pass, os.str()};
}

}  // namespace lmdir::testing
