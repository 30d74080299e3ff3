#include "lmdir/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "lmdir/checkpoint.hpp"
#include "lmdir/hash.hpp"
#include "lmdir/log.hpp"

namespace lmdir::train {

namespace fs = std::filesystem;

namespace {

constexpr const char* kMomentM = "adam.m.";
constexpr const char* kMomentV = "adam.v.";

std::uint64_t derive_seed(std::uint64_t seed, const std::string& what) {
  return fnv1a64(std::to_string(seed) + "/" + what);
}

std::vector<fs::path> image_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) return {};
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (entry.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<double> param(const std::map<std::string, std::vector<double>>& params, const std::string& key,
                          std::vector<double> fallback) {
  auto it = params.find(key);
  return it == params.end() ? fallback : it->second;
}

std::string format_setting(const std::string& key, double value) {
  std::ostringstream os;
  os << key << '=' << value;
  return os.str();
}

bool all_finite(const ParamSet<float>& set) {
  for (const auto& [name, t] : set)
    for (float v : t.values())
      if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

std::string task_name(TaskId task) {
  switch (task) {
    case TaskId::Denoise: return "denoise";
    case TaskId::Derain: return "derain";
    case TaskId::Lowlight: return "lowlight";
  }
  return "unknown";
}

TaskId task_from_name(const std::string& name) {
  if (name == "denoise") return TaskId::Denoise;
  if (name == "derain") return TaskId::Derain;
  if (name == "lowlight") return TaskId::Lowlight;
  throw Error(ErrorCode::InvalidArgument, "unknown task '" + name + "' (expected denoise, derain or lowlight)");
}

// --- synthetic degradations ------------------------------------------------------

TensorImage add_gaussian_noise(const TensorImage& clean, double sigma_255, Rng& rng) {
  if (sigma_255 < 0) throw Error(ErrorCode::InvalidArgument, "noise sigma must be non-negative");
  Tensor<float> px = clean.pixels();
  const double sigma = sigma_255 / 255.0;
  for (auto& v : px.values()) v = static_cast<float>(std::clamp(v + rng.normal() * sigma, 0.0, 1.0));
  return TensorImage(std::move(px));
}

TensorImage synthesize_lowlight(const TensorImage& clean, double gamma, double scale) {
  if (!(gamma > 0) || !(scale > 0) || scale > 1) {
    throw Error(ErrorCode::InvalidArgument, "lowlight needs gamma > 0 and scale in (0, 1]");
  }
  Tensor<float> px = clean.pixels();
  for (auto& v : px.values()) v = static_cast<float>(scale * std::pow(static_cast<double>(v), gamma));
  return TensorImage(std::move(px));
}

TensorImage synthesize_rain(const TensorImage& clean, const RainParams& p, Rng& rng) {
  if (p.count < 0 || p.length <= 0 || p.width <= 0 || p.angle_max < p.angle_min) {
    throw Error(ErrorCode::InvalidArgument, "invalid rain streak parameters");
  }
  const std::int64_t h = clean.height(), w = clean.width();
  std::vector<double> layer(static_cast<std::size_t>(h * w), 0.0);
  const double reach = 3 * p.width;
  for (int s = 0; s < p.count; ++s) {
    const double cy = rng.uniform(0, static_cast<double>(h)), cx = rng.uniform(0, static_cast<double>(w));
    const double angle = rng.uniform(p.angle_min, p.angle_max);
    const double dy = std::cos(angle), dx = std::sin(angle);
    const double half = p.length / 2;
    const auto y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(cy - half - reach)));
    const auto y1 = std::min<std::int64_t>(h - 1, static_cast<std::int64_t>(std::ceil(cy + half + reach)));
    const auto x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(cx - half - reach)));
    const auto x1 = std::min<std::int64_t>(w - 1, static_cast<std::int64_t>(std::ceil(cx + half + reach)));
    for (std::int64_t y = y0; y <= y1; ++y)
      for (std::int64_t x = x0; x <= x1; ++x) {
        const double ry = static_cast<double>(y) + 0.5 - cy, rx = static_cast<double>(x) + 0.5 - cx;
        const double along = ry * dy + rx * dx;
        if (std::abs(along) > half) continue;
        const double across = -ry * dx + rx * dy;
        layer[y * w + x] += p.opacity * std::exp(-0.5 * across * across / (p.width * p.width));
      }
  }
  Tensor<float> px = clean.pixels();
  for (std::int64_t i = 0; i < h * w; ++i)
    for (int c = 0; c < 3; ++c) px[i * 3 + c] = static_cast<float>(std::min(1.0, px[i * 3 + c] + layer[i]));
  return TensorImage(std::move(px));
}

TensorImage synthetic_scene(std::int64_t size, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "scene"));
  const std::int64_t s = size;
  Tensor<float> px(Shape{s, s, 3});
  std::array<double, 3> c0{}, c1{};
  for (int c = 0; c < 3; ++c) {
    c0[c] = rng.uniform(0.15, 0.85);
    c1[c] = rng.uniform(0.15, 0.85);
  }
  const double angle = rng.uniform(0, 2 * M_PI);
  for (std::int64_t y = 0; y < s; ++y)
    for (std::int64_t x = 0; x < s; ++x) {
      const double t = 0.5 + 0.5 * (std::cos(angle) * (static_cast<double>(x) / s - 0.5) +
                                    std::sin(angle) * (static_cast<double>(y) / s - 0.5));
      for (int c = 0; c < 3; ++c) px[(y * s + x) * 3 + c] = static_cast<float>(c0[c] + (c1[c] - c0[c]) * t);
    }
  const int shapes = 3 + static_cast<int>(rng.index(4));
  for (int k = 0; k < shapes; ++k) {
    std::array<double, 3> colour{};
    for (double& c : colour) c = rng.uniform(0.05, 0.95);
    const bool disc = rng.uniform() < 0.5;
    const double cy = rng.uniform(0, static_cast<double>(s)), cx = rng.uniform(0, static_cast<double>(s));
    const double ry = rng.uniform(0.08, 0.3) * static_cast<double>(s), rx = rng.uniform(0.08, 0.3) * static_cast<double>(s);
    for (std::int64_t y = 0; y < s; ++y)
      for (std::int64_t x = 0; x < s; ++x) {
        const double ny = (static_cast<double>(y) - cy) / ry, nx = (static_cast<double>(x) - cx) / rx;
        const bool inside = disc ? ny * ny + nx * nx <= 1 : std::abs(ny) <= 1 && std::abs(nx) <= 1;
        if (!inside) continue;
        for (int c = 0; c < 3; ++c) px[(y * s + x) * 3 + c] = static_cast<float>(colour[c]);
      }
  }
  const double fy = rng.uniform(2, 6) * 2 * M_PI / static_cast<double>(s);
  const double fx = rng.uniform(2, 6) * 2 * M_PI / static_cast<double>(s);
  for (std::int64_t y = 0; y < s; ++y)
    for (std::int64_t x = 0; x < s; ++x) {
      const double texture = 0.03 * std::sin(fy * static_cast<double>(y)) * std::sin(fx * static_cast<double>(x));
      for (int c = 0; c < 3; ++c) {
        float& v = px[(y * s + x) * 3 + c];
        v = static_cast<float>(std::clamp(v + texture, 0.0, 1.0));
      }
    }
  return quantize_8bit(TensorImage(std::move(px)));
}

void write_synthetic_dataset(const fs::path& root, TaskId task, int count, std::int64_t size, std::uint64_t seed) {
  const fs::path dir = root / task_name(task) / "clean";
  fs::create_directories(dir);
  for (int i = 0; i < count; ++i) {
    write_png(dir / ("scene_" + std::to_string(i) + ".png"),
              synthetic_scene(size, derive_seed(seed, task_name(task) + std::to_string(i))));
  }
}

// --- datasets --------------------------------------------------------------------------

void validate(const TaskSpec& spec) {
  if (!fs::is_directory(spec.dataset_root)) {
    throw Error(ErrorCode::NotFound, "dataset root does not exist: " + spec.dataset_root.string());
  }
  if (spec.task == TaskId::Denoise) {
    for (double sigma : param(spec.degradation_params, "sigma", {})) {
      if (!(sigma > 0) || sigma > 255) throw Error(ErrorCode::InvalidConfig, "noise sigma must be in (0, 255]");
    }
  }
}

TaskSpec default_task(TaskId task, const fs::path& root) {
  TaskSpec spec;
  spec.task = task;
  spec.dataset_root = root;
  switch (task) {
    case TaskId::Denoise: spec.degradation_params = {{"sigma", {15, 25, 50}}}; break;
    case TaskId::Lowlight: spec.degradation_params = {{"gamma", {2.0}}, {"scale", {0.35}}}; break;
    case TaskId::Derain: spec.degradation_params = {}; break;
  }
  return spec;
}

std::vector<Sample> degrade(TaskId task, const std::map<std::string, std::vector<double>>& params,
                            const std::vector<std::pair<std::string, TensorImage>>& clean, std::uint64_t seed) {
  std::vector<Sample> out;
  for (const auto& [name, image] : clean) {
    auto add = [&](std::string setting, TensorImage degraded) {
      Sample s{name, std::move(setting), std::move(degraded), image, {}};
      s.image_id = prior::image_id(s.degraded);
      out.push_back(std::move(s));
    };
    switch (task) {
      case TaskId::Denoise:
        for (double sigma : param(params, "sigma", {25})) {
          const std::string setting = format_setting("sigma", sigma);
          Rng rng(derive_seed(seed, "denoise/" + name + "/" + setting));
          add(setting, add_gaussian_noise(image, sigma, rng));
        }
        break;
      case TaskId::Lowlight: {
        const double gamma = param(params, "gamma", {2.0}).at(0), scale = param(params, "scale", {0.35}).at(0);
        add(format_setting("gamma", gamma) + "," + format_setting("scale", scale),
            synthesize_lowlight(image, gamma, scale));
        break;
      }
      case TaskId::Derain: {
        RainParams p;
        auto pick = [&](const char* key, double& field) { field = param(params, key, {field}).at(0); };
        double count = p.count;
        pick("count", count);
        p.count = static_cast<int>(count);
        pick("length", p.length);
        pick("angle_min", p.angle_min);
        pick("angle_max", p.angle_max);
        pick("opacity", p.opacity);
        pick("width", p.width);
        Rng rng(derive_seed(seed, "derain/" + name));
        add("streaks=" + std::to_string(p.count), synthesize_rain(image, p, rng));
        break;
      }
    }
  }
  return out;
}

TaskData load_task(const TaskSpec& spec, std::uint64_t seed) {
  validate(spec);
  const fs::path base = spec.dataset_root / task_name(spec.task);
  TaskData data{spec.task, {}};
  if (spec.paired) {
    for (const fs::path& file : image_files(base / "degraded")) {
      const std::string name = file.stem().string();
      fs::path clean = base / "clean" / file.filename();
      if (!fs::exists(clean)) {
        throw Error(ErrorCode::NotFound, "no clean counterpart for " + file.string());
      }
      Sample s{name, "paired", read_image(file), read_image(clean), {}};
      if (s.degraded.height() != s.clean.height() || s.degraded.width() != s.clean.width()) {
        throw Error(ErrorCode::ShapeMismatch, "pair " + name + " has mismatched sizes");
      }
      s.image_id = prior::image_id(s.degraded);
      data.samples.push_back(std::move(s));
    }
  } else {
    std::vector<std::pair<std::string, TensorImage>> clean;
    for (const fs::path& file : image_files(base / "clean")) clean.emplace_back(file.stem().string(), read_image(file));
    data.samples = degrade(spec.task, spec.degradation_params, clean, seed);
  }
  if (data.samples.empty()) throw Error(ErrorCode::DatasetEmpty, "no images under " + base.string());
  return data;
}

BundleMap prepare_bundles(const std::vector<TaskData>& tasks, prior::PriorPipeline& pipeline,
                          const fs::path& bundle_root, std::int64_t seed) {
  BundleMap out;
  for (const auto& task : tasks)
    for (const auto& s : task.samples) {
      if (out.count(s.image_id)) continue;
      out.emplace(s.image_id, pipeline.build_bundle(s.degraded, seed, bundle_root));
    }
  return out;
}

// --- sampling --------------------------------------------------------------------------

std::pair<TensorImage, TensorImage> aligned_crop(const TensorImage& degraded, const TensorImage& clean,
                                                 std::int64_t size, Rng& rng) {
  if (degraded.height() != clean.height() || degraded.width() != clean.width()) {
    throw Error(ErrorCode::ShapeMismatch, "degraded and clean images differ in size");
  }
  const std::int64_t h = std::max(size, degraded.height()), w = std::max(size, degraded.width());
  Tensor<float> d = degraded.pixels(), c = clean.pixels();
  if (h != degraded.height() || w != degraded.width()) {
    d = reflect_pad(d, h, w);
    c = reflect_pad(c, h, w);
  }
  const auto y = static_cast<std::int64_t>(rng.index(static_cast<std::uint64_t>(h - size + 1)));
  const auto x = static_cast<std::int64_t>(rng.index(static_cast<std::uint64_t>(w - size + 1)));
  return {TensorImage(crop(d, y, x, size, size)), TensorImage(crop(c, y, x, size, size))};
}

std::vector<Example> sample_batch(const std::vector<TaskData>& tasks, const BundleMap& bundles, int batch,
                                  std::int64_t size, Rng& rng) {
  if (tasks.empty()) throw Error(ErrorCode::DatasetEmpty, "no training tasks");
  std::vector<Example> out;
  for (int b = 0; b < batch; ++b) {
    const TaskData& task = tasks[rng.index(tasks.size())];
    if (task.samples.empty()) throw Error(ErrorCode::DatasetEmpty, "task " + task_name(task.task) + " has no images");
    const Sample& s = task.samples[rng.index(task.samples.size())];
    auto it = bundles.find(s.image_id);
    if (it == bundles.end()) {
      throw Error(ErrorCode::MissingBundle, "no prior bundle for image " + s.image_id + " (" + s.name + ")");
    }
    auto [d, c] = aligned_crop(s.degraded, s.clean, size, rng);
    if (rng.uniform() < 0.5) {
      d = TensorImage(flip_horizontal(d.pixels()));
      c = TensorImage(flip_horizontal(c.pixels()));
    }
    out.push_back({task.task, std::move(d), std::move(c), &it->second});
  }
  return out;
}

// --- optimisation ----------------------------------------------------------------------

TrainState init_state(const net::NetworkConfig& config, std::uint64_t seed) {
  TrainState s;
  s.params = net::init_params<float>(config, seed);
  for (const auto& [name, t] : s.params) {
    s.m.emplace(name, Tensor<float>(t.shape()));
    s.v.emplace(name, Tensor<float>(t.shape()));
  }
  s.rng = Rng(derive_seed(seed, "sampler"));
  return s;
}

double train_step(TrainState& state, const std::vector<Example>& batch, const net::NetworkConfig& config,
                  const AdamConfig& adam) {
  if (batch.empty()) throw Error(ErrorCode::InvalidArgument, "empty batch");
  Graph<float> graph(true);
  ParamBinding<float> binding(graph, state.params, true);
  const Scope<float> root(binding);
  Var<float> total;
  try {
    for (const Example& ex : batch) {
      const prior::PriorBundle& b = *ex.bundle;
      const Var<float> y = net::restore_graph(root, config, ex.degraded.pixels(), b.e_d.tokens, b.e_c.tokens,
                                              b.reference.pixels());
      const Tensor<float> target = ex.clean.pixels().reshaped(y.shape());
      const Var<float> loss = ops::l1_loss(y, target);
      total = total.valid() ? ops::add(total, loss) : loss;
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NonFiniteActivation) throw;
    throw Error(ErrorCode::NonFiniteLoss, "step " + std::to_string(state.step + 1) + ": " + e.what());
  }
  const Var<float> mean = ops::affine(total, 1.0f / static_cast<float>(batch.size()), 0.0f);
  const double loss = mean.value()[0];
  if (!std::isfinite(loss)) {
    throw Error(ErrorCode::NonFiniteLoss, "step " + std::to_string(state.step + 1) + ": loss is " + std::to_string(loss));
  }
  graph.backward(mean);
  const ParamSet<float> grads = binding.gradients();
  if (!all_finite(grads)) {
    throw Error(ErrorCode::NonFiniteLoss, "step " + std::to_string(state.step + 1) + ": non-finite gradient");
  }

  const std::int64_t t = state.step + 1;
  const double c1 = 1 - std::pow(adam.beta1, static_cast<double>(t));
  const double c2 = 1 - std::pow(adam.beta2, static_cast<double>(t));
  ParamSet<float> params = state.params, m = state.m, v = state.v;
  for (auto& [name, p] : params) {
    auto g = grads.find(name);
    if (g == grads.end()) continue;
    Tensor<float>& mt = m.at(name);
    Tensor<float>& vt = v.at(name);
    for (std::int64_t i = 0; i < p.size(); ++i) {
      const double gi = g->second[i];
      const double mi = adam.beta1 * mt[i] + (1 - adam.beta1) * gi;
      const double vi = adam.beta2 * vt[i] + (1 - adam.beta2) * gi * gi;
      mt[i] = static_cast<float>(mi);
      vt[i] = static_cast<float>(vi);
      p[i] = static_cast<float>(p[i] - adam.lr * (mi / c1) / (std::sqrt(vi / c2) + adam.eps));
    }
  }
  if (!all_finite(params)) {
    throw Error(ErrorCode::NonFiniteLoss, "step " + std::to_string(t) + ": update produced non-finite parameters");
  }
  state.params = std::move(params);
  state.m = std::move(m);
  state.v = std::move(v);
  state.step = t;
  state.loss_history.push_back(loss);
  while (state.loss_history.size() > TrainState::kHistory) state.loss_history.pop_front();
  return loss;
}

void save_state(const fs::path& path, const TrainState& state, const net::NetworkConfig& config,
                const nlohmann::json& metadata) {
  Checkpoint ck;
  ck.config = config;
  ck.params = state.params;
  for (const auto& [name, t] : state.m) ck.extra.emplace(kMomentM + name, t);
  for (const auto& [name, t] : state.v) ck.extra.emplace(kMomentV + name, t);
  ck.metadata = metadata;
  ck.metadata["step"] = state.step;
  ck.metadata["rng_state"] = state.rng.state();
  ck.metadata["loss_history"] = std::vector<double>(state.loss_history.begin(), state.loss_history.end());
  save_checkpoint(path, ck);
}

TrainState load_state(const fs::path& path, const net::NetworkConfig& config) {
  Checkpoint ck = load_checkpoint(path, config);
  TrainState s;
  s.params = std::move(ck.params);
  try {
    s.step = ck.metadata.at("step").get<std::int64_t>();
    s.rng.set_state(ck.metadata.at("rng_state").get<std::string>());
    for (double l : ck.metadata.at("loss_history").get<std::vector<double>>()) s.loss_history.push_back(l);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, "checkpoint " + path.string() + " carries no training state: " + e.what());
  }
  for (const auto& [name, t] : s.params) {
    auto m = ck.extra.find(kMomentM + name);
    auto v = ck.extra.find(kMomentV + name);
    if (m == ck.extra.end() || v == ck.extra.end()) {
      throw Error(ErrorCode::InvalidArgument, "checkpoint " + path.string() + " lacks optimizer moments for " + name);
    }
    s.m.emplace(name, std::move(m->second));
    s.v.emplace(name, std::move(v->second));
  }
  return s;
}

// --- driver ----------------------------------------------------------------------------

TrainConfig paper_profile() { return TrainConfig{}; }

TrainConfig desk_profile() {
  TrainConfig c;
  c.crop = 64;
  c.batch = 2;
  c.iters = 500;
  c.log_every = 10;
  c.checkpoint_every = 100;
  return c;
}

void validate(const TrainConfig& c, const net::NetworkConfig& network) {
  net::validate(network);
  const std::int64_t multiple = net::size_multiple(network);
  if (c.crop < 16 || c.crop % multiple != 0) {
    throw Error(ErrorCode::InvalidConfig,
                "crop must be at least 16 and divisible by " + std::to_string(multiple) + ", got " + std::to_string(c.crop));
  }
  if (c.batch < 1) throw Error(ErrorCode::InvalidConfig, "batch must be at least 1");
  if (c.iters < 0) throw Error(ErrorCode::InvalidConfig, "iters must be non-negative");
  if (!(c.lr > 0)) throw Error(ErrorCode::InvalidConfig, "lr must be positive");
  if (c.log_every < 1 || c.checkpoint_every < 1) {
    throw Error(ErrorCode::InvalidConfig, "log and checkpoint intervals must be at least 1");
  }
}

double running_loss(const TrainState& state, std::size_t window) {
  if (state.loss_history.empty()) return 0;
  const std::size_t n = std::min(window, state.loss_history.size());
  return std::accumulate(state.loss_history.end() - static_cast<std::ptrdiff_t>(n), state.loss_history.end(), 0.0) /
         static_cast<double>(n);
}

TrainResult train_loop(const TrainConfig& config, const net::NetworkConfig& network, const std::vector<TaskData>& tasks,
                       const BundleMap& bundles, TrainState state) {
  validate(config, network);
  if (config.out_dir.empty()) throw Error(ErrorCode::InvalidConfig, "training needs an output directory");
  fs::create_directories(config.out_dir);
  const fs::path checkpoint = config.out_dir / "checkpoint.ckpt";
  const nlohmann::json meta{{"crop", config.crop}, {"batch", config.batch}, {"lr", config.lr}, {"seed", config.seed}};
  const AdamConfig adam{config.lr};

  std::ofstream log_file(config.out_dir / "train.jsonl", state.step == 0 ? std::ios::trunc : std::ios::app);
  if (!log_file) throw Error(ErrorCode::IoError, "cannot write " + (config.out_dir / "train.jsonl").string());
  std::map<std::string, int> mix;
  double interval_loss = 0;
  int interval_steps = 0;

  while (state.step < config.iters) {
    const std::vector<Example> batch = sample_batch(tasks, bundles, config.batch, config.crop, state.rng);
    for (const auto& ex : batch) ++mix[task_name(ex.task)];
    interval_loss += train_step(state, batch, network, adam);
    ++interval_steps;
    if (state.step % config.log_every == 0 || state.step == config.iters) {
      const nlohmann::json record{{"step", state.step},
                                  {"loss", interval_loss / interval_steps},
                                  {"lr", config.lr},
                                  {"task_mix", mix}};
      log_file << record.dump() << '\n' << std::flush;
      mix.clear();
      interval_loss = 0;
      interval_steps = 0;
    }
    if (state.step % config.checkpoint_every == 0 || state.step == config.iters) {
      save_state(checkpoint, state, network, meta);
    }
  }
  if (!fs::exists(checkpoint)) save_state(checkpoint, state, network, meta);
  return {std::move(state), checkpoint};
}

TrainResult train(const TrainConfig& config, const net::NetworkConfig& network, prior::PriorPipeline& pipeline,
                  const fs::path& resume_from) {
  validate(config, network);
  std::vector<TaskData> tasks;
  for (const auto& spec : config.tasks) tasks.push_back(load_task(spec, config.seed));
  if (tasks.empty()) throw Error(ErrorCode::DatasetEmpty, "no training tasks configured");
  const BundleMap bundles = prepare_bundles(tasks, pipeline, config.bundle_root, static_cast<std::int64_t>(config.seed));
  TrainState state = resume_from.empty() ? init_state(network, config.seed) : load_state(resume_from, network);
  log(LogLevel::Info, "training from step " + std::to_string(state.step) + " to " + std::to_string(config.iters));
  return train_loop(config, network, tasks, bundles, std::move(state));
}

}  // namespace lmdir::train
