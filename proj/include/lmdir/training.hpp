#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmdir/image.hpp"
#include "lmdir/network.hpp"
#include "lmdir/prior.hpp"
#include "lmdir/random.hpp"

namespace lmdir::train {

enum class TaskId { Denoise, Derain, Lowlight };

std::string task_name(TaskId task);
TaskId task_from_name(const std::string& name);

// --- synthetic degradations ------------------------------------------------------

// clamp(G + n), n ~ N(0, (sigma_255 / 255)^2) per pixel and channel.
TensorImage add_gaussian_noise(const TensorImage& clean, double sigma_255, Rng& rng);

// scale * G^gamma per channel.
TensorImage synthesize_lowlight(const TensorImage& clean, double gamma, double scale);

struct RainParams {
  int count = 40;
  double length = 12;
  // Streak direction in radians from vertical.
  double angle_min = -0.3;
  double angle_max = 0.3;
  double opacity = 0.6;
  // Standard deviation of the cross-streak Gaussian profile, in pixels.
  double width = 0.8;
};

// Additive bright line segments with a Gaussian cross-section, clamped.
TensorImage synthesize_rain(const TensorImage& clean, const RainParams& params, Rng& rng);

// Piecewise-smooth procedural scene: a colour gradient, a few discs and
// rectangles, and a faint texture. Used when no real dataset is present.
TensorImage synthetic_scene(std::int64_t size, std::uint64_t seed);

// Writes `count` synthetic scenes to <root>/<task>/clean/scene_<i>.png.
void write_synthetic_dataset(const std::filesystem::path& root, TaskId task, int count, std::int64_t size,
                             std::uint64_t seed);

// --- datasets --------------------------------------------------------------------------

struct TaskSpec {
  TaskId task = TaskId::Denoise;
  std::filesystem::path dataset_root;
  // Denoise: "sigma" (0-255 scale, one sample per value). Lowlight: "gamma",
  // "scale". Derain: the RainParams field names. Unused when paired.
  std::map<std::string, std::vector<double>> degradation_params;
  bool paired = false;
};

void validate(const TaskSpec& spec);
TaskSpec default_task(TaskId task, const std::filesystem::path& root);

struct Sample {
  std::string name;
  // Degradation setting label, e.g. "sigma=25"; "paired" for on-disk pairs.
  std::string setting;
  TensorImage degraded;
  TensorImage clean;
  std::string image_id;  // of the degraded image
};

struct TaskData {
  TaskId task = TaskId::Denoise;
  std::vector<Sample> samples;
};

// Reads <root>/<task>/{degraded,clean}/<name>.png pairs, or clean images only
// plus synthesized degradations. Noise draws are seeded per (seed, task,
// name, setting), so the data does not depend on load order.
TaskData load_task(const TaskSpec& spec, std::uint64_t seed);

// Synthesized degradations of in-memory clean images, one sample per setting.
std::vector<Sample> degrade(TaskId task, const std::map<std::string, std::vector<double>>& params,
                            const std::vector<std::pair<std::string, TensorImage>>& clean, std::uint64_t seed);

using BundleMap = std::map<std::string, prior::PriorBundle>;

// Builds (or loads from the cache) the bundle of every degraded image.
BundleMap prepare_bundles(const std::vector<TaskData>& tasks, prior::PriorPipeline& pipeline,
                          const std::filesystem::path& bundle_root, std::int64_t seed);

// --- sampling --------------------------------------------------------------------------

struct Example {
  TaskId task = TaskId::Denoise;
  TensorImage degraded;
  TensorImage clean;
  const prior::PriorBundle* bundle = nullptr;
};

// Aligned crop of (degraded, clean) at the same coordinates. Images smaller
// than the crop are reflect-padded first.
std::pair<TensorImage, TensorImage> aligned_crop(const TensorImage& degraded, const TensorImage& clean,
                                                 std::int64_t crop, Rng& rng);

// Task uniformly, then sample uniformly within it, then crop and a random
// horizontal flip. The bundle is the one of the full degraded image.
std::vector<Example> sample_batch(const std::vector<TaskData>& tasks, const BundleMap& bundles, int batch,
                                  std::int64_t crop, Rng& rng);

// --- optimisation ----------------------------------------------------------------------

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainState {
  static constexpr std::size_t kHistory = 1000;

  std::int64_t step = 0;
  net::NetworkParams params;
  ParamSet<float> m;
  ParamSet<float> v;
  Rng rng;
  std::deque<double> loss_history;
};

TrainState init_state(const net::NetworkConfig& config, std::uint64_t seed);

// Mean L1 over the batch, then one Adam update. Throws NonFiniteLoss (state
// untouched) when the loss, an activation or a gradient is not finite.
double train_step(TrainState& state, const std::vector<Example>& batch, const net::NetworkConfig& config,
                  const AdamConfig& adam);

void save_state(const std::filesystem::path& path, const TrainState& state, const net::NetworkConfig& config,
                const nlohmann::json& metadata = nlohmann::json::object());
TrainState load_state(const std::filesystem::path& path, const net::NetworkConfig& config);

// --- driver ----------------------------------------------------------------------------

struct TrainConfig {
  std::int64_t crop = 128;
  int batch = 2;
  std::int64_t iters = 300000;
  double lr = 2e-4;
  std::uint64_t seed = 0;
  std::vector<TaskSpec> tasks;
  std::filesystem::path bundle_root;
  std::filesystem::path out_dir;
  int log_every = 10;
  int checkpoint_every = 1000;
};

// Paper numbers: 128 crops, batch 2, 300k iterations, lr 2e-4.
TrainConfig paper_profile();
// Desk numbers: 64 crops, batch 2, 500 iterations, same constant lr.
TrainConfig desk_profile();

void validate(const TrainConfig& config, const net::NetworkConfig& network);

struct TrainResult {
  TrainState state;
  std::filesystem::path checkpoint;
};

// Loads the tasks, prepares bundles, then runs (or resumes) the loop to
// config.iters. Writes <out_dir>/train.jsonl and <out_dir>/checkpoint.ckpt.
TrainResult train(const TrainConfig& config, const net::NetworkConfig& network, prior::PriorPipeline& pipeline,
                  const std::filesystem::path& resume_from = {});

// Same loop over already loaded data.
TrainResult train_loop(const TrainConfig& config, const net::NetworkConfig& network,
                       const std::vector<TaskData>& tasks, const BundleMap& bundles, TrainState state);

// Mean of the last `window` losses.
double running_loss(const TrainState& state, std::size_t window = 10);

}  // namespace lmdir::train
