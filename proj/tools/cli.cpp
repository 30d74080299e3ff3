#include "cli.hpp"

#include <algorithm>
#include <csignal>
#include <cstdlib>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <httplib.h>

#include "lmdir/evaluation.hpp"
#include "lmdir/log.hpp"
#include "lmdir/model.hpp"
#include "lmdir/service.hpp"
#include "lmdir/training.hpp"

namespace lmdir::cli {
namespace fs = std::filesystem;

prior::ProviderConfig provider_config_from_json(const nlohmann::json& j) {
  prior::ProviderConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("mllm_endpoint", c.mllm_endpoint);
  get("text_encoder_endpoint", c.text_encoder_endpoint);
  get("diffusion_endpoint", c.diffusion_endpoint);
  get("image_encoder_endpoint", c.image_encoder_endpoint);
  get("max_parallel_requests", c.max_parallel_requests);
  get("diffusion_steps", c.diffusion_steps);
  get("reference_size", c.reference_size);
  if (j.contains("retry")) {
    const auto& r = j.at("retry");
    if (r.contains("max_attempts")) c.retry.max_attempts = r.at("max_attempts").get<int>();
    if (r.contains("backoff_base_ms")) c.retry.backoff_base_ms = r.at("backoff_base_ms").get<int>();
  }
  if (j.contains("fixture_table")) c.fixture_table = j.at("fixture_table").get<std::string>();
  prior::validate(c);
  return c;
}

namespace {

// Options shared by several subcommands. LMDIR_* variables, when set, take
// precedence over the corresponding flags.
struct Common {
  std::string checkpoint;
  std::string bundle_root;
  std::string providers;
  std::string provider_mode;
  std::int64_t seed = 0;

  void apply_environment() {
    if (const char* v = std::getenv("LMDIR_CHECKPOINT"); v && *v) checkpoint = v;
    if (const char* v = std::getenv("LMDIR_BUNDLE_ROOT"); v && *v) bundle_root = v;
    if (const char* v = std::getenv("LMDIR_PROVIDER_MODE"); v && *v) provider_mode = v;
  }
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

prior::ProviderConfig provider_config(const Common& c) {
  prior::ProviderConfig pc;
  if (!c.providers.empty()) {
    const auto bytes = read_file(c.providers);
    try {
      pc = provider_config_from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::InvalidConfig, "provider config " + c.providers + ": " + e.what());
    }
  }
  if (c.provider_mode.empty() || c.provider_mode == "fixture") {
    if (c.provider_mode == "fixture") {
      pc.mllm_endpoint = pc.text_encoder_endpoint = pc.diffusion_endpoint = pc.image_encoder_endpoint =
          prior::kFixture;
    }
  } else if (c.provider_mode == "live") {
    for (const auto* e : {&pc.mllm_endpoint, &pc.text_encoder_endpoint, &pc.diffusion_endpoint}) {
      if (*e == prior::kFixture) {
        throw Error(ErrorCode::InvalidConfig, "live provider mode needs endpoints in --providers");
      }
    }
  } else {
    throw UsageError("provider mode must be fixture or live, got \"" + c.provider_mode + "\"");
  }
  return pc;
}

// Fixture text embeddings are sized to the network that consumes them.
std::unique_ptr<prior::PriorPipeline> make_pipeline(const Common& c, const net::NetworkConfig* network) {
  const prior::ProviderConfig pc = provider_config(c);
  prior::Providers providers = prior::make_providers(pc);
  if (network && pc.text_encoder_endpoint == prior::kFixture) {
    providers.text_encoder = std::make_shared<prior::FixtureTextEncoder>(network->text_tokens, network->text_channels);
  }
  return std::make_unique<prior::PriorPipeline>(pc, providers);
}

net::NetworkConfig profile_network(const std::string& profile) {
  if (profile == "desk") return net::tiny_config();
  if (profile == "paper") return net::full_config();
  throw UsageError("profile must be desk or paper, got \"" + profile + "\"");
}

Model require_model(const Common& c, const std::optional<std::string>& profile = std::nullopt) {
  if (c.checkpoint.empty()) throw UsageError("a checkpoint is required (--checkpoint or LMDIR_CHECKPOINT)");
  const net::NetworkConfig expected = profile ? profile_network(*profile) : net::NetworkConfig{};
  Model m = load_model(c.checkpoint);
  if (profile && m.config != expected) {
    throw Error(ErrorCode::InvalidConfig, c.checkpoint + " does not hold the " + *profile + " network");
  }
  return m;
}

void add_common(CLI::App* cmd, Common& c, bool checkpoint) {
  if (checkpoint) cmd->add_option("--checkpoint", c.checkpoint, "model checkpoint");
  cmd->add_option("--bundle-root", c.bundle_root, "prior bundle cache directory");
  cmd->add_option("--providers", c.providers, "provider endpoint config (JSON)");
  cmd->add_option("--provider-mode", c.provider_mode, "fixture or live");
  cmd->add_option("--seed", c.seed, "seed for degradations and reference synthesis");
}

std::vector<fs::path> input_images(const fs::path& input) {
  if (!fs::is_directory(input)) return {input};
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(input)) {
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error(ErrorCode::DatasetEmpty, "no PNG or JPEG files in " + input.string());
  return files;
}

void ensure_synthetic(const fs::path& root, train::TaskId task, int count, std::uint64_t seed, std::int64_t size) {
  const fs::path clean = root / train::task_name(task) / "clean";
  if (count <= 0 || (fs::exists(clean) && !fs::is_empty(clean))) return;
  train::write_synthetic_dataset(root, task, count, size, seed);
}

std::atomic<httplib::Server*> g_server{nullptr};

void stop_server(int) {
  if (auto* s = g_server.load()) s->stop();
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multiple-in-one image restoration with language and diffusion priors", "lmdir"};
  app.require_subcommand(1);
  Common common;

  // prior-gen
  auto* prior_gen = app.add_subcommand("prior-gen", "build prior bundles for images");
  std::string pg_input;
  prior_gen->add_option("--input", pg_input, "image file or directory")->required();
  add_common(prior_gen, common, false);

  // train
  auto* train_cmd = app.add_subcommand("train", "train a restoration model");
  std::string tr_profile = "desk", tr_data, tr_out, tr_resume;
  std::vector<std::string> tr_tasks = {"denoise", "derain", "lowlight"};
  std::optional<std::int64_t> tr_iters, tr_crop;
  std::optional<double> tr_lr;
  int tr_synthetic = 0;
  train_cmd->add_option("--profile", tr_profile, "desk or paper")->capture_default_str();
  train_cmd->add_option("--data-root", tr_data, "dataset root with <task>/clean (and degraded) folders")->required();
  train_cmd->add_option("--out", tr_out, "output directory for checkpoint and log")->required();
  train_cmd->add_option("--tasks", tr_tasks, "tasks to mix")->delimiter(',')->capture_default_str();
  train_cmd->add_option("--iters", tr_iters, "override the profile's iteration count");
  train_cmd->add_option("--crop", tr_crop, "override the profile's crop size");
  train_cmd->add_option("--lr", tr_lr, "override the profile's learning rate");
  train_cmd->add_option("--resume", tr_resume, "checkpoint to resume from");
  train_cmd->add_option("--synthetic", tr_synthetic, "write N synthetic scenes per task when a task has no data");
  add_common(train_cmd, common, false);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on benchmark suites");
  std::string ev_data, ev_out, ev_suite = "all";
  int ev_synthetic = 0;
  eval_cmd->add_option("--data-root", ev_data, "dataset root with denoise/clean")->required();
  eval_cmd->add_option("--out", ev_out, "report directory")->required();
  eval_cmd->add_option("--suite", ev_suite, "in, ood or all")->capture_default_str();
  eval_cmd->add_option("--synthetic", ev_synthetic, "write N synthetic scenes when the dataset is empty");
  add_common(eval_cmd, common, true);

  // restore
  auto* restore_cmd = app.add_subcommand("restore", "restore one image");
  std::string rs_input, rs_output, rs_instruction, rs_truth;
  std::optional<std::string> rs_profile;
  restore_cmd->add_option("--input", rs_input, "degraded image")->required();
  restore_cmd->add_option("--output", rs_output, "output PNG")->required();
  restore_cmd->add_option("--instruction", rs_instruction, "degradation instruction (guided mode)");
  restore_cmd->add_option("--ground-truth", rs_truth, "clean image; logs the PSNR gain");
  restore_cmd->add_option("--profile", rs_profile, "desk or paper: require the matching network");
  add_common(restore_cmd, common, true);

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "run the HTTP API");
  std::string sv_host = "127.0.0.1", sv_ui;
  int sv_port = 8080;
  std::size_t sv_sessions = 64;
  int sv_ttl = 3600;
  serve_cmd->add_option("--host", sv_host)->capture_default_str();
  serve_cmd->add_option("--port", sv_port)->capture_default_str();
  serve_cmd->add_option("--ui", sv_ui, "static frontend directory to serve at /");
  serve_cmd->add_option("--max-sessions", sv_sessions)->capture_default_str();
  serve_cmd->add_option("--session-ttl", sv_ttl, "seconds")->capture_default_str();
  add_common(serve_cmd, common, true);

  // export-embeddings
  auto* export_cmd = app.add_subcommand("export-embeddings", "dump e_d, I_d and pooled Z_d per image");
  std::string ex_data, ex_out;
  int ex_synthetic = 0;
  export_cmd->add_option("--data-root", ex_data, "dataset root with denoise/clean")->required();
  export_cmd->add_option("--out", ex_out, "output directory")->required();
  export_cmd->add_option("--synthetic", ex_synthetic, "write N synthetic scenes when the dataset is empty");
  add_common(export_cmd, common, true);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kUsageError;
  }
  common.apply_environment();

  try {
    if (*prior_gen) {
      if (common.bundle_root.empty()) throw UsageError("prior-gen needs --bundle-root or LMDIR_BUNDLE_ROOT");
      const auto pipeline = make_pipeline(common, nullptr);
      for (const fs::path& file : input_images(pg_input)) {
        const prior::PriorBundle b = pipeline->build_bundle(read_image(file), common.seed, common.bundle_root);
        out << b.image_id << "  " << file.string() << "  [" << b.texts.degradation_text << "]\n";
      }
    } else if (*train_cmd) {
      const net::NetworkConfig network = profile_network(tr_profile);
      train::TrainConfig tc = tr_profile == "desk" ? train::desk_profile() : train::paper_profile();
      if (tr_iters) tc.iters = *tr_iters;
      if (tr_crop) tc.crop = *tr_crop;
      if (tr_lr) tc.lr = *tr_lr;
      tc.seed = static_cast<std::uint64_t>(common.seed);
      tc.out_dir = tr_out;
      tc.bundle_root = common.bundle_root.empty() ? fs::path(tr_out) / "bundles" : fs::path(common.bundle_root);
      for (const auto& name : tr_tasks) {
        const train::TaskId task = train::task_from_name(name);
        ensure_synthetic(tr_data, task, tr_synthetic, tc.seed, 96);
        tc.tasks.push_back(train::default_task(task, tr_data));
      }
      const auto pipeline = make_pipeline(common, &network);
      const train::TrainResult r = train::train(tc, network, *pipeline, tr_resume);
      out << "step " << r.state.step << "  running L1 " << train::running_loss(r.state) << "\n"
          << "checkpoint " << r.checkpoint.string() << "\n";
    } else if (*eval_cmd) {
      const Model model = require_model(common);
      ensure_synthetic(ev_data, train::TaskId::Denoise, ev_synthetic, static_cast<std::uint64_t>(common.seed), 64);
      std::vector<eval::SuiteSpec> suites;
      if (ev_suite == "in" || ev_suite == "all") suites.push_back(eval::in_distribution_denoise_suite(ev_data));
      if (ev_suite == "ood" || ev_suite == "all") suites.push_back(eval::ood_denoise_suite(ev_data));
      if (suites.empty()) throw UsageError("suite must be in, ood or all");
      const auto pipeline = make_pipeline(common, &model.config);
      const eval::BundleSource source{common.bundle_root, pipeline.get(), common.seed};
      eval::EvalReport report{{}, model.id, net::config_hash(model.config)};
      for (auto& s : suites) {
        s.seed = static_cast<std::uint64_t>(common.seed);
        const eval::EvalReport part = eval::run_suite(model, s, source);
        report.rows.insert(report.rows.end(), part.rows.begin(), part.rows.end());
      }
      eval::write_report(report, ev_out);
      out << eval::text_table(report);
    } else if (*restore_cmd) {
      const Model model = require_model(common, rs_profile);
      const TensorImage input = read_image(rs_input);
      const auto pipeline = make_pipeline(common, &model.config);
      const prior::PriorBundle bundle = pipeline->build_bundle(input, common.seed, common.bundle_root);
      const TensorImage output = restore_cmd->count("--instruction")
                                     ? restore_guided(model, input, rs_instruction, bundle, *pipeline)
                                     : restore_auto(model, input, bundle);
      write_png(rs_output, output);
      out << "wrote " << rs_output << "  (" << (restore_cmd->count("--instruction") ? "guided" : "auto")
          << ", degradation prior: " << bundle.texts.degradation_text << ")\n";
      if (!rs_truth.empty()) {
        const TensorImage truth = read_image(rs_truth);
        const double before = eval::psnr(input, truth), after = eval::psnr(output, truth);
        out << "PSNR " << before << " -> " << after << " dB (gain " << after - before << ")\n";
      }
    } else if (*serve_cmd) {
      const Model model = require_model(common);
      const auto pipeline = make_pipeline(common, &model.config);
      service::ServiceConfig sc;
      sc.max_sessions = sv_sessions;
      sc.ttl = std::chrono::seconds(sv_ttl);
      sc.bundle_root = common.bundle_root;
      sc.diffusion_seed = common.seed;
      service::Service svc(model, *pipeline, sc);
      httplib::Server server;
      svc.mount(server);
      if (!sv_ui.empty() && !server.set_mount_point("/", sv_ui)) {
        throw Error(ErrorCode::NotFound, "UI directory not found: " + sv_ui);
      }
      g_server = &server;
      std::signal(SIGINT, stop_server);
      std::signal(SIGTERM, stop_server);
      out << "serving model " << model.id << " on http://" << sv_host << ":" << sv_port << std::endl;
      const bool ok = server.listen(sv_host, sv_port);
      g_server = nullptr;
      if (!ok) throw Error(ErrorCode::IoError, "cannot listen on " + sv_host + ":" + std::to_string(sv_port));
    } else if (*export_cmd) {
      const Model model = require_model(common);
      ensure_synthetic(ex_data, train::TaskId::Denoise, ex_synthetic, static_cast<std::uint64_t>(common.seed), 64);
      std::vector<std::pair<std::string, TensorImage>> clean;
      for (const fs::path& f : input_images(fs::path(ex_data) / "denoise" / "clean")) {
        clean.emplace_back(f.stem().string(), read_image(f));
      }
      const auto pipeline = make_pipeline(common, &model.config);
      std::vector<eval::EmbeddingItem> items;
      const auto seed = static_cast<std::uint64_t>(common.seed);
      for (const auto task : {train::TaskId::Denoise, train::TaskId::Derain, train::TaskId::Lowlight}) {
        for (auto& s : train::degrade(task, train::default_task(task, ex_data).degradation_params, clean, seed)) {
          prior::PriorBundle b = pipeline->build_bundle(s.degraded, common.seed, common.bundle_root);
          items.push_back({std::move(s.degraded), std::move(b), train::task_name(task)});
        }
      }
      const auto rows = eval::export_embeddings(model, items);
      eval::write_embeddings(rows, ex_out, {{"model_id", model.id}, {"config_hash", net::config_hash(model.config)}});
      out << "wrote " << rows.size() << " rows to " << ex_out << "\n";
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const Error& e) {
    err << "error [" << error_code_name(e.code()) << "]: " << e.what() << "\n";
    return kDomainError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kDomainError;
  }
  return kOk;
}

}  // namespace lmdir::cli
