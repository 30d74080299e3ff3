#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "cli.hpp"
#include "lmdir/checkpoint.hpp"
#include "lmdir/evaluation.hpp"
#include "lmdir/training.hpp"
#include "support/fixtures.hpp"

namespace lmdir::cli {
namespace {

using testing::micro_config;
using testing::TempDir;

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

// Random weights so that instructions visibly change the output.
std::filesystem::path micro_checkpoint(const TempDir& dir) {
  Checkpoint ck{micro_config(), net::init_params<float>(micro_config(), 5), {}, {}};
  Rng rng(6);
  for (auto& [name, t] : ck.params)
    for (float& v : t.storage()) v = static_cast<float>(rng.uniform(-0.3, 0.3));
  const auto path = dir / "micro.ckpt";
  save_checkpoint(path, ck);
  return path;
}

class EnvGuard {
 public:
  EnvGuard(const char* name, const char* value) : name_(name) { setenv(name, value, 1); }
  ~EnvGuard() { unsetenv(name_); }

 private:
  const char* name_;
};

std::string slurp(const std::filesystem::path& p) {
  const auto bytes = read_file(p);
  return {bytes.begin(), bytes.end()};
}

TEST(Cli, NoSubcommandIsUsageError) {
  const Outcome r = run_cli({});
  EXPECT_EQ(r.code, kUsageError);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
}

TEST(Cli, UnknownFlagIsUsageError) {
  const Outcome r = run_cli({"restore", "--input", "a.png", "--output", "b.png", "--bogus"});
  EXPECT_EQ(r.code, kUsageError);
  EXPECT_NE(r.err.find("--bogus"), std::string::npos);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
}

TEST(Cli, HelpExitsZero) {
  const Outcome r = run_cli({"--help"});
  EXPECT_EQ(r.code, kOk);
  EXPECT_NE(r.out.find("export-embeddings"), std::string::npos);
}

TEST(Cli, MissingCheckpointNamesThePath) {
  TempDir dir;
  write_png(dir / "in.png", train::synthetic_scene(24, 1));
  const std::string missing = (dir / "nope.ckpt").string();
  const Outcome r = run_cli({"restore", "--input", (dir / "in.png").string(), "--output",
                             (dir / "out.png").string(), "--checkpoint", missing});
  EXPECT_EQ(r.code, kDomainError);
  EXPECT_NE(r.err.find(missing), std::string::npos);
}

TEST(Cli, NoCheckpointAtAllIsUsageError) {
  TempDir dir;
  const Outcome r = run_cli({"restore", "--input", "x.png", "--output", (dir / "out.png").string()});
  EXPECT_EQ(r.code, kUsageError);
}

TEST(Cli, EnvironmentOverridesTheCheckpointFlag) {
  TempDir dir;
  const auto ckpt = micro_checkpoint(dir);
  write_png(dir / "in.png", train::synthetic_scene(24, 1));
  const std::string missing = (dir / "from-env.ckpt").string();
  EnvGuard env("LMDIR_CHECKPOINT", missing.c_str());
  const Outcome r = run_cli({"restore", "--input", (dir / "in.png").string(), "--output",
                             (dir / "out.png").string(), "--checkpoint", ckpt.string()});
  EXPECT_EQ(r.code, kDomainError);
  EXPECT_NE(r.err.find(missing), std::string::npos);
}

TEST(Cli, ProviderModeFromEnvironment) {
  TempDir dir;
  write_png(dir / "in.png", train::synthetic_scene(24, 1));
  {
    EnvGuard env("LMDIR_PROVIDER_MODE", "sideways");
    EXPECT_EQ(run_cli({"prior-gen", "--input", (dir / "in.png").string(), "--bundle-root", dir.path().string()}).code,
              kUsageError);
  }
  {
    EnvGuard env("LMDIR_PROVIDER_MODE", "live");
    const Outcome r =
        run_cli({"prior-gen", "--input", (dir / "in.png").string(), "--bundle-root", dir.path().string()});
    EXPECT_EQ(r.code, kDomainError);
    EXPECT_NE(r.err.find("InvalidConfig"), std::string::npos);
  }
}

TEST(Cli, ProviderConfigFromJson) {
  const prior::ProviderConfig c = provider_config_from_json(
      {{"mllm_endpoint", "http://a"}, {"max_parallel_requests", 2}, {"retry", {{"max_attempts", 5}}}});
  EXPECT_EQ(c.mllm_endpoint, "http://a");
  EXPECT_EQ(c.text_encoder_endpoint, prior::kFixture);
  EXPECT_EQ(c.max_parallel_requests, 2);
  EXPECT_EQ(c.retry.max_attempts, 5);
  EXPECT_EQ(c.retry.backoff_base_ms, 200);
  EXPECT_THROW(provider_config_from_json({{"max_parallel_requests", 0}}), Error);
}

TEST(Cli, RestoreAutoGuidedAndGroundTruth) {
  TempDir dir;
  const auto ckpt = micro_checkpoint(dir);
  const TensorImage clean = train::synthetic_scene(24, 1);
  Rng rng(3);
  write_png(dir / "clean.png", clean);
  write_png(dir / "in.png", train::add_gaussian_noise(clean, 25, rng));
  const std::vector<std::string> base = {"restore", "--input", (dir / "in.png").string(), "--checkpoint",
                                         ckpt.string(), "--bundle-root", (dir / "bundles").string()};
  auto with = [&](std::vector<std::string> extra) {
    std::vector<std::string> a = base;
    a.insert(a.end(), extra.begin(), extra.end());
    return a;
  };

  const Outcome a = run_cli(with({"--output", (dir / "auto.png").string()}));
  ASSERT_EQ(a.code, kOk) << a.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "auto.png"));

  const prior::PriorBundle bundle = prior::load_bundle(dir / "bundles", prior::image_id(read_image(dir / "in.png")));
  const Outcome same = run_cli(with({"--output", (dir / "same.png").string(), "--instruction",
                                     bundle.texts.degradation_text}));
  ASSERT_EQ(same.code, kOk) << same.err;
  EXPECT_EQ(slurp(dir / "auto.png"), slurp(dir / "same.png"));

  const Outcome g = run_cli(with({"--output", (dir / "guided.png").string(), "--instruction", "remove the noise",
                                  "--ground-truth", (dir / "clean.png").string()}));
  ASSERT_EQ(g.code, kOk) << g.err;
  EXPECT_NE(slurp(dir / "auto.png"), slurp(dir / "guided.png"));
  EXPECT_NE(g.out.find("PSNR"), std::string::npos);
  EXPECT_NE(g.out.find("gain"), std::string::npos);
}

TEST(Cli, RestoreRejectsTheWrongProfile) {
  TempDir dir;
  const auto ckpt = micro_checkpoint(dir);
  write_png(dir / "in.png", train::synthetic_scene(24, 1));
  const Outcome r = run_cli({"restore", "--input", (dir / "in.png").string(), "--output",
                             (dir / "out.png").string(), "--checkpoint", ckpt.string(), "--profile", "desk"});
  EXPECT_EQ(r.code, kDomainError);
  EXPECT_NE(r.err.find("InvalidConfig"), std::string::npos);
}

TEST(Cli, PriorGenBuildsBundlesForADirectory) {
  TempDir dir;
  std::filesystem::create_directories(dir / "imgs");
  write_png(dir / "imgs" / "a.png", train::synthetic_scene(24, 1));
  write_png(dir / "imgs" / "b.png", train::synthetic_scene(24, 2));
  const Outcome r = run_cli({"prior-gen", "--input", (dir / "imgs").string(), "--bundle-root",
                             (dir / "bundles").string()});
  ASSERT_EQ(r.code, kOk) << r.err;
  EXPECT_TRUE(prior::bundle_exists(dir / "bundles", prior::image_id(read_image(dir / "imgs" / "a.png"))));
  EXPECT_TRUE(prior::bundle_exists(dir / "bundles", prior::image_id(read_image(dir / "imgs" / "b.png"))));
}

TEST(Cli, EvalWritesReportWithAverages) {
  TempDir dir;
  const auto ckpt = micro_checkpoint(dir);
  const Outcome r = run_cli({"eval", "--checkpoint", ckpt.string(), "--data-root", (dir / "data").string(), "--out",
                             (dir / "report").string(), "--suite", "ood", "--synthetic", "2"});
  ASSERT_EQ(r.code, kOk) << r.err;
  const auto j = nlohmann::json::parse(slurp(dir / "report" / "report.json"));
  const eval::EvalReport report = eval::report_from_json(j);
  EXPECT_EQ(report.rows.size(), 6u);
  EXPECT_EQ(slurp(dir / "report" / "report.txt"), r.out);
  EXPECT_NE(r.out.find("sigma=75"), std::string::npos);
}

TEST(Cli, EvalOnEmptyDataIsADomainError) {
  TempDir dir;
  const auto ckpt = micro_checkpoint(dir);
  std::filesystem::create_directories(dir / "data" / "denoise" / "clean");
  const Outcome r = run_cli({"eval", "--checkpoint", ckpt.string(), "--data-root", (dir / "data").string(), "--out",
                             (dir / "report").string()});
  EXPECT_EQ(r.code, kDomainError);
  EXPECT_NE(r.err.find("DatasetEmpty"), std::string::npos);
}

TEST(Cli, ExportEmbeddingsCoversThreeClasses) {
  TempDir dir;
  const auto ckpt = micro_checkpoint(dir);
  const Outcome r = run_cli({"export-embeddings", "--checkpoint", ckpt.string(), "--data-root",
                             (dir / "data").string(), "--out", (dir / "emb").string(), "--synthetic", "2"});
  ASSERT_EQ(r.code, kOk) << r.err;
  const auto meta = nlohmann::json::parse(slurp(dir / "emb" / "embeddings.json"));
  // 2 images x (3 noise levels + 1 rain + 1 low light).
  EXPECT_EQ(meta["rows"].size(), 10u);
  EXPECT_TRUE(meta["silhouette_cosine"].contains("z_d_pooled"));
  EXPECT_TRUE(meta.contains("model_id"));
}

TEST(Cli, TrainWritesCheckpointAndLog) {
  TempDir dir;
  const Outcome r = run_cli({"train", "--profile", "desk", "--data-root", (dir / "data").string(), "--out",
                             (dir / "run").string(), "--tasks", "denoise", "--iters", "2", "--synthetic", "2"});
  ASSERT_EQ(r.code, kOk) << r.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "run" / "checkpoint.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "run" / "train.jsonl"));
  EXPECT_EQ(load_checkpoint(dir / "run" / "checkpoint.ckpt").config, net::tiny_config());
}

TEST(Cli, ServeRejectsAMissingUiDirectory) {
  TempDir dir;
  const auto ckpt = micro_checkpoint(dir);
  const Outcome r = run_cli({"serve", "--checkpoint", ckpt.string(), "--ui", (dir / "nope").string(), "--port", "0"});
  EXPECT_EQ(r.code, kDomainError);
}

}  // namespace
}  // namespace lmdir::cli
