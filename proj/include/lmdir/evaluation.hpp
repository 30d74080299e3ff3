#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmdir/model.hpp"
#include "lmdir/prior.hpp"
#include "lmdir/training.hpp"

namespace lmdir::eval {

inline constexpr double kPsnrCap = 100.0;

// 10 log10(range^2 / MSE) over every element; identical inputs give the cap.
double psnr(const Tensor<float>& y, const Tensor<float>& g, double data_range = 1.0);
double psnr(const Tensor<double>& y, const Tensor<double>& g, double data_range = 1.0);
double psnr(const TensorImage& y, const TensorImage& g, double data_range = 1.0);

// Mean SSIM over the valid region of an 11x11 Gaussian window (sigma 1.5),
// K1 = 0.01, K2 = 0.03, population statistics, averaged over channels.
// Inputs are (H, W, C) with min(H, W) >= 11.
double ssim(const Tensor<float>& y, const Tensor<float>& g, double data_range = 1.0);
double ssim(const Tensor<double>& y, const Tensor<double>& g, double data_range = 1.0);
double ssim(const TensorImage& y, const TensorImage& g, double data_range = 1.0);

// --- reports ---------------------------------------------------------------------------

inline constexpr int kReportSchemaVersion = 1;
inline constexpr const char* kAverage = "Average";

struct ReportRow {
  std::string suite;
  // "model" for restored outputs, "input" for the degraded-input baseline.
  std::string method;
  std::string setting;
  double psnr = 0;
  double ssim = 0;
  int n_images = 0;

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

struct EvalReport {
  std::vector<ReportRow> rows;
  std::string model_id;
  std::string config_hash;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

nlohmann::json to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

// Fixed-width table: one line per (suite, method), one "PSNR / SSIM" column
// per setting, Average last.
std::string text_table(const EvalReport& report);

// <out>/report.json and <out>/report.txt.
void write_report(const EvalReport& report, const std::filesystem::path& out_dir);

// Appends an Average row per (suite, method) group: the unweighted mean over
// that group's setting rows.
void add_average_rows(EvalReport& report);

// --- benchmark runner ------------------------------------------------------------------

struct SuiteSpec {
  std::string name;
  // Dataset and degradation settings, read exactly as for training.
  train::TaskSpec data;
  std::uint64_t seed = 0;
};

// Noise levels seen in training (15, 25, 50) and unseen (60, 75).
SuiteSpec in_distribution_denoise_suite(const std::filesystem::path& dataset_root);
SuiteSpec ood_denoise_suite(const std::filesystem::path& dataset_root);

struct BundleSource {
  std::filesystem::path bundle_root;
  // Used for images without a cached bundle; null means MissingBundle.
  prior::PriorPipeline* pipeline = nullptr;
  std::int64_t seed = 0;
};

// Restores every full image of every setting and reports mean PSNR/SSIM per
// setting for the model and for the unrestored input, plus Average rows.
EvalReport run_suite(const Model& model, const SuiteSpec& suite, const BundleSource& bundles);

// Same, on already degraded samples grouped by setting.
EvalReport run_samples(const Model& model, const std::string& suite_name, const std::vector<train::Sample>& samples,
                       const BundleSource& bundles);

// --- embedding export ------------------------------------------------------------------

struct EmbeddingItem {
  TensorImage image;
  prior::PriorBundle bundle;
  std::string class_label;
};

struct EmbeddingRow {
  std::string image_id;
  std::string class_label;
  std::vector<float> e_d;         // token mean of the degradation text embedding
  std::vector<float> i_d;         // global image feature
  std::vector<float> z_d_pooled;  // token mean of the refined degradation tokens
};

std::vector<EmbeddingRow> export_embeddings(const Model& model, const std::vector<EmbeddingItem>& items);

// Mean silhouette coefficient under cosine distance. Points in singleton
// clusters contribute 0; fewer than two clusters gives 0.
double silhouette(const std::vector<std::vector<float>>& points, const std::vector<std::string>& labels);

// <out>/embeddings.f32 (rows of e_d | i_d | z_d_pooled, f32le) and
// <out>/embeddings.json (schema, widths, row metadata, silhouette scores).
void write_embeddings(const std::vector<EmbeddingRow>& rows, const std::filesystem::path& out_dir,
                      const nlohmann::json& extra_metadata = nlohmann::json::object());

}  // namespace lmdir::eval
