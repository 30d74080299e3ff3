#include "lmdir/evaluation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "lmdir/hash.hpp"
#include "lmdir/log.hpp"
#include "lmdir/serialize.hpp"

namespace lmdir::eval {
namespace fs = std::filesystem;

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kK1 = 0.01;
constexpr double kK2 = 0.03;

std::array<double, kWindow> gaussian_window() {
  std::array<double, kWindow> w{};
  double sum = 0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kWindow / 2;
    w[i] = std::exp(-d * d / (2 * kSigma * kSigma));
    sum += w[i];
  }
  for (double& v : w) v /= sum;
  return w;
}

template <typename T>
void require_same(const Tensor<T>& y, const Tensor<T>& g, const char* what) {
  if (y.shape() != g.shape()) {
    throw Error(ErrorCode::ShapeMismatch,
                std::string(what) + ": " + shape_string(y.shape()) + " vs " + shape_string(g.shape()));
  }
}

// Valid-region separable Gaussian filter of one channel plane.
std::vector<double> filter_valid(const std::vector<double>& plane, std::int64_t h, std::int64_t w,
                                 const std::array<double, kWindow>& k) {
  const std::int64_t ow = w - kWindow + 1, oh = h - kWindow + 1;
  std::vector<double> rows(static_cast<std::size_t>(h * ow));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < ow; ++x) {
      double s = 0;
      for (int i = 0; i < kWindow; ++i) s += k[i] * plane[y * w + x + i];
      rows[y * ow + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(oh * ow));
  for (std::int64_t y = 0; y < oh; ++y)
    for (std::int64_t x = 0; x < ow; ++x) {
      double s = 0;
      for (int i = 0; i < kWindow; ++i) s += k[i] * rows[(y + i) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string format_cell(double psnr, double ssim) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f / %.4f", psnr, ssim);
  return buf;
}

template <typename T>
double psnr_impl(const Tensor<T>& y, const Tensor<T>& g, double data_range) {
  require_same(y, g, "psnr");
  if (y.empty()) throw Error(ErrorCode::InvalidArgument, "psnr of empty tensors");
  if (!(data_range > 0)) throw Error(ErrorCode::InvalidArgument, "psnr data_range must be positive");
  double se = 0;
  for (std::int64_t i = 0; i < y.size(); ++i) {
    const double d = static_cast<double>(y[i]) - static_cast<double>(g[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(y.size());
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(data_range * data_range / mse));
}

template <typename T>
double ssim_impl(const Tensor<T>& y, const Tensor<T>& g, double data_range) {
  require_same(y, g, "ssim");
  require_rank(y.shape(), 3, "ssim input");
  const std::int64_t h = y.dim(0), w = y.dim(1), ch = y.dim(2);
  if (std::min(h, w) < kWindow) {
    throw Error(ErrorCode::ImageTooSmall, "ssim needs at least 11x11 pixels, got " + shape_string(y.shape()));
  }
  if (!(data_range > 0)) throw Error(ErrorCode::InvalidArgument, "ssim data_range must be positive");
  const auto k = gaussian_window();
  const double c1 = (kK1 * data_range) * (kK1 * data_range);
  const double c2 = (kK2 * data_range) * (kK2 * data_range);
  const std::size_t n = static_cast<std::size_t>(h * w);

  double total = 0;
  std::vector<double> a(n), b(n), aa(n), bb(n), ab(n);
  for (std::int64_t c = 0; c < ch; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = y[static_cast<std::int64_t>(i) * ch + c];
      b[i] = g[static_cast<std::int64_t>(i) * ch + c];
      aa[i] = a[i] * a[i];
      bb[i] = b[i] * b[i];
      ab[i] = a[i] * b[i];
    }
    const auto mu_a = filter_valid(a, h, w, k), mu_b = filter_valid(b, h, w, k);
    const auto e_aa = filter_valid(aa, h, w, k), e_bb = filter_valid(bb, h, w, k), e_ab = filter_valid(ab, h, w, k);
    double sum = 0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
      const double va = e_aa[i] - mu_a[i] * mu_a[i];
      const double vb = e_bb[i] - mu_b[i] * mu_b[i];
      const double cov = e_ab[i] - mu_a[i] * mu_b[i];
      sum += ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
             ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
    }
    total += sum / static_cast<double>(mu_a.size());
  }
  return total / static_cast<double>(ch);
}

}  // namespace

double psnr(const Tensor<float>& y, const Tensor<float>& g, double data_range) {
  return psnr_impl(y, g, data_range);
}

double psnr(const Tensor<double>& y, const Tensor<double>& g, double data_range) {
  return psnr_impl(y, g, data_range);
}

double ssim(const Tensor<float>& y, const Tensor<float>& g, double data_range) {
  return ssim_impl(y, g, data_range);
}

double ssim(const Tensor<double>& y, const Tensor<double>& g, double data_range) {
  return ssim_impl(y, g, data_range);
}

double psnr(const TensorImage& y, const TensorImage& g, double data_range) {
  return psnr(y.pixels(), g.pixels(), data_range);
}

double ssim(const TensorImage& y, const TensorImage& g, double data_range) {
  return ssim(y.pixels(), g.pixels(), data_range);
}

// --- reports ---------------------------------------------------------------------------

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"suite", r.suite},
                    {"method", r.method},
                    {"setting", r.setting},
                    {"psnr", r.psnr},
                    {"ssim", r.ssim},
                    {"n_images", r.n_images}});
  }
  return {{"schema_version", kReportSchemaVersion},
          {"model_id", report.model_id},
          {"config_hash", report.config_hash},
          {"metric_space", "rgb"},
          {"rows", rows}};
}

EvalReport report_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema_version").get<int>() != kReportSchemaVersion) {
      throw Error(ErrorCode::InvalidArgument, "unsupported report schema version");
    }
    EvalReport report;
    report.model_id = j.at("model_id").get<std::string>();
    report.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& r : j.at("rows")) {
      report.rows.push_back(ReportRow{r.at("suite").get<std::string>(), r.at("method").get<std::string>(),
                                      r.at("setting").get<std::string>(), r.at("psnr").get<double>(),
                                      r.at("ssim").get<double>(), r.at("n_images").get<int>()});
    }
    return report;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("malformed report: ") + e.what());
  }
}

std::string text_table(const EvalReport& report) {
  // Settings per suite in first-appearance order, Average moved last.
  std::vector<std::string> suites;
  std::map<std::string, std::vector<std::string>> settings;
  std::vector<std::pair<std::string, std::string>> groups;
  for (const auto& r : report.rows) {
    if (std::find(suites.begin(), suites.end(), r.suite) == suites.end()) suites.push_back(r.suite);
    auto& s = settings[r.suite];
    if (r.setting != kAverage && std::find(s.begin(), s.end(), r.setting) == s.end()) s.push_back(r.setting);
    const std::pair<std::string, std::string> key{r.suite, r.method};
    if (std::find(groups.begin(), groups.end(), key) == groups.end()) groups.push_back(key);
  }
  for (auto& [_, s] : settings) s.push_back(kAverage);

  auto find = [&](const std::string& suite, const std::string& method, const std::string& setting) {
    return std::find_if(report.rows.begin(), report.rows.end(), [&](const ReportRow& r) {
      return r.suite == suite && r.method == method && r.setting == setting;
    });
  };

  constexpr int kName = 24, kCell = 18;
  std::ostringstream out;
  out << "model " << report.model_id << "  config " << report.config_hash << "  (PSNR dB / SSIM, RGB)\n";
  for (const auto& suite : suites) {
    out << '\n';
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-*s", kName, suite.c_str());
    out << buf;
    for (const auto& s : settings[suite]) {
      std::snprintf(buf, sizeof buf, "%*s", kCell, s.c_str());
      out << buf;
    }
    out << '\n';
    for (const auto& [g_suite, method] : groups) {
      if (g_suite != suite) continue;
      std::snprintf(buf, sizeof buf, "%-*s", kName, method.c_str());
      out << buf;
      for (const auto& s : settings[suite]) {
        const auto it = find(suite, method, s);
        const std::string cell = it == report.rows.end() ? "-" : format_cell(it->psnr, it->ssim);
        std::snprintf(buf, sizeof buf, "%*s", kCell, cell.c_str());
        out << buf;
      }
      out << '\n';
    }
  }
  return out.str();
}

void write_report(const EvalReport& report, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const std::string json = to_json(report).dump(2) + "\n";
  const std::string table = text_table(report);
  write_file_atomic(out_dir / "report.json", std::span(reinterpret_cast<const std::uint8_t*>(json.data()), json.size()));
  write_file_atomic(out_dir / "report.txt",
                    std::span(reinterpret_cast<const std::uint8_t*>(table.data()), table.size()));
}

void add_average_rows(EvalReport& report) {
  std::vector<ReportRow> averages;
  for (const auto& r : report.rows) {
    if (r.setting == kAverage) continue;
    auto it = std::find_if(averages.begin(), averages.end(),
                           [&](const ReportRow& a) { return a.suite == r.suite && a.method == r.method; });
    if (it == averages.end()) {
      averages.push_back(ReportRow{r.suite, r.method, kAverage, 0, 0, 0});
      it = averages.end() - 1;
    }
    it->psnr += r.psnr;
    it->ssim += r.ssim;
    it->n_images += 1;  // number of settings until the division below
  }
  for (auto& a : averages) {
    const int settings = a.n_images;
    a.psnr /= settings;
    a.ssim /= settings;
    a.n_images = 0;
    for (const auto& r : report.rows)
      if (r.suite == a.suite && r.method == a.method && r.setting != kAverage) a.n_images += r.n_images;
    report.rows.push_back(a);
  }
}

// --- benchmark runner ------------------------------------------------------------------

SuiteSpec in_distribution_denoise_suite(const fs::path& dataset_root) {
  SuiteSpec s;
  s.name = "denoise";
  s.data = train::default_task(train::TaskId::Denoise, dataset_root);
  s.data.degradation_params = {{"sigma", {15, 25, 50}}};
  return s;
}

SuiteSpec ood_denoise_suite(const fs::path& dataset_root) {
  SuiteSpec s;
  s.name = "denoise-ood";
  s.data = train::default_task(train::TaskId::Denoise, dataset_root);
  s.data.degradation_params = {{"sigma", {60, 75}}};
  return s;
}

namespace {

prior::PriorBundle bundle_for(const train::Sample& sample, const BundleSource& source) {
  if (source.pipeline) return source.pipeline->build_bundle(sample.degraded, source.seed, source.bundle_root);
  if (!source.bundle_root.empty() && prior::bundle_exists(source.bundle_root, sample.image_id)) {
    return prior::load_bundle(source.bundle_root, sample.image_id);
  }
  throw Error(ErrorCode::MissingBundle, "no prior bundle for " + sample.name + " (" + sample.setting +
                                            "), image " + sample.image_id);
}

}  // namespace

EvalReport run_samples(const Model& model, const std::string& suite_name, const std::vector<train::Sample>& samples,
                       const BundleSource& bundles) {
  if (samples.empty()) throw Error(ErrorCode::DatasetEmpty, "suite " + suite_name + " has no images");
  std::vector<std::string> order;
  std::map<std::string, std::vector<double>> model_psnr, model_ssim, input_psnr, input_ssim;
  for (const auto& s : samples) {
    if (std::find(order.begin(), order.end(), s.setting) == order.end()) order.push_back(s.setting);
    const prior::PriorBundle bundle = bundle_for(s, bundles);
    const TensorImage restored = restore_auto(model, s.degraded, bundle);
    model_psnr[s.setting].push_back(psnr(restored, s.clean));
    model_ssim[s.setting].push_back(ssim(restored, s.clean));
    input_psnr[s.setting].push_back(psnr(s.degraded, s.clean));
    input_ssim[s.setting].push_back(ssim(s.degraded, s.clean));
  }
  EvalReport report;
  report.model_id = model.id;
  report.config_hash = net::config_hash(model.config);
  for (const char* method : {"model", "input"}) {
    const bool m = std::string(method) == "model";
    for (const auto& setting : order) {
      const auto& p = (m ? model_psnr : input_psnr)[setting];
      const auto& q = (m ? model_ssim : input_ssim)[setting];
      report.rows.push_back(ReportRow{suite_name, method, setting, mean(p), mean(q), static_cast<int>(p.size())});
    }
  }
  add_average_rows(report);
  return report;
}

EvalReport run_suite(const Model& model, const SuiteSpec& suite, const BundleSource& bundles) {
  const train::TaskData data = train::load_task(suite.data, suite.seed);
  log(LogLevel::Info, "evaluating " + suite.name + " on " + std::to_string(data.samples.size()) + " images");
  return run_samples(model, suite.name, data.samples, bundles);
}

// --- embedding export ------------------------------------------------------------------

namespace {

// Mean over every axis but the last.
std::vector<float> token_mean(const Tensor<float>& t) {
  const std::int64_t c = t.dim(-1), n = t.size() / c;
  std::vector<double> acc(static_cast<std::size_t>(c), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < c; ++j) acc[j] += t[i * c + j];
  std::vector<float> out(acc.size());
  for (std::size_t j = 0; j < acc.size(); ++j) out[j] = static_cast<float>(acc[j] / static_cast<double>(n));
  return out;
}

double cosine_distance(const std::vector<float>& a, const std::vector<float>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0 || nb == 0) return 1.0;
  return 1.0 - dot / std::sqrt(na * nb);
}

}  // namespace

std::vector<EmbeddingRow> export_embeddings(const Model& model, const std::vector<EmbeddingItem>& items) {
  std::vector<EmbeddingRow> rows;
  rows.reserve(items.size());
  for (const auto& item : items) {
    Graph<float> graph(false);
    ParamBinding<float> binding(graph, model.params, false);
    Var<float> z_d, i_d;
    net::restore_graph(Scope<float>(binding), model.config, item.image.pixels(), item.bundle.e_d.tokens,
                       item.bundle.e_c.tokens, item.bundle.reference.pixels(), &z_d, &i_d);
    rows.push_back(EmbeddingRow{prior::image_id(item.image), item.class_label, token_mean(item.bundle.e_d.tokens),
                                i_d.value().storage(), token_mean(z_d.value())});
  }
  return rows;
}

double silhouette(const std::vector<std::vector<float>>& points, const std::vector<std::string>& labels) {
  if (points.size() != labels.size()) throw Error(ErrorCode::InvalidArgument, "silhouette: points/labels differ");
  std::map<std::string, int> sizes;
  for (const auto& l : labels) ++sizes[l];
  if (sizes.size() < 2) return 0.0;
  const std::size_t n = points.size();
  std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) d[i][j] = d[j][i] = cosine_distance(points[i], points[j]);

  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (sizes[labels[i]] < 2) continue;
    std::map<std::string, double> sums;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) sums[labels[j]] += d[i][j];
    const double a = sums[labels[i]] / (sizes[labels[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [label, sum] : sums)
      if (label != labels[i]) b = std::min(b, sum / sizes[label]);
    const double denom = std::max(a, b);
    total += denom > 0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

void write_embeddings(const std::vector<EmbeddingRow>& rows, const fs::path& out_dir,
                      const nlohmann::json& extra_metadata) {
  fs::create_directories(out_dir);
  const std::size_t we = rows.empty() ? 0 : rows[0].e_d.size();
  const std::size_t wi = rows.empty() ? 0 : rows[0].i_d.size();
  const std::size_t wz = rows.empty() ? 0 : rows[0].z_d_pooled.size();

  std::vector<float> flat;
  nlohmann::json meta_rows = nlohmann::json::array();
  std::vector<std::vector<float>> e_d, i_d, z_d;
  std::vector<std::string> labels;
  for (const auto& r : rows) {
    if (r.e_d.size() != we || r.i_d.size() != wi || r.z_d_pooled.size() != wz) {
      throw Error(ErrorCode::ShapeMismatch, "embedding rows have different widths");
    }
    flat.insert(flat.end(), r.e_d.begin(), r.e_d.end());
    flat.insert(flat.end(), r.i_d.begin(), r.i_d.end());
    flat.insert(flat.end(), r.z_d_pooled.begin(), r.z_d_pooled.end());
    meta_rows.push_back({{"image_id", r.image_id}, {"class_label", r.class_label}});
    e_d.push_back(r.e_d);
    i_d.push_back(r.i_d);
    z_d.push_back(r.z_d_pooled);
    labels.push_back(r.class_label);
  }
  const auto bytes = to_f32le(Tensor<float>(Shape{static_cast<std::int64_t>(rows.size()),
                                                  static_cast<std::int64_t>(we + wi + wz)},
                                            std::move(flat)));
  nlohmann::json meta = extra_metadata;
  meta["schema_version"] = 1;
  meta["file"] = "embeddings.f32";
  meta["dtype"] = "f32le";
  meta["layout"] = {{"e_d", {0, we}}, {"i_d", {we, wi}}, {"z_d_pooled", {we + wi, wz}}};
  meta["sha256"] = sha256_hex(std::span<const std::uint8_t>(bytes));
  meta["rows"] = meta_rows;
  meta["silhouette_cosine"] = {{"e_d", silhouette(e_d, labels)},
                               {"i_d", silhouette(i_d, labels)},
                               {"z_d_pooled", silhouette(z_d, labels)}};
  const std::string json = meta.dump(2) + "\n";
  write_file_atomic(out_dir / "embeddings.f32", bytes);
  write_file_atomic(out_dir / "embeddings.json",
                    std::span(reinterpret_cast<const std::uint8_t*>(json.data()), json.size()));
}

}  // namespace lmdir::eval
