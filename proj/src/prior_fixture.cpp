#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>

#include <json.hpp>

#include "lmdir/hash.hpp"
#include "lmdir/prior.hpp"
#include "lmdir/random.hpp"

namespace lmdir::prior {

namespace {

std::vector<std::string> words_of(const std::string& text) {
  std::vector<std::string> words;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      current += static_cast<char>(std::tolower(c));
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

void fill_normal(float* dst, std::int64_t n, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (std::int64_t i = 0; i < n; ++i) dst[i] = static_cast<float>(rng.normal() * scale);
}

// Mean absolute deviation of each pixel from the mean of its 4 neighbours,
// scaled so that i.i.d. Gaussian noise of std s reads as roughly s.
double noise_estimate(const TensorImage& image) {
  const std::int64_t h = image.height(), w = image.width();
  if (h < 3 || w < 3) return 0;
  double sum = 0;
  std::int64_t n = 0;
  for (std::int64_t y = 1; y + 1 < h; ++y)
    for (std::int64_t x = 1; x + 1 < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double r = image.at(y, x, c) - 0.25 * (image.at(y - 1, x, c) + image.at(y + 1, x, c) +
                                                      image.at(y, x - 1, c) + image.at(y, x + 1, c));
        sum += std::abs(r);
        ++n;
      }
  // E|r| = sqrt(2/pi) * s * sqrt(1 + 4/16) for white noise of std s.
  return sum / static_cast<double>(n) / (std::sqrt(2.0 / M_PI) * std::sqrt(1.25));
}

std::string dominant_tone(const TensorImage& image) {
  std::array<double, 3> mean{};
  const auto px = image.pixels().values();
  for (std::size_t i = 0; i < px.size(); ++i) mean[i % 3] += px[i];
  for (double& m : mean) m /= static_cast<double>(px.size() / 3);
  const double spread = *std::max_element(mean.begin(), mean.end()) - *std::min_element(mean.begin(), mean.end());
  if (spread < 0.04) return "neutral gray";
  static const char* kNames[3] = {"warm red", "green", "cool blue"};
  return kNames[std::max_element(mean.begin(), mean.end()) - mean.begin()];
}

}  // namespace

// --- language model ------------------------------------------------------------

FixtureMllm::FixtureMllm(std::map<std::string, FixtureTexts> table) : table_(std::move(table)) {}

std::map<std::string, FixtureTexts> FixtureMllm::load_table(const std::filesystem::path& path) {
  std::map<std::string, FixtureTexts> table;
  try {
    const std::vector<std::uint8_t> bytes = read_file(path);
    const nlohmann::json j = nlohmann::json::parse(bytes.begin(), bytes.end());
    for (const auto& [id, entry] : j.items()) {
      table[id] = FixtureTexts{entry.at("degradation_text").get<std::string>(),
                               entry.at("content_text").get<std::string>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, "fixture table " + path.string() + ": " + e.what());
  }
  return table;
}

void FixtureMllm::add(const std::string& image_id, FixtureTexts texts) {
  std::lock_guard lock(mutex_);
  table_[image_id] = std::move(texts);
}

std::string FixtureMllm::describe(const MllmRequest& request) {
  const bool degradation = request.prompt == kDegradationPrompt;
  if (!degradation && request.prompt != kContentPrompt) {
    throw Error(ErrorCode::MalformedResponse, "fixture language model only answers the two fixed templates");
  }
  {
    std::lock_guard lock(mutex_);
    auto it = table_.find(request.image_id);
    if (it != table_.end()) return degradation ? it->second.degradation_text : it->second.content_text;
  }
  const TensorImage& image = request.image;
  if (degradation) {
    std::vector<std::string> parts;
    const double sigma = noise_estimate(image) * 255.0;
    if (sigma > 30) {
      parts.emplace_back("heavy gaussian noise");
    } else if (sigma > 8) {
      parts.emplace_back("gaussian noise");
    }
    double mean = 0;
    for (float v : image.pixels().values()) mean += v;
    mean /= static_cast<double>(image.pixels().size());
    if (mean < 0.25) parts.emplace_back("low light");
    if (parts.empty()) parts.emplace_back("slight blur");
    std::string out = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) out += ", " + parts[i];
    return out;
  }
  return "a scene dominated by " + dominant_tone(image) + " tones";
}

// --- text encoder ----------------------------------------------------------------

std::string FixtureTextEncoder::id() const {
  return "fixture-clip-" + std::to_string(tokens_) + "x" + std::to_string(channels_) + "-v1";
}

Tensor<float> FixtureTextEncoder::encode(const std::string& text) {
  if (text.empty()) throw Error(ErrorCode::InvalidArgument, "cannot encode empty text");
  const std::int64_t n = tokens_, c = channels_;
  std::vector<std::string> words = words_of(text);
  if (words.empty()) words.push_back(text);
  if (static_cast<std::int64_t>(words.size()) > n - 2) words.resize(static_cast<std::size_t>(n - 2));

  std::vector<float> word(static_cast<std::size_t>(c)), mean(static_cast<std::size_t>(c), 0.0f);
  Tensor<float> out(Shape{n, c});
  auto put = [&](std::int64_t pos, const std::vector<float>& v) {
    std::vector<float> code(static_cast<std::size_t>(c));
    fill_normal(code.data(), c, fnv1a64("pos:" + std::to_string(pos)), 0.05);
    for (std::int64_t j = 0; j < c; ++j) out[pos * c + j] = v[j] + code[j];
  };
  fill_normal(word.data(), c, fnv1a64("word:<bos>"), 0.5);
  put(0, word);
  for (std::size_t i = 0; i < words.size(); ++i) {
    fill_normal(word.data(), c, fnv1a64("word:" + words[i]), 0.5);
    for (std::int64_t j = 0; j < c; ++j) mean[j] += word[j] / static_cast<float>(words.size());
    put(static_cast<std::int64_t>(i) + 1, word);
  }
  for (std::int64_t pos = static_cast<std::int64_t>(words.size()) + 1; pos < n; ++pos) put(pos, mean);
  return out;
}

// --- diffusion -------------------------------------------------------------------

TensorImage FixtureDiffusion::generate(const DiffusionRequest& request) {
  Rng rng(fnv1a64(request.prompt) ^ (static_cast<std::uint64_t>(request.seed) * 0x9E3779B97F4A7C15ULL));
  const std::int64_t s = size_;
  std::array<double, 3> base{};
  for (double& b : base) b = rng.uniform(0.25, 0.75);
  Tensor<float> px(Shape{s, s, 3});
  std::vector<double> acc(static_cast<std::size_t>(s * s * 3));
  for (std::int64_t i = 0; i < s * s * 3; ++i) acc[i] = base[i % 3];
  // Sum of oriented sinusoids; sin(a + b) is expanded so each term costs one
  // multiply-add per pixel using per-row and per-column tables.
  std::vector<double> sy(static_cast<std::size_t>(s)), cy(static_cast<std::size_t>(s)), sx(static_cast<std::size_t>(s)),
      cx(static_cast<std::size_t>(s));
  for (int k = 0; k < 8; ++k) {
    const double fy = rng.uniform(0.5, 8.0) * 2 * M_PI / static_cast<double>(s);
    const double fx = rng.uniform(0.5, 8.0) * 2 * M_PI / static_cast<double>(s);
    const double phase = rng.uniform(0, 2 * M_PI);
    std::array<double, 3> amp{};
    for (double& a : amp) a = rng.uniform(-0.12, 0.12);
    for (std::int64_t i = 0; i < s; ++i) {
      sy[i] = std::sin(fy * static_cast<double>(i) + phase);
      cy[i] = std::cos(fy * static_cast<double>(i) + phase);
      sx[i] = std::sin(fx * static_cast<double>(i));
      cx[i] = std::cos(fx * static_cast<double>(i));
    }
    for (std::int64_t y = 0; y < s; ++y)
      for (std::int64_t x = 0; x < s; ++x) {
        const double v = sy[y] * cx[x] + cy[y] * sx[x];
        double* dst = acc.data() + (y * s + x) * 3;
        for (int c = 0; c < 3; ++c) dst[c] += amp[c] * v;
      }
  }
  for (std::int64_t i = 0; i < s * s * 3; ++i) px[i] = static_cast<float>(std::clamp(acc[i], 0.0, 1.0));
  return quantize_8bit(TensorImage(std::move(px)));
}

// --- image encoder ---------------------------------------------------------------

std::vector<float> FixtureImageEncoder::embed(const TensorImage& image) {
  constexpr int kGrid = 8;
  std::vector<float> out(kGrid * kGrid * 3, 0.0f);
  const std::int64_t h = image.height(), w = image.width();
  for (int gy = 0; gy < kGrid; ++gy)
    for (int gx = 0; gx < kGrid; ++gx) {
      const std::int64_t y0 = gy * h / kGrid, y1 = std::max(y0 + 1, (gy + 1) * h / kGrid);
      const std::int64_t x0 = gx * w / kGrid, x1 = std::max(x0 + 1, (gx + 1) * w / kGrid);
      for (int c = 0; c < 3; ++c) {
        double sum = 0;
        for (std::int64_t y = y0; y < std::min(y1, h); ++y)
          for (std::int64_t x = x0; x < std::min(x1, w); ++x) sum += image.at(y, x, c);
        out[(gy * kGrid + gx) * 3 + c] =
            static_cast<float>(sum / static_cast<double>((std::min(y1, h) - y0) * (std::min(x1, w) - x0)));
      }
    }
  return out;
}

}  // namespace lmdir::prior
