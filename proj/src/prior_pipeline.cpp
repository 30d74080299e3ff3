#include <algorithm>
#include <chrono>
#include <cmath>
#include <thread>

#include "lmdir/hash.hpp"
#include "lmdir/log.hpp"
#include "lmdir/prior.hpp"
#include "lmdir/serialize.hpp"

namespace lmdir::prior {

namespace fs = std::filesystem;

namespace {

bool is_fixture(const std::string& endpoint) { return endpoint == kFixture; }

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

// Words that may only ever appear in one of the two fixture texts.
const std::vector<std::string> kDegradationSentinels{"noise", "noisy", "rain", "haze", "hazy", "blur",
                                                     "low light", "low-light", "snow", "jpeg"};
const std::vector<std::string> kContentSentinels{"scene"};

void check_sentinels(const PriorTexts& texts) {
  const std::string d = lower(texts.degradation_text), c = lower(texts.content_text);
  for (const auto& word : kDegradationSentinels) {
    if (c.find(word) != std::string::npos) {
      throw Error(ErrorCode::MalformedResponse, "content text mentions degradation '" + word + "': " + texts.content_text);
    }
  }
  for (const auto& word : kContentSentinels) {
    if (d.find(word) != std::string::npos) {
      throw Error(ErrorCode::MalformedResponse,
                  "degradation text mentions content '" + word + "': " + texts.degradation_text);
    }
  }
}

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::EmbeddingShapeMismatch, "image embeddings of different length: " + std::to_string(a.size()) +
                                                       " vs " + std::to_string(b.size()));
  }
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0 || nb == 0) return 0;
  return dot / std::sqrt(na * nb);
}

}  // namespace

void validate(const ProviderConfig& c) {
  auto bad = [](const std::string& what) { throw Error(ErrorCode::InvalidConfig, what); };
  for (const auto* endpoint : {&c.mllm_endpoint, &c.text_encoder_endpoint, &c.diffusion_endpoint, &c.image_encoder_endpoint}) {
    if (endpoint->empty()) bad("provider endpoints must be a URL or 'fixture'");
  }
  if (c.max_parallel_requests < 1) bad("max_parallel_requests must be at least 1");
  if (c.diffusion_steps < 1) bad("diffusion_steps must be at least 1");
  if (c.retry.max_attempts < 1) bad("retry.max_attempts must be at least 1");
  if (c.retry.backoff_base_ms < 0) bad("retry.backoff_base_ms must be non-negative");
  if (c.reference_size < 16) bad("reference_size must be at least 16");
}

std::string image_id(const TensorImage& image) {
  const std::string header =
      std::to_string(image.height()) + "x" + std::to_string(image.width()) + "x3\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  const std::vector<std::uint8_t> px = to_f32le(image.pixels());
  bytes.insert(bytes.end(), px.begin(), px.end());
  return sha256_hex(bytes);
}

Providers make_providers(const ProviderConfig& config) {
  validate(config);
  Providers p;
  if (is_fixture(config.mllm_endpoint)) {
    p.mllm = std::make_shared<FixtureMllm>(config.fixture_table.empty() ? std::map<std::string, FixtureTexts>{}
                                                                        : FixtureMllm::load_table(config.fixture_table));
  } else {
    p.mllm = std::make_shared<HttpMllm>(config.mllm_endpoint);
  }
  if (is_fixture(config.text_encoder_endpoint)) {
    p.text_encoder = std::make_shared<FixtureTextEncoder>();
  } else {
    p.text_encoder = std::make_shared<HttpTextEncoder>(config.text_encoder_endpoint);
  }
  if (is_fixture(config.diffusion_endpoint)) {
    p.diffusion = std::make_shared<FixtureDiffusion>(config.reference_size);
  } else {
    p.diffusion = std::make_shared<HttpDiffusion>(config.diffusion_endpoint);
  }
  if (is_fixture(config.image_encoder_endpoint)) {
    p.image_encoder = std::make_shared<FixtureImageEncoder>();
  } else {
    p.image_encoder = std::make_shared<HttpImageEncoder>(config.image_encoder_endpoint);
  }
  return p;
}

PriorPipeline::PriorPipeline(ProviderConfig config, Providers providers)
    : config_(std::move(config)), providers_(std::move(providers)) {
  validate(config_);
  if (!providers_.mllm || !providers_.text_encoder || !providers_.diffusion) {
    throw Error(ErrorCode::InvalidConfig, "prior pipeline needs language model, text encoder and diffusion providers");
  }
  slots_ = std::make_unique<std::counting_semaphore<>>(config_.max_parallel_requests);
  const bool all_fixture = providers_.mllm->id().rfind("fixture", 0) == 0 &&
                           providers_.text_encoder->id().rfind("fixture", 0) == 0 &&
                           providers_.diffusion->id().rfind("fixture", 0) == 0;
  if (all_fixture) {
    clock_ = [] { return std::string(kFixtureTimestamp); };
  } else {
    clock_ = rfc3339_now;
  }
}

// Runs one provider request inside a concurrency slot. Only ProviderUnavailable
// is retried; the slot is released while backing off.
template <typename F>
auto PriorPipeline::call(const char* what, F&& f) {
  for (int attempt = 1;; ++attempt) {
    try {
      slots_->acquire();
      struct Release {
        std::counting_semaphore<>* s;
        ~Release() { s->release(); }
      } release{slots_.get()};
      return f();
    } catch (const Error& e) {
      if (e.code() != ErrorCode::ProviderUnavailable) throw;
      if (attempt >= config_.retry.max_attempts) {
        throw Error(ErrorCode::ProviderUnavailable, std::string(what) + " failed after " + std::to_string(attempt) +
                                                        " attempt(s): " + e.what());
      }
      const auto delay = std::chrono::milliseconds(static_cast<std::int64_t>(config_.retry.backoff_base_ms) << (attempt - 1));
      log(LogLevel::Warning, std::string(what) + " unavailable, retrying in " + std::to_string(delay.count()) + " ms");
      std::this_thread::sleep_for(delay);
    }
  }
}

PriorTexts PriorPipeline::query_mllm(const TensorImage& image) {
  if (image.empty()) throw Error(ErrorCode::InvalidArgument, "query_mllm needs a non-empty image");
  const std::string id = image_id(image);
  auto ask = [&](const char* prompt) {
    const MllmRequest request{image, id, prompt, kPromptTemplateId};
    return trim(call("language model", [&] { return providers_.mllm->describe(request); }));
  };
  PriorTexts texts{ask(kDegradationPrompt), ask(kContentPrompt), composite_provider_id(providers_), kPromptTemplateId};
  if (texts.degradation_text.empty()) throw Error(ErrorCode::MalformedResponse, "empty degradation description");
  if (texts.content_text.empty()) throw Error(ErrorCode::MalformedResponse, "empty content description");
  if (providers_.mllm->id().rfind("fixture", 0) == 0) check_sentinels(texts);
  return texts;
}

TextEmbedding PriorPipeline::encode_text(const std::string& text) {
  if (text.empty()) throw Error(ErrorCode::InvalidArgument, "cannot encode empty text");
  TextEncoderProvider& enc = *providers_.text_encoder;
  Tensor<float> tokens = call("text encoder", [&] { return enc.encode(text); });
  const Shape expected{enc.tokens(), enc.channels()};
  if (tokens.shape() != expected) {
    throw Error(ErrorCode::EmbeddingShapeMismatch, "text encoder returned " + shape_string(tokens.shape()) +
                                                       ", expected " + shape_string(expected));
  }
  for (float v : tokens.values()) {
    if (!std::isfinite(v)) throw Error(ErrorCode::MalformedResponse, "text encoder returned non-finite values");
  }
  return TextEmbedding{std::move(tokens), sha256_hex(text), enc.id()};
}

TensorImage PriorPipeline::synthesize_reference(const PriorTexts& texts, std::int64_t seed) {
  if (texts.content_text.empty() || texts.degradation_text.empty()) {
    throw Error(ErrorCode::InvalidArgument, "reference synthesis needs both texts");
  }
  const DiffusionRequest request{texts.content_text, texts.degradation_text, config_.diffusion_steps, seed};
  TensorImage image = call("diffusion", [&] { return providers_.diffusion->generate(request); });
  if (image.empty()) throw Error(ErrorCode::MalformedResponse, "diffusion returned an empty image");
  image = quantize_8bit(image);
  if (image.is_constant()) log(LogLevel::Warning, "DegenerateReference: diffusion returned a constant image");
  return image;
}

PriorBundle PriorPipeline::build_bundle(const TensorImage& image, std::int64_t seed, const fs::path& cache_root) {
  const std::string id = image_id(image);
  std::unique_ptr<BundleLock> lock;
  if (!cache_root.empty()) {
    lock = std::make_unique<BundleLock>(cache_root, id);
    if (bundle_exists(cache_root, id)) return load_bundle(cache_root, id);
  }
  PriorBundle b;
  b.image_id = id;
  b.texts = query_mllm(image);
  b.e_d = encode_text(b.texts.degradation_text);
  b.e_c = encode_text(b.texts.content_text);
  b.reference = synthesize_reference(b.texts, seed);
  b.diffusion_meta = {config_.diffusion_steps, seed, b.texts.degradation_text};
  b.created_at = clock_();
  if (!cache_root.empty()) save_bundle(b, cache_root);
  return b;
}

std::vector<std::vector<double>> PriorPipeline::reference_similarity_report(const std::vector<PriorBundle>& bundles,
                                                                            const std::vector<TensorImage>& ground_truth) {
  if (bundles.size() != ground_truth.size()) {
    throw Error(ErrorCode::InvalidArgument, "similarity report needs one ground truth per bundle");
  }
  if (!providers_.image_encoder) throw Error(ErrorCode::InvalidConfig, "no image encoder configured");
  ImageEncoderProvider& enc = *providers_.image_encoder;
  std::vector<std::vector<float>> refs, gts;
  for (const auto& b : bundles) refs.push_back(call("image encoder", [&] { return enc.embed(b.reference); }));
  for (const auto& g : ground_truth) gts.push_back(call("image encoder", [&] { return enc.embed(g); }));
  std::vector<std::vector<double>> m(refs.size(), std::vector<double>(gts.size()));
  for (std::size_t i = 0; i < refs.size(); ++i)
    for (std::size_t j = 0; j < gts.size(); ++j) m[i][j] = cosine(refs[i], gts[j]);
  return m;
}

}  // namespace lmdir::prior
