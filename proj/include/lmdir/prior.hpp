#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <semaphore>
#include <string>
#include <vector>

#include "lmdir/image.hpp"
#include "lmdir/prior_types.hpp"

// Acquisition of the large-model priors: degradation and content texts from a
// multimodal language model, their token embeddings from a text encoder, and
// a reference image from a text-to-image model. Every provider has a
// deterministic fixture backend and an HTTP backend.
namespace lmdir::prior {

inline constexpr const char* kPromptTemplateId = "dc-v1";
inline constexpr const char* kDegradationPrompt =
    "List only the degradations visible in this image (e.g., noise, rain streaks, low light, haze, blur). "
    "Do not describe the scene.";
inline constexpr const char* kContentPrompt =
    "Describe the scene content of this image in one or two sentences. Ignore any degradation.";

inline constexpr const char* kFixture = "fixture";

struct RetryPolicy {
  int max_attempts = 3;
  int backoff_base_ms = 200;
};

struct ProviderConfig {
  std::string mllm_endpoint = kFixture;
  std::string text_encoder_endpoint = kFixture;
  std::string diffusion_endpoint = kFixture;
  std::string image_encoder_endpoint = kFixture;
  int max_parallel_requests = 4;
  RetryPolicy retry;
  int diffusion_steps = 30;
  // Side length of fixture reference images.
  int reference_size = 1024;
  // Optional JSON file {image_id: {degradation_text, content_text}} consulted
  // by the fixture language model before its image-statistics fallback.
  std::filesystem::path fixture_table;
};

void validate(const ProviderConfig& config);

// Content hash of an image: sha256 over "<H>x<W>x3\n" followed by the f32le
// pixel buffer.
std::string image_id(const TensorImage& image);

// --- provider interfaces -----------------------------------------------------

struct MllmRequest {
  TensorImage image;
  std::string image_id;
  std::string prompt;
  std::string prompt_template_id;
};

struct DiffusionRequest {
  std::string prompt;
  std::string negative_prompt;
  int steps = 30;
  std::int64_t seed = 0;
};

class MllmProvider {
 public:
  virtual ~MllmProvider() = default;
  virtual std::string id() const = 0;
  virtual std::string describe(const MllmRequest& request) = 0;
};

class TextEncoderProvider {
 public:
  virtual ~TextEncoderProvider() = default;
  virtual std::string id() const = 0;
  virtual std::int64_t tokens() const = 0;
  virtual std::int64_t channels() const = 0;
  virtual Tensor<float> encode(const std::string& text) = 0;
};

class DiffusionProvider {
 public:
  virtual ~DiffusionProvider() = default;
  virtual std::string id() const = 0;
  virtual TensorImage generate(const DiffusionRequest& request) = 0;
};

class ImageEncoderProvider {
 public:
  virtual ~ImageEncoderProvider() = default;
  virtual std::string id() const = 0;
  virtual std::vector<float> embed(const TensorImage& image) = 0;
};

struct Providers {
  std::shared_ptr<MllmProvider> mllm;
  std::shared_ptr<TextEncoderProvider> text_encoder;
  std::shared_ptr<DiffusionProvider> diffusion;
  std::shared_ptr<ImageEncoderProvider> image_encoder;
};

// Fixture or HTTP backend per endpoint field.
Providers make_providers(const ProviderConfig& config);

// --- fixture backends --------------------------------------------------------

struct FixtureTexts {
  std::string degradation_text;
  std::string content_text;
};

// Looks the image up in its table; unknown images get descriptions derived
// from simple image statistics, so the answer is a pure function of the pixels.
class FixtureMllm : public MllmProvider {
 public:
  explicit FixtureMllm(std::map<std::string, FixtureTexts> table = {});
  static std::map<std::string, FixtureTexts> load_table(const std::filesystem::path& path);

  std::string id() const override { return "fixture-mllm-v1"; }
  std::string describe(const MllmRequest& request) override;
  void add(const std::string& image_id, FixtureTexts texts);

 private:
  std::mutex mutex_;
  std::map<std::string, FixtureTexts> table_;
};

// Deterministic stand-in for a CLIP-style text encoder: each word maps to a
// hashed pseudo-random vector; token i is its word vector plus a small
// position code; positions after the last word repeat the sentence mean.
class FixtureTextEncoder : public TextEncoderProvider {
 public:
  explicit FixtureTextEncoder(std::int64_t tokens = 77, std::int64_t channels = 768)
      : tokens_(tokens), channels_(channels) {}
  std::string id() const override;
  std::int64_t tokens() const override { return tokens_; }
  std::int64_t channels() const override { return channels_; }
  Tensor<float> encode(const std::string& text) override;

 private:
  std::int64_t tokens_;
  std::int64_t channels_;
};

// Smooth procedural image keyed by (hash(prompt), seed), quantized to 8 bits.
class FixtureDiffusion : public DiffusionProvider {
 public:
  explicit FixtureDiffusion(int size = 1024) : size_(size) {}
  std::string id() const override { return "fixture-diffusion-v1"; }
  TensorImage generate(const DiffusionRequest& request) override;

 private:
  int size_;
};

// 8x8 area-averaged thumbnail, flattened.
class FixtureImageEncoder : public ImageEncoderProvider {
 public:
  std::string id() const override { return "fixture-image-encoder-v1"; }
  std::vector<float> embed(const TensorImage& image) override;
};

// --- HTTP backends -----------------------------------------------------------
//
// JSON over HTTP/1.1 POST to the configured URL:
//   mllm:          {prompt, prompt_template_id, image_png_base64} -> {text}
//   text encoder:  {text} -> {shape: [N, C], data_f32le_base64}
//   diffusion:     {prompt, negative_prompt, steps, seed} -> {image_png_base64}
//   image encoder: {image_png_base64} -> {embedding: [..]}
// Connection failures and 5xx responses raise ProviderUnavailable, anything
// unparseable MalformedResponse. The language model receives the image with
// its longest side resized to 512.

class HttpMllm : public MllmProvider {
 public:
  explicit HttpMllm(std::string url) : url_(std::move(url)) {}
  std::string id() const override { return "http-mllm:" + url_; }
  std::string describe(const MllmRequest& request) override;

 private:
  std::string url_;
};

class HttpTextEncoder : public TextEncoderProvider {
 public:
  HttpTextEncoder(std::string url, std::int64_t tokens = 77, std::int64_t channels = 768)
      : url_(std::move(url)), tokens_(tokens), channels_(channels) {}
  std::string id() const override { return "http-text:" + url_; }
  std::int64_t tokens() const override { return tokens_; }
  std::int64_t channels() const override { return channels_; }
  Tensor<float> encode(const std::string& text) override;

 private:
  std::string url_;
  std::int64_t tokens_;
  std::int64_t channels_;
};

class HttpDiffusion : public DiffusionProvider {
 public:
  explicit HttpDiffusion(std::string url) : url_(std::move(url)) {}
  std::string id() const override { return "http-diffusion:" + url_; }
  TensorImage generate(const DiffusionRequest& request) override;

 private:
  std::string url_;
};

class HttpImageEncoder : public ImageEncoderProvider {
 public:
  explicit HttpImageEncoder(std::string url) : url_(std::move(url)) {}
  std::string id() const override { return "http-image-encoder:" + url_; }
  std::vector<float> embed(const TensorImage& image) override;

 private:
  std::string url_;
};

// Longest side scaled to `longest` (never enlarged).
TensorImage resize_longest_side(const TensorImage& image, std::int64_t longest);

// --- bundle store ------------------------------------------------------------

// <root>/<image_id>/manifest.json plus e_d.f32, e_c.f32 and reference.png.
std::filesystem::path save_bundle(const PriorBundle& bundle, const std::filesystem::path& root);
PriorBundle load_bundle(const std::filesystem::path& root, const std::string& image_id);
bool bundle_exists(const std::filesystem::path& root, const std::string& image_id);

// Exclusive advisory lock on <root>/<image_id>.lock for the guard's lifetime.
class BundleLock {
 public:
  BundleLock(const std::filesystem::path& root, const std::string& image_id);
  ~BundleLock();
  BundleLock(const BundleLock&) = delete;
  BundleLock& operator=(const BundleLock&) = delete;

 private:
  int fd_ = -1;
};

// --- pipeline ----------------------------------------------------------------

class PriorPipeline {
 public:
  PriorPipeline(ProviderConfig config, Providers providers);
  explicit PriorPipeline(const ProviderConfig& config) : PriorPipeline(config, make_providers(config)) {}

  const ProviderConfig& config() const { return config_; }
  const Providers& providers() const { return providers_; }

  PriorTexts query_mllm(const TensorImage& image);
  TextEmbedding encode_text(const std::string& text);
  TensorImage synthesize_reference(const PriorTexts& texts, std::int64_t seed);

  // query_mllm -> encode_text x2 -> synthesize_reference. With a cache root,
  // an existing bundle for the image is returned without provider calls and a
  // new one is stored before returning.
  PriorBundle build_bundle(const TensorImage& image, std::int64_t seed,
                           const std::filesystem::path& cache_root = {});

  // Cosine similarity between embeddings of references[i] and ground_truth[j].
  std::vector<std::vector<double>> reference_similarity_report(const std::vector<PriorBundle>& bundles,
                                                               const std::vector<TensorImage>& ground_truth);

  // Timestamp source for created_at. Fixture mode defaults to a constant so
  // that bundles are byte-identical across runs.
  void set_clock(std::function<std::string()> clock) { clock_ = std::move(clock); }

 private:
  template <typename F>
  auto call(const char* what, F&& f);

  ProviderConfig config_;
  Providers providers_;
  std::unique_ptr<std::counting_semaphore<>> slots_;
  std::function<std::string()> clock_;
};

inline constexpr const char* kFixtureTimestamp = "2000-01-01T00:00:00Z";

// Identifier recorded in PriorTexts::provider_id, naming every backend.
std::string composite_provider_id(const Providers& providers);

}  // namespace lmdir::prior
