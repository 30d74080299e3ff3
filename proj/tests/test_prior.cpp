#include <gtest/gtest.h>
#include <httplib.h>

#include <atomic>
#include <cmath>
#include <set>
#include <thread>

#include <json.hpp>

#include "lmdir/hash.hpp"
#include "lmdir/log.hpp"
#include "lmdir/prior.hpp"
#include "lmdir/random.hpp"
#include "lmdir/serialize.hpp"
#include "support/fixtures.hpp"

namespace lmdir::prior {
namespace {

using testing::TempDir;

TensorImage random_image(std::int64_t h, std::int64_t w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> px(Shape{h, w, 3});
  for (auto& v : px.values()) v = static_cast<float>(rng.uniform());
  return quantize_8bit(TensorImage(std::move(px)));
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::IoError;
}

ProviderConfig small_config() {
  ProviderConfig c;
  c.reference_size = 32;
  c.retry.backoff_base_ms = 1;
  return c;
}

double cosine(std::span<const float> a, std::span<const float> b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * b[i];
    na += double(a[i]) * a[i];
    nb += double(b[i]) * b[i];
  }
  return dot / std::sqrt(na * nb);
}

// --- test doubles ---------------------------------------------------------------

struct CallCounts {
  std::atomic<int> mllm{0}, text{0}, diffusion{0}, image{0};
  int total() const { return mllm + text + diffusion + image; }
};

class CountingMllm : public MllmProvider {
 public:
  CountingMllm(std::shared_ptr<MllmProvider> inner, CallCounts& n) : inner_(std::move(inner)), n_(n) {}
  std::string id() const override { return inner_->id(); }
  std::string describe(const MllmRequest& r) override {
    ++n_.mllm;
    return inner_->describe(r);
  }

 private:
  std::shared_ptr<MllmProvider> inner_;
  CallCounts& n_;
};

class CountingText : public TextEncoderProvider {
 public:
  CountingText(std::shared_ptr<TextEncoderProvider> inner, CallCounts& n) : inner_(std::move(inner)), n_(n) {}
  std::string id() const override { return inner_->id(); }
  std::int64_t tokens() const override { return inner_->tokens(); }
  std::int64_t channels() const override { return inner_->channels(); }
  Tensor<float> encode(const std::string& t) override {
    ++n_.text;
    return inner_->encode(t);
  }

 private:
  std::shared_ptr<TextEncoderProvider> inner_;
  CallCounts& n_;
};

// Records every request and tracks the peak number of concurrent calls.
class RecordingDiffusion : public DiffusionProvider {
 public:
  RecordingDiffusion(CallCounts& n, std::chrono::milliseconds delay = {}) : n_(n), delay_(delay) {}
  std::string id() const override { return "fixture-recording"; }
  TensorImage generate(const DiffusionRequest& r) override {
    ++n_.diffusion;
    const int now = ++in_flight_;
    int peak = peak_.load();
    while (now > peak && !peak_.compare_exchange_weak(peak, now)) {
    }
    std::this_thread::sleep_for(delay_);
    {
      std::lock_guard lock(mutex_);
      requests_.push_back(r);
    }
    --in_flight_;
    return inner_.generate(r);
  }
  std::vector<DiffusionRequest> requests() {
    std::lock_guard lock(mutex_);
    return requests_;
  }
  int peak() const { return peak_; }

 private:
  CallCounts& n_;
  std::chrono::milliseconds delay_;
  FixtureDiffusion inner_{32};
  std::atomic<int> in_flight_{0}, peak_{0};
  std::mutex mutex_;
  std::vector<DiffusionRequest> requests_;
};

class ConstantDiffusion : public DiffusionProvider {
 public:
  std::string id() const override { return "fixture-gray"; }
  TensorImage generate(const DiffusionRequest&) override { return TensorImage::filled(16, 16, 0.5f); }
};

// Fails with `code` for the first `failures` calls, then answers normally.
class FlakyMllm : public MllmProvider {
 public:
  FlakyMllm(int failures, ErrorCode code) : failures_(failures), code_(code) {}
  std::string id() const override { return "flaky"; }
  std::string describe(const MllmRequest& r) override {
    if (calls++ < failures_) throw Error(code_, "simulated failure");
    return r.prompt == kDegradationPrompt ? "gaussian noise" : "a quiet street";
  }
  std::atomic<int> calls{0};

 private:
  int failures_;
  ErrorCode code_;
};

class ScriptedMllm : public MllmProvider {
 public:
  ScriptedMllm(std::string id, std::string d, std::string c) : id_(std::move(id)), d_(std::move(d)), c_(std::move(c)) {}
  std::string id() const override { return id_; }
  std::string describe(const MllmRequest& r) override { return r.prompt == kDegradationPrompt ? d_ : c_; }

 private:
  std::string id_, d_, c_;
};

class WrongShapeEncoder : public TextEncoderProvider {
 public:
  std::string id() const override { return "wrong"; }
  std::int64_t tokens() const override { return 77; }
  std::int64_t channels() const override { return 768; }
  Tensor<float> encode(const std::string&) override { return Tensor<float>(Shape{76, 768}); }
};

struct Counted {
  CallCounts counts;
  std::shared_ptr<RecordingDiffusion> diffusion;
  Providers providers;

  explicit Counted(const ProviderConfig& c, std::chrono::milliseconds delay = {}) {
    Providers base = make_providers(c);
    diffusion = std::make_shared<RecordingDiffusion>(counts, delay);
    providers = {std::make_shared<CountingMllm>(base.mllm, counts),
                 std::make_shared<CountingText>(base.text_encoder, counts), diffusion, base.image_encoder};
  }
};

// --- identity and config -------------------------------------------------------------

TEST(ImageId, IsLowercaseHexSha256OfPixels) {
  const TensorImage img = random_image(5, 7, 1);
  const std::string id = image_id(img);
  ASSERT_EQ(id.size(), 64u);
  EXPECT_EQ(id.find_first_not_of("0123456789abcdef"), std::string::npos);
  EXPECT_EQ(id, image_id(random_image(5, 7, 1)));
}

TEST(ImageId, OnePixelChangesTheId) {
  TensorImage img = random_image(8, 8, 2);
  Tensor<float> px = img.pixels();
  px[13] = px[13] > 0.5f ? 0.0f : 1.0f;
  EXPECT_NE(image_id(img), image_id(TensorImage(px)));
}

TEST(ImageId, ShapeIsPartOfTheId) {
  EXPECT_NE(image_id(TensorImage::filled(2, 8, 0.5f)), image_id(TensorImage::filled(8, 2, 0.5f)));
}

TEST(ProviderConfig, RejectsInvalidValues) {
  ProviderConfig c;
  c.max_parallel_requests = 0;
  EXPECT_EQ(code_of([&] { validate(c); }), ErrorCode::InvalidConfig);
  c = ProviderConfig{};
  c.diffusion_steps = 0;
  EXPECT_EQ(code_of([&] { validate(c); }), ErrorCode::InvalidConfig);
  c = ProviderConfig{};
  c.retry.max_attempts = 0;
  EXPECT_EQ(code_of([&] { validate(c); }), ErrorCode::InvalidConfig);
  EXPECT_NO_THROW(validate(ProviderConfig{}));
}

// --- language model --------------------------------------------------------------------

TEST(QueryMllm, FixtureTableLookupIsExact) {
  const TensorImage img = random_image(16, 16, 3);
  auto mllm = std::make_shared<FixtureMllm>();
  mllm->add(image_id(img), {"heavy gaussian noise", "a stone bridge over a river"});
  Providers p = make_providers(small_config());
  p.mllm = mllm;
  PriorPipeline pipe(small_config(), p);
  const PriorTexts t = pipe.query_mllm(img);
  EXPECT_EQ(t.degradation_text, "heavy gaussian noise");
  EXPECT_EQ(t.content_text, "a stone bridge over a river");
  EXPECT_EQ(t.prompt_template_id, "dc-v1");
  EXPECT_EQ(t.provider_id, "mllm=fixture-mllm-v1;text=fixture-clip-77x768-v1;diffusion=fixture-diffusion-v1");
}

TEST(QueryMllm, FixtureTableLoadsFromFile) {
  TempDir dir;
  const TensorImage img = random_image(16, 16, 4);
  const std::string table = nlohmann::json{{image_id(img), {{"degradation_text", "rain streaks"},
                                                            {"content_text", "a red car"}}}}
                                .dump();
  write_file_atomic(dir / "table.json", std::vector<std::uint8_t>(table.begin(), table.end()));
  ProviderConfig c = small_config();
  c.fixture_table = dir / "table.json";
  PriorPipeline pipe(c);
  const PriorTexts t = pipe.query_mllm(img);
  EXPECT_EQ(t.degradation_text, "rain streaks");
  EXPECT_EQ(t.content_text, "a red car");
}

TEST(QueryMllm, FixtureFallbackIsPureFunctionOfPixels) {
  PriorPipeline a(small_config()), b(small_config());
  const TensorImage img = random_image(24, 24, 5);
  EXPECT_EQ(a.query_mllm(img), b.query_mllm(img));
}

TEST(QueryMllm, FixtureFallbackSeesNoiseAndDarkness) {
  PriorPipeline pipe(small_config());
  Rng rng(6);
  Tensor<float> noisy(Shape{32, 32, 3}, 0.5f);
  for (auto& v : noisy.values()) v = std::clamp(v + static_cast<float>(rng.normal() * 50.0 / 255.0), 0.0f, 1.0f);
  EXPECT_NE(pipe.query_mllm(TensorImage(noisy)).degradation_text.find("noise"), std::string::npos);
  EXPECT_NE(pipe.query_mllm(TensorImage::filled(32, 32, 0.1f)).degradation_text.find("low light"), std::string::npos);
  EXPECT_EQ(pipe.query_mllm(TensorImage::filled(32, 32, 0.6f)).degradation_text, "slight blur");
}

TEST(QueryMllm, EmptyFieldIsMalformed) {
  Providers p = make_providers(small_config());
  p.mllm = std::make_shared<ScriptedMllm>("scripted", "   ", "a house");
  PriorPipeline pipe(small_config(), p);
  EXPECT_EQ(code_of([&] { pipe.query_mllm(random_image(8, 8, 1)); }), ErrorCode::MalformedResponse);
}

TEST(QueryMllm, FixtureTextsMustStaySeparated) {
  Providers p = make_providers(small_config());
  p.mllm = std::make_shared<ScriptedMllm>("fixture-scripted", "noise", "a rainy street");
  PriorPipeline pipe(small_config(), p);
  EXPECT_EQ(code_of([&] { pipe.query_mllm(random_image(8, 8, 1)); }), ErrorCode::MalformedResponse);

  // Live providers are not policed.
  p.mllm = std::make_shared<ScriptedMllm>("live", "noise", "a rainy street");
  PriorPipeline live(small_config(), p);
  EXPECT_NO_THROW(live.query_mllm(random_image(8, 8, 1)));
}

TEST(QueryMllm, OnlyUnavailableIsRetried) {
  ProviderConfig c = small_config();
  c.retry = {3, 1};
  Providers p = make_providers(c);

  auto flaky = std::make_shared<FlakyMllm>(2, ErrorCode::ProviderUnavailable);
  p.mllm = flaky;
  EXPECT_EQ(PriorPipeline(c, p).query_mllm(random_image(8, 8, 1)).degradation_text, "gaussian noise");
  EXPECT_EQ(flaky->calls, 4);  // 2 failures + 2 prompts

  auto dead = std::make_shared<FlakyMllm>(100, ErrorCode::ProviderUnavailable);
  p.mllm = dead;
  EXPECT_EQ(code_of([&] { PriorPipeline(c, p).query_mllm(random_image(8, 8, 1)); }), ErrorCode::ProviderUnavailable);
  EXPECT_EQ(dead->calls, 3);

  auto malformed = std::make_shared<FlakyMllm>(100, ErrorCode::MalformedResponse);
  p.mllm = malformed;
  EXPECT_EQ(code_of([&] { PriorPipeline(c, p).query_mllm(random_image(8, 8, 1)); }), ErrorCode::MalformedResponse);
  EXPECT_EQ(malformed->calls, 1);
}

// --- text encoder -------------------------------------------------------------------------

TEST(EncodeText, EmptyTextIsRejected) {
  PriorPipeline pipe(small_config());
  EXPECT_EQ(code_of([&] { pipe.encode_text(""); }), ErrorCode::InvalidArgument);
}

TEST(EncodeText, FixtureIsBitExactOnRepeat) {
  PriorPipeline pipe(small_config());
  const TextEmbedding a = pipe.encode_text("rain streaks");
  const TextEmbedding b = pipe.encode_text("rain streaks");
  EXPECT_EQ(a.tokens.shape(), (Shape{77, 768}));
  EXPECT_EQ(std::memcmp(a.tokens.data(), b.tokens.data(), a.tokens.size() * sizeof(float)), 0);
  EXPECT_EQ(a.source_text_hash, sha256_hex(std::string("rain streaks")));
  EXPECT_EQ(a.encoder_id, "fixture-clip-77x768-v1");
}

TEST(EncodeText, DifferentTextsAreNotParallel) {
  PriorPipeline pipe(small_config());
  const TextEmbedding a = pipe.encode_text("rain streaks");
  const TextEmbedding b = pipe.encode_text("heavy gaussian noise");
  const double cos = cosine(a.tokens.values(), b.tokens.values());
  EXPECT_LT(cos, 1.0);
  // Pinned from the first run of this loop.
  EXPECT_NEAR(cos, 0.0273233032, 1e-9);
}

TEST(EncodeText, ShapeMismatchIsReported) {
  Providers p = make_providers(small_config());
  p.text_encoder = std::make_shared<WrongShapeEncoder>();
  PriorPipeline pipe(small_config(), p);
  EXPECT_EQ(code_of([&] { pipe.encode_text("x"); }), ErrorCode::EmbeddingShapeMismatch);
}

// --- reference synthesis ------------------------------------------------------------------

TEST(SynthesizeReference, FixtureDefaultsToNativeSizeAndIsBitExact) {
  PriorPipeline pipe{ProviderConfig{}};
  const PriorTexts t{"heavy gaussian noise", "a stone bridge over a river", "x", "dc-v1"};
  const TensorImage a = pipe.synthesize_reference(t, 0);
  EXPECT_EQ(a.height(), 1024);
  EXPECT_EQ(a.width(), 1024);
  EXPECT_EQ(a, pipe.synthesize_reference(t, 0));
  EXPECT_FALSE(a.is_constant());
  for (float v : a.pixels().values()) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
}

TEST(SynthesizeReference, SeedsGiveDifferentImages) {
  PriorPipeline pipe(small_config());
  const PriorTexts t{"heavy gaussian noise", "a stone bridge over a river", "x", "dc-v1"};
  EXPECT_NE(image_id(pipe.synthesize_reference(t, 0)), image_id(pipe.synthesize_reference(t, 1)));
}

TEST(SynthesizeReference, NegativePromptCarriesDegradationText) {
  ProviderConfig c = small_config();
  c.diffusion_steps = 30;
  Counted counted(c);
  PriorPipeline pipe(c, counted.providers);
  pipe.synthesize_reference({"rain streaks", "a red car", "x", "dc-v1"}, 9);
  const auto requests = counted.diffusion->requests();
  ASSERT_EQ(requests.size(), 1u);
  EXPECT_EQ(requests[0].prompt, "a red car");
  EXPECT_EQ(requests[0].negative_prompt, "rain streaks");
  EXPECT_EQ(requests[0].steps, 30);
  EXPECT_EQ(requests[0].seed, 9);
}

TEST(SynthesizeReference, ConstantImageIsFlaggedNotRejected) {
  Providers p = make_providers(small_config());
  p.diffusion = std::make_shared<ConstantDiffusion>();
  PriorPipeline pipe(small_config(), p);
  std::vector<std::string> warnings;
  set_log_sink([&](LogLevel level, const std::string& m) {
    if (level == LogLevel::Warning) warnings.push_back(m);
  });
  const PriorBundle b = pipe.build_bundle(random_image(16, 16, 2), 0);
  set_log_sink(nullptr);
  EXPECT_TRUE(b.degenerate_reference());
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("DegenerateReference"), std::string::npos);
}

// --- bundles ----------------------------------------------------------------------------------

TEST(BuildBundle, FixtureEndToEndHashesTheTexts) {
  const TensorImage img = random_image(16, 16, 3);
  auto mllm = std::make_shared<FixtureMllm>();
  mllm->add(image_id(img), {"heavy gaussian noise", "a stone bridge over a river"});
  Providers p = make_providers(small_config());
  p.mllm = mllm;
  PriorPipeline pipe(small_config(), p);
  const PriorBundle b = pipe.build_bundle(img, 0);
  // sha256 of the UTF-8 texts, computed with Python's hashlib.
  EXPECT_EQ(b.e_d.source_text_hash, "4b7d4394cb807ddc95b9a388163e5bb930315f68697556e73da9b3aae2ab1db6");
  EXPECT_EQ(b.e_c.source_text_hash, "25f9b310e2017ea71af14c0a92b1c7c9611e56da3ebc55b3c53ae8cfa116650f");
  EXPECT_EQ(b.image_id, image_id(img));
  EXPECT_EQ(b.diffusion_meta.negative_prompt, "heavy gaussian noise");
  EXPECT_EQ(b.created_at, kFixtureTimestamp);
}

TEST(BuildBundle, CacheHitMakesNoProviderCalls) {
  TempDir dir;
  Counted counted(small_config());
  PriorPipeline pipe(small_config(), counted.providers);
  const TensorImage img = random_image(16, 16, 4);
  const PriorBundle first = pipe.build_bundle(img, 0, dir.path());
  const int after_first = counted.counts.total();
  EXPECT_EQ(after_first, 5);  // 2 descriptions, 2 encodings, 1 reference
  const PriorBundle second = pipe.build_bundle(img, 0, dir.path());
  EXPECT_EQ(counted.counts.total(), after_first);
  EXPECT_EQ(first, second);

  pipe.build_bundle(random_image(16, 16, 5), 0, dir.path());
  EXPECT_EQ(counted.counts.total(), 2 * after_first);
}

TEST(BuildBundle, CacheHitLeavesStoredFilesUntouched) {
  TempDir dir;
  PriorPipeline pipe(small_config());
  const TensorImage img = random_image(16, 16, 6);
  pipe.build_bundle(img, 0, dir.path());
  std::map<std::string, std::vector<std::uint8_t>> before;
  for (const auto& f : std::filesystem::directory_iterator(dir / image_id(img))) before[f.path().filename()] = read_file(f);
  pipe.build_bundle(img, 0, dir.path());
  for (const auto& [name, bytes] : before) EXPECT_EQ(read_file(dir / image_id(img) / name), bytes) << name;
}

TEST(BuildBundle, FixtureRunsAreByteIdentical) {
  TempDir a, b;
  const TensorImage img = random_image(16, 16, 7);
  PriorPipeline(small_config()).build_bundle(img, 3, a.path());
  PriorPipeline(small_config()).build_bundle(img, 3, b.path());
  const std::string id = image_id(img);
  for (const char* name : {"manifest.json", "e_d.f32", "e_c.f32", "reference.png"}) {
    EXPECT_EQ(read_file(a / id / name), read_file(b / id / name)) << name;
  }
}

TEST(BuildBundle, ParallelismIsBounded) {
  ProviderConfig c = small_config();
  c.max_parallel_requests = 2;
  Counted counted(c, std::chrono::milliseconds(20));
  PriorPipeline pipe(c, counted.providers);
  std::vector<std::thread> threads;
  for (int i = 0; i < 6; ++i) {
    threads.emplace_back([&, i] { pipe.build_bundle(random_image(8, 8, 100 + i), 0); });
  }
  for (auto& t : threads) t.join();
  EXPECT_EQ(counted.counts.diffusion, 6);
  EXPECT_LE(counted.diffusion->peak(), 2);
  EXPECT_GE(counted.diffusion->peak(), 1);
}

TEST(BuildBundle, ConcurrentBuildersOfOneImageShareTheWork) {
  TempDir dir;
  Counted counted(small_config(), std::chrono::milliseconds(20));
  PriorPipeline pipe(small_config(), counted.providers);
  const TensorImage img = random_image(8, 8, 8);
  std::vector<PriorBundle> out(4);
  std::vector<std::thread> threads;
  for (int i = 0; i < 4; ++i) threads.emplace_back([&, i] { out[i] = pipe.build_bundle(img, 0, dir.path()); });
  for (auto& t : threads) t.join();
  EXPECT_EQ(counted.counts.diffusion, 1);
  for (const auto& b : out) EXPECT_EQ(b, out[0]);
}

TEST(BundleStore, RoundTripIsExact) {
  TempDir dir;
  const PriorBundle b = PriorPipeline(small_config()).build_bundle(random_image(16, 16, 9), 5);
  save_bundle(b, dir.path());
  EXPECT_EQ(load_bundle(dir.path(), b.image_id), b);
}

TEST(BundleStore, ManifestHasExactlyTheDocumentedFields) {
  TempDir dir;
  const PriorBundle b = PriorPipeline(small_config()).build_bundle(random_image(16, 16, 10), 5);
  save_bundle(b, dir.path());
  const auto bytes = read_file(dir / b.image_id / "manifest.json");
  const auto m = nlohmann::json::parse(bytes.begin(), bytes.end());
  std::set<std::string> keys;
  for (const auto& [k, v] : m.items()) keys.insert(k);
  EXPECT_EQ(keys, (std::set<std::string>{"image_id", "degradation_text", "content_text", "provider_id",
                                         "prompt_template_id", "diffusion_meta", "tensors", "reference",
                                         "created_at"}));
  EXPECT_EQ(m["tensors"]["e_d"]["dtype"], "f32le");
  EXPECT_EQ(m["tensors"]["e_d"]["shape"], nlohmann::json::array({77, 768}));
  EXPECT_EQ(m["reference"]["format"], "png");
  EXPECT_EQ(m["diffusion_meta"]["steps"], 30);
  EXPECT_EQ(std::filesystem::file_size(dir / b.image_id / "e_d.f32"), 77u * 768u * 4u);
}

TEST(BundleStore, TamperedTensorIsCorrupt) {
  TempDir dir;
  const PriorBundle b = PriorPipeline(small_config()).build_bundle(random_image(16, 16, 11), 0);
  save_bundle(b, dir.path());
  auto bytes = read_file(dir / b.image_id / "e_d.f32");
  bytes[100] ^= 0x01;
  write_file_atomic(dir / b.image_id / "e_d.f32", bytes);
  EXPECT_EQ(code_of([&] { load_bundle(dir.path(), b.image_id); }), ErrorCode::CacheCorrupt);
}

TEST(BundleStore, TamperedReferenceIsCorrupt) {
  TempDir dir;
  const PriorBundle b = PriorPipeline(small_config()).build_bundle(random_image(16, 16, 12), 0);
  save_bundle(b, dir.path());
  auto bytes = read_file(dir / b.image_id / "reference.png");
  bytes.back() ^= 0x01;
  write_file_atomic(dir / b.image_id / "reference.png", bytes);
  EXPECT_EQ(code_of([&] { load_bundle(dir.path(), b.image_id); }), ErrorCode::CacheCorrupt);
}

TEST(BundleStore, CorruptCacheSurfacesThroughBuildBundle) {
  TempDir dir;
  PriorPipeline pipe(small_config());
  const TensorImage img = random_image(16, 16, 13);
  pipe.build_bundle(img, 0, dir.path());
  std::filesystem::remove(dir / image_id(img) / "e_c.f32");
  EXPECT_EQ(code_of([&] { pipe.build_bundle(img, 0, dir.path()); }), ErrorCode::CacheCorrupt);
}

TEST(BundleStore, UnknownIdIsNotFound) {
  TempDir dir;
  EXPECT_EQ(code_of([&] { load_bundle(dir.path(), std::string(64, 'a')); }), ErrorCode::NotFound);
}

// --- similarity diagnostic ---------------------------------------------------------------------

TEST(SimilarityReport, IdenticalListsHaveUnitDiagonal) {
  PriorPipeline pipe(small_config());
  std::vector<PriorBundle> bundles;
  std::vector<TensorImage> gts;
  for (int i = 0; i < 3; ++i) {
    bundles.push_back(pipe.build_bundle(random_image(16, 16, 20 + i), i));
    gts.push_back(bundles.back().reference);
  }
  const auto m = pipe.reference_similarity_report(bundles, gts);
  ASSERT_EQ(m.size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(m[i][i], 1.0, 1e-6);
  EXPECT_EQ(pipe.reference_similarity_report({bundles[0]}, {gts[0]}).size(), 1u);
}

TEST(SimilarityReport, MatchesBruteForceCosine) {
  PriorPipeline pipe(small_config());
  FixtureImageEncoder enc;
  std::vector<PriorBundle> bundles;
  std::vector<TensorImage> gts;
  for (int i = 0; i < 4; ++i) {
    bundles.push_back(pipe.build_bundle(random_image(16, 16, 30 + i), i));
    gts.push_back(random_image(24, 20, 40 + i));
  }
  const auto m = pipe.reference_similarity_report(bundles, gts);
  ASSERT_EQ(m.size(), 4u);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      const auto a = enc.embed(bundles[i].reference), b = enc.embed(gts[j]);
      EXPECT_NEAR(m[i][j], cosine(a, b), 1e-12);
    }
}

TEST(SimilarityReport, RejectsUnequalLists) {
  PriorPipeline pipe(small_config());
  EXPECT_EQ(code_of([&] { pipe.reference_similarity_report({}, {random_image(8, 8, 1)}); }),
            ErrorCode::InvalidArgument);
}

// --- HTTP backends -----------------------------------------------------------------------------

class FakeServer {
 public:
  FakeServer() {
    server_.Post("/mllm", [](const httplib::Request& req, httplib::Response& res) {
      const auto j = nlohmann::json::parse(req.body);
      const auto png = base64_decode(j.at("image_png_base64").get<std::string>());
      const TensorImage img = decode_image(png);
      const std::string size = std::to_string(img.height()) + "x" + std::to_string(img.width());
      const bool degr = j.at("prompt").get<std::string>() == kDegradationPrompt;
      res.set_content(nlohmann::json{{"text", degr ? "haze " + size : "a harbour"}}.dump(), "application/json");
    });
    server_.Post("/text", [](const httplib::Request& req, httplib::Response& res) {
      const auto j = nlohmann::json::parse(req.body);
      Tensor<float> t(Shape{77, 768}, static_cast<float>(j.at("text").get<std::string>().size()));
      res.set_content(nlohmann::json{{"shape", {77, 768}}, {"data_f32le_base64", base64_encode(to_f32le(t))}}.dump(),
                      "application/json");
    });
    server_.Post("/diffusion", [this](const httplib::Request& req, httplib::Response& res) {
      last_diffusion = nlohmann::json::parse(req.body);
      res.set_content(nlohmann::json{{"image_png_base64", base64_encode(encode_png(TensorImage::filled(8, 8, 0.2f)))}}
                          .dump(),
                      "application/json");
    });
    server_.Post("/embed", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"embedding": [1, 0, 0]})", "application/json");
    });
    server_.Post("/busy", [this](const httplib::Request&, httplib::Response& res) {
      ++busy_calls;
      res.status = 503;
    });
    server_.Post("/garbage", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("{not json", "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServer() {
    server_.stop();
    thread_.join();
  }
  std::string url(const std::string& path) const { return "http://127.0.0.1:" + std::to_string(port_) + path; }

  nlohmann::json last_diffusion;
  std::atomic<int> busy_calls{0};

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

TEST(HttpProviders, FullBundleOverHttp) {
  FakeServer server;
  ProviderConfig c = small_config();
  c.mllm_endpoint = server.url("/mllm");
  c.text_encoder_endpoint = server.url("/text");
  c.diffusion_endpoint = server.url("/diffusion");
  c.image_encoder_endpoint = server.url("/embed");
  PriorPipeline pipe(c);
  const PriorBundle b = pipe.build_bundle(random_image(600, 300, 1), 4);
  // The language model sees the image with its longest side at 512.
  EXPECT_EQ(b.texts.degradation_text, "haze 512x256");
  EXPECT_EQ(b.texts.content_text, "a harbour");
  EXPECT_EQ(b.e_d.tokens[0], static_cast<float>(std::string("haze 512x256").size()));
  EXPECT_EQ(b.reference.height(), 8);
  EXPECT_EQ(server.last_diffusion["negative_prompt"], "haze 512x256");
  EXPECT_EQ(server.last_diffusion["steps"], 30);
  EXPECT_EQ(server.last_diffusion["seed"], 4);
  EXPECT_NE(b.created_at, kFixtureTimestamp);
  const auto m = pipe.reference_similarity_report({b}, {b.reference});
  EXPECT_DOUBLE_EQ(m[0][0], 1.0);
}

TEST(HttpProviders, ServerErrorsAreRetriedThenUnavailable) {
  FakeServer server;
  ProviderConfig c = small_config();
  c.retry = {3, 1};
  c.mllm_endpoint = server.url("/busy");
  PriorPipeline pipe(c);
  EXPECT_EQ(code_of([&] { pipe.query_mllm(random_image(8, 8, 1)); }), ErrorCode::ProviderUnavailable);
  EXPECT_EQ(server.busy_calls, 3);
}

TEST(HttpProviders, BadJsonIsMalformed) {
  FakeServer server;
  ProviderConfig c = small_config();
  c.text_encoder_endpoint = server.url("/garbage");
  PriorPipeline pipe(c);
  EXPECT_EQ(code_of([&] { pipe.encode_text("x"); }), ErrorCode::MalformedResponse);
}

TEST(HttpProviders, UnreachableHostIsUnavailable) {
  ProviderConfig c = small_config();
  c.retry = {1, 0};
  c.mllm_endpoint = "http://127.0.0.1:1/mllm";
  PriorPipeline pipe(c);
  EXPECT_EQ(code_of([&] { pipe.query_mllm(random_image(8, 8, 1)); }), ErrorCode::ProviderUnavailable);
}

}  // namespace
}  // namespace lmdir::prior
