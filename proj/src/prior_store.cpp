#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include <json.hpp>

#include "lmdir/hash.hpp"
#include "lmdir/prior.hpp"
#include "lmdir/serialize.hpp"

namespace lmdir::prior {

namespace fs = std::filesystem;

namespace {

constexpr const char* kManifest = "manifest.json";

[[noreturn]] void corrupt(const std::string& image_id, const std::string& what) {
  throw Error(ErrorCode::CacheCorrupt, "bundle " + image_id + ": " + what);
}

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

// "text=<id>" component of a composite provider id.
std::string encoder_from_provider_id(const std::string& provider_id) {
  std::size_t start = 0;
  while (start <= provider_id.size()) {
    const std::size_t end = std::min(provider_id.find(';', start), provider_id.size());
    const std::string part = provider_id.substr(start, end - start);
    if (part.rfind("text=", 0) == 0) return part.substr(5);
    start = end + 1;
  }
  return {};
}

}  // namespace

std::string composite_provider_id(const Providers& p) {
  return "mllm=" + p.mllm->id() + ";text=" + p.text_encoder->id() + ";diffusion=" + p.diffusion->id();
}

fs::path save_bundle(const PriorBundle& bundle, const fs::path& root) {
  if (bundle.image_id.empty()) throw Error(ErrorCode::InvalidArgument, "bundle has no image_id");
  const fs::path dir = root / bundle.image_id;
  fs::create_directories(dir);

  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, embedding] : {std::pair{"e_d", &bundle.e_d}, std::pair{"e_c", &bundle.e_c}}) {
    const std::vector<std::uint8_t> bytes = to_f32le(embedding->tokens);
    const std::string file = std::string(name) + ".f32";
    write_file_atomic(dir / file, bytes);
    tensors[name] = {{"file", file}, {"dtype", "f32le"}, {"shape", embedding->tokens.shape()}, {"sha256", sha256_hex(bytes)}};
  }
  const std::vector<std::uint8_t> png = encode_png(bundle.reference);
  write_file_atomic(dir / "reference.png", png);

  const nlohmann::json manifest{
      {"image_id", bundle.image_id},
      {"degradation_text", bundle.texts.degradation_text},
      {"content_text", bundle.texts.content_text},
      {"provider_id", bundle.texts.provider_id},
      {"prompt_template_id", bundle.texts.prompt_template_id},
      {"diffusion_meta",
       {{"steps", bundle.diffusion_meta.steps},
        {"seed", bundle.diffusion_meta.seed},
        {"negative_prompt", bundle.diffusion_meta.negative_prompt}}},
      {"tensors", tensors},
      {"reference", {{"file", "reference.png"}, {"format", "png"}, {"sha256", sha256_hex(png)}}},
      {"created_at", bundle.created_at},
  };
  // The manifest goes last so a reader never sees it before its payloads.
  write_file_atomic(dir / kManifest, bytes_of(manifest.dump(2) + "\n"));
  return dir;
}

bool bundle_exists(const fs::path& root, const std::string& image_id) {
  return fs::exists(root / image_id / kManifest);
}

PriorBundle load_bundle(const fs::path& root, const std::string& image_id) {
  const fs::path dir = root / image_id;
  if (!fs::exists(dir / kManifest)) {
    throw Error(ErrorCode::NotFound, "no bundle for image " + image_id + " under " + root.string());
  }
  nlohmann::json m;
  try {
    const std::vector<std::uint8_t> bytes = read_file(dir / kManifest);
    m = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    corrupt(image_id, std::string("unreadable manifest: ") + e.what());
  }

  PriorBundle b;
  try {
    b.image_id = m.at("image_id").get<std::string>();
    if (b.image_id != image_id) corrupt(image_id, "manifest names image " + b.image_id);
    b.texts.degradation_text = m.at("degradation_text").get<std::string>();
    b.texts.content_text = m.at("content_text").get<std::string>();
    b.texts.provider_id = m.at("provider_id").get<std::string>();
    b.texts.prompt_template_id = m.at("prompt_template_id").get<std::string>();
    const auto& meta = m.at("diffusion_meta");
    b.diffusion_meta.steps = meta.at("steps").get<int>();
    b.diffusion_meta.seed = meta.at("seed").get<std::int64_t>();
    b.diffusion_meta.negative_prompt = meta.at("negative_prompt").get<std::string>();
    b.created_at = m.at("created_at").get<std::string>();

    const std::string encoder = encoder_from_provider_id(b.texts.provider_id);
    for (const auto& [name, embedding, text] :
         {std::tuple{"e_d", &b.e_d, &b.texts.degradation_text}, std::tuple{"e_c", &b.e_c, &b.texts.content_text}}) {
      const auto& entry = m.at("tensors").at(name);
      if (entry.at("dtype").get<std::string>() != "f32le") corrupt(image_id, std::string(name) + " is not f32le");
      const fs::path file = dir / entry.at("file").get<std::string>();
      if (!fs::exists(file)) corrupt(image_id, "missing " + file.filename().string());
      const std::vector<std::uint8_t> bytes = read_file(file);
      if (sha256_hex(bytes) != entry.at("sha256").get<std::string>()) {
        corrupt(image_id, "digest mismatch for " + file.filename().string());
      }
      try {
        embedding->tokens = from_f32le(bytes, entry.at("shape").get<Shape>());
      } catch (const Error& e) {
        corrupt(image_id, e.what());
      }
      embedding->source_text_hash = sha256_hex(*text);
      embedding->encoder_id = encoder;
    }

    const auto& ref = m.at("reference");
    const fs::path file = dir / ref.at("file").get<std::string>();
    if (!fs::exists(file)) corrupt(image_id, "missing reference image");
    const std::vector<std::uint8_t> png = read_file(file);
    if (sha256_hex(png) != ref.at("sha256").get<std::string>()) corrupt(image_id, "digest mismatch for reference image");
    b.reference = decode_image(png);
  } catch (const nlohmann::json::exception& e) {
    corrupt(image_id, std::string("malformed manifest: ") + e.what());
  }
  return b;
}

BundleLock::BundleLock(const fs::path& root, const std::string& image_id) {
  fs::create_directories(root);
  const fs::path path = root / (image_id + ".lock");
  fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw Error(ErrorCode::IoError, "cannot open lock " + path.string() + ": " + std::strerror(errno));
  while (::flock(fd_, LOCK_EX) != 0) {
    if (errno != EINTR) {
      ::close(fd_);
      throw Error(ErrorCode::IoError, "cannot lock " + path.string() + ": " + std::strerror(errno));
    }
  }
}

BundleLock::~BundleLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

}  // namespace lmdir::prior
