#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmdir/model.hpp"
#include "lmdir/prior.hpp"

namespace httplib {
class Server;
}

namespace lmdir::service {

enum class Mode { Auto, Guided };

std::string mode_name(Mode mode);
Mode mode_from_name(const std::string& name);

struct Step {
  std::string input_image_id;
  std::optional<std::string> instruction;
  Mode mode = Mode::Auto;
  std::string output_image_id;
  std::string timestamp;
};

nlohmann::json to_json(const Step& step);

struct ServiceConfig {
  std::size_t max_sessions = 64;
  std::chrono::seconds ttl{3600};
  std::size_t max_upload_bytes = 16u << 20;
  // Bundle cache shared with the CLI; empty keeps bundles in memory only.
  std::filesystem::path bundle_root;
  std::int64_t diffusion_seed = 0;
};

struct CreatedSession {
  std::string session_id;
  std::string image_id;
  prior::PriorTexts priors;
};

struct RestoreResult {
  std::string output_image_id;
  std::string degradation_text;  // the instruction in guided mode
  std::string content_text;
};

// Chainable restoration sessions over one read-only model. Sessions live in
// memory, least recently used first out once max_sessions is reached, and
// expire ttl after their last use. Thread-safe; steps within one session are
// serialized.
class Service {
 public:
  using Clock = std::function<std::chrono::steady_clock::time_point()>;

  Service(Model model, prior::PriorPipeline& pipeline, ServiceConfig config = {}, Clock clock = {});
  ~Service();

  // Decodes a PNG or JPEG upload and builds its prior bundle.
  CreatedSession create_session(std::span<const std::uint8_t> image_bytes);

  RestoreResult restore(const std::string& session_id, Mode mode, const std::optional<std::string>& instruction);

  std::vector<Step> history(const std::string& session_id);

  // PNG bytes of an upload or an output still referenced by a live session.
  std::optional<std::vector<std::uint8_t>> image_png(const std::string& image_id);

  std::size_t session_count();
  const Model& model() const { return model_; }

  // Registers the JSON API on the server. Errors are {error: {code, message}}.
  void mount(httplib::Server& server);

 private:
  struct Session;

  std::shared_ptr<Session> find(const std::string& session_id);
  void add_image(const std::string& image_id, std::vector<std::uint8_t> png);
  void release_images(const Session& session);
  void evict_expired_locked();

  Model model_;
  prior::PriorPipeline& pipeline_;
  ServiceConfig config_;
  Clock clock_;

  std::mutex mutex_;
  std::list<std::string> lru_;  // most recently used first
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  struct StoredImage {
    std::vector<std::uint8_t> png;
    int refs = 0;
  };
  std::map<std::string, StoredImage> images_;
};

// Random 128-bit identifier as 32 lowercase hex digits.
std::string random_session_id();

}  // namespace lmdir::service
