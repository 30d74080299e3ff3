#include "lmdir/service.hpp"

#include <openssl/rand.h>

#include <httplib.h>

#include "lmdir/log.hpp"
#include "lmdir/serialize.hpp"

namespace lmdir::service {

std::string mode_name(Mode mode) { return mode == Mode::Auto ? "auto" : "guided"; }

Mode mode_from_name(const std::string& name) {
  if (name == "auto") return Mode::Auto;
  if (name == "guided") return Mode::Guided;
  throw Error(ErrorCode::InvalidArgument, "mode must be \"auto\" or \"guided\", got \"" + name + "\"");
}

nlohmann::json to_json(const Step& step) {
  return {{"input_image_id", step.input_image_id},
          {"instruction", step.instruction ? nlohmann::json(*step.instruction) : nlohmann::json(nullptr)},
          {"mode", mode_name(step.mode)},
          {"output_image_id", step.output_image_id},
          {"timestamp", step.timestamp}};
}

std::string random_session_id() {
  unsigned char bytes[16];
  if (RAND_bytes(bytes, sizeof bytes) != 1) throw Error(ErrorCode::IoError, "no randomness for a session id");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned char b : bytes) {
    out += hex[b >> 4];
    out += hex[b & 15];
  }
  return out;
}

struct Service::Session {
  std::string id;
  std::mutex mutex;  // serializes steps
  prior::PriorBundle bundle;
  TensorImage current;
  std::string current_id;
  std::vector<Step> steps;
  std::vector<std::string> image_ids;  // guarded by the service mutex
  std::chrono::steady_clock::time_point last_used;
  bool alive = true;  // guarded by the service mutex
};

Service::Service(Model model, prior::PriorPipeline& pipeline, ServiceConfig config, Clock clock)
    : model_(std::move(model)), pipeline_(pipeline), config_(std::move(config)), clock_(std::move(clock)) {
  if (config_.max_sessions == 0) throw Error(ErrorCode::InvalidConfig, "max_sessions must be positive");
  if (!clock_) clock_ = [] { return std::chrono::steady_clock::now(); };
}

Service::~Service() = default;

void Service::evict_expired_locked() {
  const auto now = clock_();
  for (auto it = lru_.begin(); it != lru_.end();) {
    auto s = sessions_.find(*it);
    if (now - s->second->last_used >= config_.ttl) {
      release_images(*s->second);
      s->second->alive = false;
      sessions_.erase(s);
      it = lru_.erase(it);
    } else {
      ++it;
    }
  }
}

void Service::release_images(const Session& session) {
  for (const auto& id : session.image_ids) {
    auto it = images_.find(id);
    if (it != images_.end() && --it->second.refs == 0) images_.erase(it);
  }
}

std::shared_ptr<Service::Session> Service::find(const std::string& session_id) {
  std::lock_guard lock(mutex_);
  evict_expired_locked();
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw Error(ErrorCode::NotFound, "no session " + session_id);
  it->second->last_used = clock_();
  lru_.remove(session_id);
  lru_.push_front(session_id);
  return it->second;
}

CreatedSession Service::create_session(std::span<const std::uint8_t> image_bytes) {
  if (image_bytes.size() > config_.max_upload_bytes) {
    throw Error(ErrorCode::InvalidArgument, "upload of " + std::to_string(image_bytes.size()) +
                                                " bytes exceeds the " + std::to_string(config_.max_upload_bytes) +
                                                " byte limit");
  }
  const TensorImage image = decode_image(image_bytes);
  auto session = std::make_shared<Session>();
  session->id = random_session_id();
  session->bundle = pipeline_.build_bundle(image, config_.diffusion_seed, config_.bundle_root);
  session->current = image;
  session->current_id = session->bundle.image_id;
  std::vector<std::uint8_t> png = encode_png(image);

  std::lock_guard lock(mutex_);
  evict_expired_locked();
  while (sessions_.size() >= config_.max_sessions) {
    auto victim = sessions_.find(lru_.back());
    release_images(*victim->second);
    victim->second->alive = false;
    sessions_.erase(victim);
    lru_.pop_back();
  }
  session->last_used = clock_();
  session->image_ids.push_back(session->current_id);
  auto& stored = images_[session->current_id];
  if (stored.refs++ == 0) stored.png = std::move(png);
  sessions_.emplace(session->id, session);
  lru_.push_front(session->id);
  return {session->id, session->current_id, session->bundle.texts};
}

RestoreResult Service::restore(const std::string& session_id, Mode mode,
                               const std::optional<std::string>& instruction) {
  if (mode == Mode::Auto && instruction) {
    throw Error(ErrorCode::InvalidArgument, "auto mode takes no instruction");
  }
  if (mode == Mode::Guided && (!instruction || instruction->empty())) {
    throw Error(ErrorCode::InvalidArgument, "guided mode needs a non-empty instruction");
  }
  const std::shared_ptr<Session> session = find(session_id);
  std::lock_guard step_lock(session->mutex);

  // The upload's bundle serves every step: e_c and the reference are never
  // regenerated, and auto mode keeps the upload's own degradation embedding.
  const TensorImage output = mode == Mode::Auto
                                 ? restore_auto(model_, session->current, session->bundle)
                                 : restore_guided(model_, session->current, *instruction, session->bundle, pipeline_);
  const std::string output_id = prior::image_id(output);
  std::vector<std::uint8_t> png = encode_png(output);

  Step step{session->current_id, instruction, mode, output_id, rfc3339_now()};
  {
    std::lock_guard lock(mutex_);
    if (session->alive) {
      session->image_ids.push_back(output_id);
      auto& stored = images_[output_id];
      if (stored.refs++ == 0) stored.png = std::move(png);
    }
  }
  session->steps.push_back(step);
  session->current = output;
  session->current_id = output_id;
  return {output_id, mode == Mode::Guided ? *instruction : session->bundle.texts.degradation_text,
          session->bundle.texts.content_text};
}

std::vector<Step> Service::history(const std::string& session_id) {
  const std::shared_ptr<Session> session = find(session_id);
  std::lock_guard step_lock(session->mutex);
  return session->steps;
}

std::optional<std::vector<std::uint8_t>> Service::image_png(const std::string& image_id) {
  std::lock_guard lock(mutex_);
  evict_expired_locked();
  auto it = images_.find(image_id);
  if (it == images_.end()) return std::nullopt;
  return it->second.png;
}

std::size_t Service::session_count() {
  std::lock_guard lock(mutex_);
  evict_expired_locked();
  return sessions_.size();
}

// --- HTTP ------------------------------------------------------------------------------

namespace {

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  res.status = status;
  res.set_content(nlohmann::json{{"error", {{"code", code}, {"message", message}}}}.dump(),
                  "application/json; charset=utf-8");
}

void send_json(httplib::Response& res, const nlohmann::json& body) {
  res.status = 200;
  res.set_content(body.dump(), "application/json; charset=utf-8");
}

// Runs a handler and turns library errors into the API's error bodies.
template <typename F>
void guarded(httplib::Response& res, const char* not_found_code, F&& f) {
  try {
    f();
  } catch (const Error& e) {
    switch (e.code()) {
      case ErrorCode::NotFound:
        send_error(res, 404, not_found_code, e.what());
        break;
      case ErrorCode::InvalidArgument:
      case ErrorCode::ShapeMismatch:
      case ErrorCode::ImageTooSmall:
        send_error(res, 422, "invalid_request", e.what());
        break;
      case ErrorCode::ProviderUnavailable:
        send_error(res, 503, "provider_unavailable", e.what());
        break;
      case ErrorCode::MalformedResponse:
      case ErrorCode::EmbeddingShapeMismatch:
        send_error(res, 502, "provider_error", e.what());
        break;
      default:
        log(LogLevel::Warning, std::string("request failed: ") + e.what());
        send_error(res, 500, "internal_error", e.what());
    }
  } catch (const nlohmann::json::exception& e) {
    send_error(res, 422, "invalid_body", e.what());
  }
}

}  // namespace

void Service::mount(httplib::Server& server) {
  // Room for the multipart framing around a maximal image.
  server.set_payload_max_length(config_.max_upload_bytes + (64u << 10));

  server.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
    send_json(res, {{"status", "ok"}});
  });

  server.Post("/api/sessions", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, "not_found", [&] {
      if (!req.is_multipart_form_data()) {
        send_error(res, 422, "invalid_body", "expected a multipart/form-data upload");
        return;
      }
      std::string content;
      if (req.has_file("image")) {
        content = req.get_file_value("image").content;
      } else if (!req.files.empty()) {
        content = req.files.begin()->second.content;
      } else {
        send_error(res, 422, "invalid_body", "no image part in the upload");
        return;
      }
      if (content.size() > config_.max_upload_bytes) {
        send_error(res, 422, "image_too_large",
                   "upload exceeds " + std::to_string(config_.max_upload_bytes) + " bytes");
        return;
      }
      CreatedSession created;
      try {
        created = create_session(std::span(reinterpret_cast<const std::uint8_t*>(content.data()), content.size()));
      } catch (const Error& e) {
        if (e.code() != ErrorCode::InvalidArgument) throw;
        send_error(res, 422, "invalid_image", e.what());
        return;
      }
      send_json(res, {{"session_id", created.session_id},
                      {"image_id", created.image_id},
                      {"priors", {{"degradation_text", created.priors.degradation_text},
                                  {"content_text", created.priors.content_text}}}});
    });
  });

  server.Post(R"(/api/sessions/([0-9a-zA-Z]+)/restore)", [this](const httplib::Request& req,
                                                                 httplib::Response& res) {
    guarded(res, "session_not_found", [&] {
      const nlohmann::json body = nlohmann::json::parse(req.body);
      if (!body.is_object() || !body.contains("mode") || !body["mode"].is_string()) {
        send_error(res, 422, "invalid_body", "body must be an object with a string \"mode\"");
        return;
      }
      std::optional<std::string> instruction;
      if (body.contains("instruction") && !body["instruction"].is_null()) {
        if (!body["instruction"].is_string()) {
          send_error(res, 422, "invalid_body", "\"instruction\" must be a string or null");
          return;
        }
        instruction = body["instruction"].get<std::string>();
      }
      const RestoreResult r = restore(req.matches[1], mode_from_name(body["mode"]), instruction);
      send_json(res, {{"output_image_id", r.output_image_id},
                      {"psnr", nullptr},
                      {"priors_used", {{"degradation_text", r.degradation_text}, {"content_text", r.content_text}}}});
    });
  });

  server.Get(R"(/api/sessions/([0-9a-zA-Z]+)/history)", [this](const httplib::Request& req,
                                                                httplib::Response& res) {
    guarded(res, "session_not_found", [&] {
      nlohmann::json steps = nlohmann::json::array();
      for (const Step& s : history(req.matches[1])) steps.push_back(to_json(s));
      send_json(res, {{"session_id", req.matches[1]}, {"steps", steps}});
    });
  });

  server.Get(R"(/api/images/([0-9a-f]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const auto png = image_png(req.matches[1]);
    if (!png) {
      send_error(res, 404, "image_not_found", "no image " + std::string(req.matches[1]));
      return;
    }
    res.status = 200;
    res.set_content(std::string(png->begin(), png->end()), "image/png");
  });

  // Unmatched API paths get the JSON error shape rather than an empty 404.
  server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (res.status == 404 && res.body.empty()) send_error(res, 404, "not_found", "no route for " + req.path);
    if (res.status == 413 && res.body.empty()) send_error(res, 413, "image_too_large", "request body too large");
  });
}

}  // namespace lmdir::service
