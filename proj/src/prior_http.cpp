#include <httplib.h>

#include <cmath>

#include <json.hpp>

#include "lmdir/prior.hpp"
#include "lmdir/serialize.hpp"

namespace lmdir::prior {

namespace {

struct Url {
  std::string base;
  std::string path;
};

Url split_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos || url.compare(0, scheme, "http") != 0) {
    throw Error(ErrorCode::InvalidArgument, "provider endpoint must be an http:// URL or 'fixture', got '" + url + "'");
  }
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

nlohmann::json post_json(const std::string& url, const nlohmann::json& body) {
  const Url u = split_url(url);
  httplib::Client client(u.base);
  client.set_connection_timeout(10);
  client.set_read_timeout(300);
  const auto res = client.Post(u.path, body.dump(), "application/json");
  if (!res) {
    throw Error(ErrorCode::ProviderUnavailable, url + ": " + httplib::to_string(res.error()));
  }
  if (res->status >= 500 || res->status == 429) {
    throw Error(ErrorCode::ProviderUnavailable, url + " answered HTTP " + std::to_string(res->status));
  }
  if (res->status != 200) {
    throw Error(ErrorCode::MalformedResponse, url + " rejected the request with HTTP " + std::to_string(res->status));
  }
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedResponse, url + " returned invalid JSON: " + e.what());
  }
}

template <typename T>
T field(const nlohmann::json& j, const char* name, const std::string& url) {
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::MalformedResponse, url + " response lacks a valid '" + name + "' field");
  }
}

std::string png_base64(const TensorImage& image) { return base64_encode(encode_png(image)); }

}  // namespace

TensorImage resize_longest_side(const TensorImage& image, std::int64_t longest) {
  const std::int64_t h = image.height(), w = image.width();
  const std::int64_t side = std::max(h, w);
  if (side <= longest) return image;
  const double scale = static_cast<double>(longest) / static_cast<double>(side);
  const auto nh = std::max<std::int64_t>(1, std::llround(static_cast<double>(h) * scale));
  const auto nw = std::max<std::int64_t>(1, std::llround(static_cast<double>(w) * scale));
  return TensorImage(resize_bilinear(image.pixels(), nh, nw));
}

std::string HttpMllm::describe(const MllmRequest& request) {
  const nlohmann::json body{{"prompt", request.prompt},
                            {"prompt_template_id", request.prompt_template_id},
                            {"image_png_base64", png_base64(resize_longest_side(request.image, 512))}};
  return field<std::string>(post_json(url_, body), "text", url_);
}

Tensor<float> HttpTextEncoder::encode(const std::string& text) {
  const nlohmann::json reply = post_json(url_, nlohmann::json{{"text", text}});
  const Shape shape = field<Shape>(reply, "shape", url_);
  const std::vector<std::uint8_t> bytes = base64_decode(field<std::string>(reply, "data_f32le_base64", url_));
  try {
    return from_f32le(bytes, shape);
  } catch (const Error& e) {
    throw Error(ErrorCode::MalformedResponse, url_ + ": " + e.what());
  }
}

TensorImage HttpDiffusion::generate(const DiffusionRequest& request) {
  const nlohmann::json body{{"prompt", request.prompt},
                            {"negative_prompt", request.negative_prompt},
                            {"steps", request.steps},
                            {"seed", request.seed}};
  const std::vector<std::uint8_t> png =
      base64_decode(field<std::string>(post_json(url_, body), "image_png_base64", url_));
  try {
    return decode_image(png);
  } catch (const Error& e) {
    throw Error(ErrorCode::MalformedResponse, url_ + ": " + e.what());
  }
}

std::vector<float> HttpImageEncoder::embed(const TensorImage& image) {
  const nlohmann::json reply = post_json(url_, nlohmann::json{{"image_png_base64", png_base64(image)}});
  return field<std::vector<float>>(reply, "embedding", url_);
}

}  // namespace lmdir::prior
