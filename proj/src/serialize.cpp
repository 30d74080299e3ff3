#include "lmdir/serialize.hpp"

#include <openssl/evp.h>

#include <bit>
#include <chrono>
#include <cstring>
#include <ctime>

namespace lmdir {

static_assert(sizeof(float) == 4);

std::vector<std::uint8_t> to_f32le(const Tensor<float>& t) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(t.size()) * 4);
  for (std::int64_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(t[i]);
    for (int b = 0; b < 4; ++b) out[static_cast<std::size_t>(i) * 4 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  return out;
}

Tensor<float> from_f32le(std::span<const std::uint8_t> bytes, const Shape& shape) {
  const std::int64_t n = shape_numel(shape);
  if (static_cast<std::int64_t>(bytes.size()) != 4 * n) {
    throw Error(ErrorCode::ShapeMismatch, std::to_string(bytes.size()) + " bytes do not hold a float32 tensor of shape " +
                                              shape_string(shape));
  }
  Tensor<float> t(shape);
  for (std::int64_t i = 0; i < n; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[static_cast<std::size_t>(i) * 4 + b]) << (8 * b);
    t[i] = std::bit_cast<float>(bits);
  }
  return t;
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw Error(ErrorCode::MalformedResponse, "base64 payload length is not a multiple of 4");
  std::vector<std::uint8_t> out(3 * text.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw Error(ErrorCode::MalformedResponse, "invalid base64 payload");
  std::size_t padding = 0;
  if (!text.empty() && text.back() == '=') ++padding;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++padding;
  out.resize(static_cast<std::size_t>(n) - padding);
  return out;
}

std::string rfc3339_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace lmdir
