#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lmdir/tensor.hpp"

namespace lmdir {

// Raw little-endian float32, row-major, no header.
std::vector<std::uint8_t> to_f32le(const Tensor<float>& t);
Tensor<float> from_f32le(std::span<const std::uint8_t> bytes, const Shape& shape);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

// UTC time as RFC 3339 with second precision, e.g. 2024-05-01T12:00:00Z.
std::string rfc3339_now();

}  // namespace lmdir
