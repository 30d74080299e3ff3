#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace lmdir {

// Lowercase hex sha256.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

// 64-bit FNV-1a, used where a cheap stable hash is enough (fixture seeds).
std::uint64_t fnv1a64(std::string_view text);

}  // namespace lmdir
