#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "lmdir/tensor.hpp"

namespace lmdir {

// (H, W, 3) float image in [0, 1], RGB order.
class TensorImage {
 public:
  TensorImage() = default;
  explicit TensorImage(Tensor<float> pixels);

  static TensorImage filled(std::int64_t height, std::int64_t width, float value);

  std::int64_t height() const { return pixels_.dim(0); }
  std::int64_t width() const { return pixels_.dim(1); }
  const Tensor<float>& pixels() const { return pixels_; }
  bool empty() const { return pixels_.empty(); }

  float at(std::int64_t y, std::int64_t x, int c) const { return pixels_[(y * width() + x) * 3 + c]; }

  // True when every channel of every pixel holds the same value.
  bool is_constant() const;

  friend bool operator==(const TensorImage& a, const TensorImage& b) { return a.pixels_ == b.pixels_; }

 private:
  Tensor<float> pixels_;
};

// Rounds to the nearest of the 256 levels an 8-bit PNG can store.
TensorImage quantize_8bit(const TensorImage& image);

// PNG or JPEG, detected from the signature.
TensorImage decode_image(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_png(const TensorImage& image);

TensorImage read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const TensorImage& image);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
// Writes to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// Bilinear resampling of (H, W, C) with half-pixel centres; the identity when
// the size is unchanged.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& image, std::int64_t height, std::int64_t width);

// Reflect padding of (H, W, C) on the bottom and right edges.
template <typename T>
Tensor<T> reflect_pad(const Tensor<T>& image, std::int64_t height, std::int64_t width);

// (H, W, C) window starting at (y, x).
template <typename T>
Tensor<T> crop(const Tensor<T>& image, std::int64_t y, std::int64_t x, std::int64_t height, std::int64_t width);

template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& image);

}  // namespace lmdir
