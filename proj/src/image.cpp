#include "lmdir/image.hpp"

#include <png.h>
#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <iterator>

namespace lmdir {

TensorImage::TensorImage(Tensor<float> pixels) : pixels_(std::move(pixels)) {
  if (pixels_.rank() != 3 || pixels_.dim(2) != 3 || pixels_.dim(0) < 1 || pixels_.dim(1) < 1) {
    throw Error(ErrorCode::ShapeMismatch, "image must be (H, W, 3) with H, W >= 1, got " +
                                              shape_string(pixels_.shape()));
  }
  for (float v : pixels_.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw Error(ErrorCode::InvalidArgument, "image values must lie in [0, 1]");
    }
  }
}

TensorImage TensorImage::filled(std::int64_t height, std::int64_t width, float value) {
  return TensorImage(Tensor<float>(Shape{height, width, 3}, value));
}

bool TensorImage::is_constant() const {
  const auto v = pixels_.values();
  return std::all_of(v.begin(), v.end(), [&](float x) { return x == v.front(); });
}

TensorImage quantize_8bit(const TensorImage& image) {
  Tensor<float> px = image.pixels();
  for (auto& v : px.values()) v = std::round(v * 255.0f) / 255.0f;
  return TensorImage(std::move(px));
}

namespace {

bool is_png(std::span<const std::uint8_t> b) { return b.size() >= 8 && png_sig_cmp(b.data(), 0, 8) == 0; }
bool is_jpeg(std::span<const std::uint8_t> b) { return b.size() >= 3 && b[0] == 0xFF && b[1] == 0xD8 && b[2] == 0xFF; }

TensorImage from_rgb8(const std::uint8_t* rgb, std::int64_t h, std::int64_t w) {
  Tensor<float> px(Shape{h, w, 3});
  for (std::int64_t i = 0; i < h * w * 3; ++i) px[i] = static_cast<float>(rgb[i]) / 255.0f;
  return TensorImage(std::move(px));
}

TensorImage decode_png(std::span<const std::uint8_t> bytes) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw Error(ErrorCode::InvalidArgument, std::string("cannot decode PNG: ") + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw Error(ErrorCode::InvalidArgument, std::string("cannot decode PNG: ") + img.message);
  }
  return from_rgb8(buf.data(), img.height, img.width);
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

TensorImage decode_jpeg(std::span<const std::uint8_t> bytes) {
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  std::vector<std::uint8_t> buf;
  std::int64_t h = 0, w = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw Error(ErrorCode::InvalidArgument, "cannot decode JPEG");
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  h = cinfo.output_height;
  w = cinfo.output_width;
  buf.resize(static_cast<std::size_t>(h * w * 3));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = buf.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_rgb8(buf.data(), h, w);
}

}  // namespace

TensorImage decode_image(std::span<const std::uint8_t> bytes) {
  if (is_png(bytes)) return decode_png(bytes);
  if (is_jpeg(bytes)) return decode_jpeg(bytes);
  throw Error(ErrorCode::InvalidArgument, "unsupported image format (expected PNG or JPEG)");
}

std::vector<std::uint8_t> encode_png(const TensorImage& image) {
  const auto h = image.height(), w = image.width();
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h * w * 3));
  const auto& px = image.pixels();
  for (std::int64_t i = 0; i < h * w * 3; ++i) {
    rgb[i] = static_cast<std::uint8_t>(std::lround(std::clamp(px[i], 0.0f, 1.0f) * 255.0f));
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, rgb.data(), 0, nullptr)) {
    throw Error(ErrorCode::IoError, std::string("cannot encode PNG: ") + img.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, rgb.data(), 0, nullptr)) {
    throw Error(ErrorCode::IoError, std::string("cannot encode PNG: ") + img.message);
  }
  out.resize(size);
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::NotFound, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoError, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TensorImage read_image(const std::filesystem::path& path) { return decode_image(read_file(path)); }

void write_png(const std::filesystem::path& path, const TensorImage& image) { write_file_atomic(path, encode_png(image)); }

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& image, std::int64_t height, std::int64_t width) {
  require_rank(image.shape(), 3, "resize_bilinear input");
  const std::int64_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (height == h && width == w) return image;
  Tensor<T> out(Shape{height, width, c});
  const double sy = static_cast<double>(h) / static_cast<double>(height);
  const double sx = static_cast<double>(w) / static_cast<double>(width);
  for (std::int64_t y = 0; y < height; ++y) {
    const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    const std::int64_t y0 = std::min<std::int64_t>(static_cast<std::int64_t>(fy), h - 1);
    const std::int64_t y1 = std::min<std::int64_t>(y0 + 1, h - 1);
    const T wy = static_cast<T>(fy - static_cast<double>(y0));
    for (std::int64_t x = 0; x < width; ++x) {
      const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      const std::int64_t x0 = std::min<std::int64_t>(static_cast<std::int64_t>(fx), w - 1);
      const std::int64_t x1 = std::min<std::int64_t>(x0 + 1, w - 1);
      const T wx = static_cast<T>(fx - static_cast<double>(x0));
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const T a = image[(y0 * w + x0) * c + ch], b = image[(y0 * w + x1) * c + ch];
        const T d = image[(y1 * w + x0) * c + ch], e = image[(y1 * w + x1) * c + ch];
        const T top = a + (b - a) * wx;
        const T bottom = d + (e - d) * wx;
        out[(y * width + x) * c + ch] = top + (bottom - top) * wy;
      }
    }
  }
  return out;
}

namespace {

std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

template <typename T>
Tensor<T> reflect_pad(const Tensor<T>& image, std::int64_t height, std::int64_t width) {
  require_rank(image.shape(), 3, "reflect_pad input");
  const std::int64_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (height < h || width < w) throw Error(ErrorCode::ShapeMismatch, "reflect_pad cannot shrink an image");
  if (height == h && width == w) return image;
  Tensor<T> out(Shape{height, width, c});
  for (std::int64_t y = 0; y < height; ++y) {
    const std::int64_t sy = reflect_index(y, h);
    for (std::int64_t x = 0; x < width; ++x) {
      const std::int64_t sx = reflect_index(x, w);
      std::copy_n(image.data() + (sy * w + sx) * c, c, out.data() + (y * width + x) * c);
    }
  }
  return out;
}

template <typename T>
Tensor<T> crop(const Tensor<T>& image, std::int64_t y, std::int64_t x, std::int64_t height, std::int64_t width) {
  require_rank(image.shape(), 3, "crop input");
  const std::int64_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (y < 0 || x < 0 || y + height > h || x + width > w) {
    throw Error(ErrorCode::ShapeMismatch, "crop window outside " + shape_string(image.shape()));
  }
  Tensor<T> out(Shape{height, width, c});
  for (std::int64_t r = 0; r < height; ++r) {
    std::copy_n(image.data() + ((y + r) * w + x) * c, width * c, out.data() + r * width * c);
  }
  return out;
}

template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& image) {
  require_rank(image.shape(), 3, "flip_horizontal input");
  const std::int64_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  Tensor<T> out(image.shape());
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      std::copy_n(image.data() + (y * w + x) * c, c, out.data() + (y * w + (w - 1 - x)) * c);
  return out;
}

template Tensor<float> resize_bilinear(const Tensor<float>&, std::int64_t, std::int64_t);
template Tensor<double> resize_bilinear(const Tensor<double>&, std::int64_t, std::int64_t);
template Tensor<float> reflect_pad(const Tensor<float>&, std::int64_t, std::int64_t);
template Tensor<double> reflect_pad(const Tensor<double>&, std::int64_t, std::int64_t);
template Tensor<float> crop(const Tensor<float>&, std::int64_t, std::int64_t, std::int64_t, std::int64_t);
template Tensor<double> crop(const Tensor<double>&, std::int64_t, std::int64_t, std::int64_t, std::int64_t);
template Tensor<float> flip_horizontal(const Tensor<float>&);
template Tensor<double> flip_horizontal(const Tensor<double>&);

}  // namespace lmdir
