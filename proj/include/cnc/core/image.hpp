#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "cnc/core/tensor.hpp"

namespace cnc {

/// Planar float image [C, H, W] with values in [0, 1]. Single-channel maps (depth, edge,
/// condition maps) use C == 1.
using Image = Tensor<float>;

inline int channels(const Image& im) { return im.dim(0); }
inline int height(const Image& im) { return im.dim(1); }
inline int width(const Image& im) { return im.dim(2); }

/// Binary H x W mask.
class Mask {
 public:
  Mask() = default;
  Mask(int h, int w, bool value = false)
      : h_(h), w_(w), bits_(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), value ? 1 : 0) {}

  int height() const noexcept { return h_; }
  int width() const noexcept { return w_; }
  std::size_t size() const noexcept { return bits_.size(); }
  bool operator()(int y, int x) const { return bits_[static_cast<std::size_t>(y) * w_ + x] != 0; }
  void set(int y, int x, bool v) { bits_[static_cast<std::size_t>(y) * w_ + x] = v ? 1 : 0; }
  bool operator[](std::size_t i) const { return bits_[i] != 0; }
  const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

  std::size_t popcount() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }
  Mask complement() const {
    Mask out = *this;
    for (auto& b : out.bits_) b = b ? 0 : 1;
    return out;
  }
  /// [1, H, W] float tensor with values exactly 0 or 1.
  Image to_image() const {
    Image out({1, h_, w_});
    for (std::size_t i = 0; i < bits_.size(); ++i) out[i] = bits_[i] ? 1.0f : 0.0f;
    return out;
  }
  static Mask from_image(const Image& im, float threshold = 0.5f) {
    Mask m(im.dim(1), im.dim(2));
    for (std::size_t i = 0; i < m.bits_.size(); ++i) m.bits_[i] = im[i] >= threshold ? 1 : 0;
    return m;
  }
  bool operator==(const Mask&) const = default;

 private:
  int h_ = 0;
  int w_ = 0;
  std::vector<std::uint8_t> bits_;
};

// ---------------------------------------------------------------------------------------------
// PNG I/O (lossless; 8-bit RGB/gray images, 16-bit gray maps).

namespace detail {

struct PngFile {
  std::FILE* fp = nullptr;
  ~PngFile() {
    if (fp) std::fclose(fp);
  }
};

[[noreturn]] inline void png_fail(const std::string& path, const std::string& what) {
  fail(ErrorKind::io, "png " + path + ": " + what);
}

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const Image& im, int bit_depth = 8) {
  const int C = channels(im), H = height(im), W = width(im);
  if (C != 1 && C != 3) detail::png_fail(path.string(), "unsupported channel count " + std::to_string(C));
  if (bit_depth != 8 && bit_depth != 16) detail::png_fail(path.string(), "unsupported bit depth");
  detail::PngFile file;
  file.fp = std::fopen(path.string().c_str(), "wb");
  if (!file.fp) detail::png_fail(path.string(), "cannot open for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    detail::png_fail(path.string(), "encode failure");
  }
  png_init_io(png, file.fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), bit_depth,
               C == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const int bytes = bit_depth / 8;
  const double maxv = bit_depth == 16 ? 65535.0 : 255.0;
  std::vector<png_byte> row(static_cast<std::size_t>(W) * C * bytes);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        const double v = std::clamp(static_cast<double>(im[(static_cast<std::size_t>(c) * H + y) * W + x]), 0.0, 1.0);
        const auto q = static_cast<unsigned>(std::lround(v * maxv));
        const std::size_t o = (static_cast<std::size_t>(x) * C + c) * bytes;
        if (bytes == 2) {
          row[o] = static_cast<png_byte>(q >> 8);
          row[o + 1] = static_cast<png_byte>(q & 0xFF);
        } else {
          row[o] = static_cast<png_byte>(q);
        }
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Reads an 8- or 16-bit gray/RGB(A) PNG as a [C, H, W] float image in [0, 1] (alpha dropped).
inline Image read_png(const std::filesystem::path& path) {
  detail::PngFile file;
  file.fp = std::fopen(path.string().c_str(), "rb");
  if (!file.fp) detail::png_fail(path.string(), "cannot open for reading");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    detail::png_fail(path.string(), "decode failure");
  }
  png_init_io(png, file.fp);
  png_read_info(png, info);
  const int W = static_cast<int>(png_get_image_width(png, info));
  const int H = static_cast<int>(png_get_image_height(png, info));
  int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  color = png_get_color_type(png, info);
  depth = png_get_bit_depth(png, info);
  const int C = (color & PNG_COLOR_MASK_COLOR) ? 3 : 1;
  const int bytes = depth / 8;
  const double maxv = depth == 16 ? 65535.0 : 255.0;
  std::vector<png_byte> row(png_get_rowbytes(png, info));
  Image im({C, H, W});
  for (int y = 0; y < H; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        const std::size_t o = (static_cast<std::size_t>(x) * C + c) * bytes;
        const unsigned q = bytes == 2 ? (static_cast<unsigned>(row[o]) << 8) | row[o + 1] : row[o];
        im[(static_cast<std::size_t>(c) * H + y) * W + x] = static_cast<float>(q / maxv);
      }
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return im;
}

/// Rounds every value to the nearest level of the given bit depth (what a PNG round trip stores).
inline Image quantize(const Image& im, int bit_depth) {
  const double maxv = bit_depth == 16 ? 65535.0 : 255.0;
  Image out = im;
  for (auto& v : out.storage())
    v = static_cast<float>(std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * maxv) / maxv);
  return out;
}

/// Places images side by side (all must share H and be 1- or 3-channel) with a 1-pixel gutter.
inline Image hconcat(const std::vector<Image>& tiles, float gutter = 1.0f) {
  require(!tiles.empty(), ErrorKind::shape, "hconcat: no tiles");
  const int H = height(tiles[0]);
  int W = 0;
  for (const auto& t : tiles) {
    require(height(t) == H, ErrorKind::shape, "hconcat: tiles differ in height");
    W += width(t) + 1;
  }
  W -= 1;
  Image out({3, H, W}, gutter);
  int x0 = 0;
  for (const auto& t : tiles) {
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < width(t); ++x)
          out[(static_cast<std::size_t>(c) * H + y) * W + x0 + x] =
              t[(static_cast<std::size_t>(channels(t) == 3 ? c : 0) * H + y) * width(t) + x];
    x0 += width(t) + 1;
  }
  return out;
}

inline Image vconcat(const std::vector<Image>& rows, float gutter = 1.0f) {
  require(!rows.empty(), ErrorKind::shape, "vconcat: no rows");
  int W = 0, H = 0;
  for (const auto& r : rows) {
    W = std::max(W, width(r));
    H += height(r) + 1;
  }
  H -= 1;
  Image out({3, H, W}, gutter);
  int y0 = 0;
  for (const auto& r : rows) {
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < height(r); ++y)
        for (int x = 0; x < width(r); ++x)
          out[(static_cast<std::size_t>(c) * H + y0 + y) * W + x] =
              r[(static_cast<std::size_t>(channels(r) == 3 ? c : 0) * height(r) + y) * width(r) + x];
    y0 += height(r) + 1;
  }
  return out;
}

}  // namespace cnc
