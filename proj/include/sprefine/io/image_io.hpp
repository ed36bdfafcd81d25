#ifndef SPREFINE_IO_IMAGE_IO_HPP
#define SPREFINE_IO_IMAGE_IO_HPP

// Grayscale PNG (8/16-bit, via libpng) and PGM (P2/P5) codecs. Intensities are
// value / max_value on load and round(clamp(v, 0, 1) * max_value) on save.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "sprefine/error.hpp"
#include "sprefine/geometry.hpp"
#include "sprefine/image.hpp"

namespace sprefine::io {

using Bytes = std::vector<std::uint8_t>;

inline Bytes read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return Bytes(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const void* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline void write_file(const std::string& path, const Bytes& b) { write_file(path, b.data(), b.size()); }
inline void write_file(const std::string& path, const std::string& s) { write_file(path, s.data(), s.size()); }

namespace detail {

struct PngReadState {
  const Bytes* src = nullptr;
  std::size_t pos = 0;
  char error[256] = {0};
};

inline void png_read_bytes(png_structp png, png_bytep out, png_size_t n) {
  auto* st = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (st->pos + n > st->src->size()) png_error(png, "truncated PNG data");
  std::memcpy(out, st->src->data() + st->pos, n);
  st->pos += n;
}

inline void png_on_error(png_structp png, png_const_charp msg) {
  auto* st = static_cast<PngReadState*>(png_get_error_ptr(png));
  if (st) std::snprintf(st->error, sizeof st->error, "%s", msg);
  png_longjmp(png, 1);
}

inline void png_on_warning(png_structp, png_const_charp) {}

struct PngDecoded {
  int width = 0, height = 0, depth = 0;
  std::vector<std::uint8_t> raw;  // rows of width * depth/8 bytes, big-endian for 16-bit
  std::vector<png_bytep> rows;
};

// Kept free of non-trivial locals so the longjmp path is well defined.
inline bool decode_png_raw(const Bytes& bytes, PngDecoded* out, PngReadState* st, std::uint32_t max_dim) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, st, png_on_error, png_on_warning);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  st->src = &bytes;
  png_set_read_fn(png, st, png_read_bytes);
  png_read_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info), h = png_get_image_height(png, info);
  if (max_dim > 0 && (w > max_dim || h > max_dim)) {
    std::snprintf(st->error, sizeof st->error, "oversize");
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  const int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE)
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);
  depth = png_get_bit_depth(png, info);
  const png_size_t rowbytes = png_get_rowbytes(png, info);
  out->width = static_cast<int>(w);
  out->height = static_cast<int>(h);
  out->depth = depth;
  out->raw.resize(rowbytes * h);
  out->rows.resize(h);
  for (png_uint_32 i = 0; i < h; ++i) out->rows[i] = out->raw.data() + i * rowbytes;
  png_read_image(png, out->rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

inline bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

}  // namespace detail

/// Thrown when an image exceeds the configured maximum dimension.
class OversizeImage : public IoError {
 public:
  explicit OversizeImage(const std::string& what) : IoError(what) {}
};

inline Image decode_png(const Bytes& bytes, std::uint32_t max_dim = 0) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw IoError("not a PNG file");
  detail::PngDecoded d;
  detail::PngReadState st;
  if (!detail::decode_png_raw(bytes, &d, &st, max_dim)) {
    if (std::string(st.error) == "oversize") throw OversizeImage("image exceeds the maximum dimension");
    throw IoError(std::string("PNG decode failed: ") + (st.error[0] ? st.error : "unknown error"));
  }
  Image img(d.height, d.width);
  const double maxv = d.depth == 16 ? 65535.0 : 255.0;
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = d.depth == 16 ? (d.raw[2 * i] << 8 | d.raw[2 * i + 1]) : d.raw[i];
    img.data[i] = v / maxv;
  }
  return img;
}

inline Image decode_pgm(const Bytes& bytes, std::uint32_t max_dim = 0) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '2' && bytes[1] != '5')) throw IoError("not a PGM file");
  const bool binary = bytes[1] == '5';
  std::size_t pos = 2;
  auto next_int = [&]() -> long {
    for (;;) {
      while (pos < bytes.size() && detail::is_space(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    if (pos >= bytes.size() || bytes[pos] < '0' || bytes[pos] > '9') throw IoError("malformed PGM header");
    long v = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > 1'000'000'000L) throw IoError("malformed PGM header");
    }
    return v;
  };
  const long w = next_int(), h = next_int(), maxv = next_int();
  if (w <= 0 || h <= 0 || maxv <= 0 || maxv > 65535) throw IoError("invalid PGM dimensions");
  if (max_dim > 0 && (w > max_dim || h > max_dim)) throw OversizeImage("image exceeds the maximum dimension");
  Image img(static_cast<int>(h), static_cast<int>(w));
  if (binary) {
    ++pos;  // single whitespace after maxval
    const std::size_t bpp = maxv > 255 ? 2 : 1;
    if (bytes.size() < pos + img.size() * bpp) throw IoError("truncated PGM data");
    for (std::size_t i = 0; i < img.size(); ++i) {
      const double v = bpp == 2 ? (bytes[pos + 2 * i] << 8 | bytes[pos + 2 * i + 1]) : bytes[pos + i];
      img.data[i] = v / static_cast<double>(maxv);
    }
  } else {
    for (auto& v : img.data) v = static_cast<double>(next_int()) / static_cast<double>(maxv);
  }
  return img;
}

/// PNG or PGM, detected from the leading bytes.
inline Image decode_image(const Bytes& bytes, std::uint32_t max_dim = 0) {
  if (bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0) return decode_png(bytes, max_dim);
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '2' || bytes[1] == '5')) return decode_pgm(bytes, max_dim);
  throw IoError("unrecognized image format (expected PNG or PGM)");
}

inline Image read_image(const std::string& path) {
  try {
    return decode_image(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

namespace detail {

inline void png_write_bytes(png_structp png, png_bytep data, png_size_t n) {
  auto* out = static_cast<Bytes*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + n);
}

inline void png_flush(png_structp) {}

inline bool encode_png_raw(const std::uint8_t* raw, int width, int height, int depth, int color, Bytes* out) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_set_write_fn(png, out, png_write_bytes, png_flush);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), depth, color,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const int channels = color == PNG_COLOR_TYPE_RGB ? 3 : 1;
  const std::size_t rowbytes = static_cast<std::size_t>(width) * channels * (depth / 8);
  for (int i = 0; i < height; ++i) png_write_row(png, const_cast<png_bytep>(raw + i * rowbytes));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

inline std::uint16_t quantize(double v, double maxv) {
  if (!std::isfinite(v)) v = 0.0;
  return static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * maxv));
}

}  // namespace detail

inline Bytes encode_png(const Image& img, int depth = 8) {
  if (depth != 8 && depth != 16) throw InvalidInput("encode_png: depth must be 8 or 16");
  std::vector<std::uint8_t> raw(img.size() * (depth / 8));
  for (std::size_t i = 0; i < img.size(); ++i) {
    const auto q = detail::quantize(img.data[i], depth == 16 ? 65535.0 : 255.0);
    if (depth == 16) {
      raw[2 * i] = static_cast<std::uint8_t>(q >> 8);
      raw[2 * i + 1] = static_cast<std::uint8_t>(q & 0xff);
    } else {
      raw[i] = static_cast<std::uint8_t>(q);
    }
  }
  Bytes out;
  if (!detail::encode_png_raw(raw.data(), img.cols, img.rows, depth, PNG_COLOR_TYPE_GRAY, &out))
    throw IoError("PNG encode failed");
  return out;
}

inline Bytes encode_pgm(const Image& img, int maxval = 255) {
  if (maxval < 1 || maxval > 65535) throw InvalidInput("encode_pgm: maxval must lie in [1, 65535]");
  std::string header = "P5\n" + std::to_string(img.cols) + " " + std::to_string(img.rows) + "\n" + std::to_string(maxval) + "\n";
  Bytes out(header.begin(), header.end());
  for (double v : img.data) {
    const auto q = detail::quantize(v, maxval);
    if (maxval > 255) out.push_back(static_cast<std::uint8_t>(q >> 8));
    out.push_back(static_cast<std::uint8_t>(q & 0xff));
  }
  return out;
}

/// 8-bit RGB raster for overlays.
struct RgbImage {
  int rows = 0, cols = 0;
  std::vector<std::uint8_t> data;  // r, g, b per pixel

  RgbImage(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c * 3, 0) {}
  void set(int i, int j, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    if (i < 0 || j < 0 || i >= rows || j >= cols) return;
    auto* p = &data[(static_cast<std::size_t>(i) * cols + j) * 3];
    p[0] = r, p[1] = g, p[2] = b;
  }
};

inline Bytes encode_png(const RgbImage& img) {
  Bytes out;
  if (!detail::encode_png_raw(img.data.data(), img.cols, img.rows, 8, PNG_COLOR_TYPE_RGB, &out))
    throw IoError("PNG encode failed");
  return out;
}

struct Rgb {
  std::uint8_t r, g, b;
};

/// Upscaled grey copy of `base` with polylines drawn on top. Pixel centre
/// (x, y) maps to the centre of the corresponding upscaled block.
inline RgbImage overlay(const Image& base, const std::vector<std::pair<Polyline, Rgb>>& lines, int upscale = 4) {
  upscale = std::max(upscale, 1);
  RgbImage out(base.rows * upscale, base.cols * upscale);
  double lo = 1e300, hi = -1e300;
  for (double v : base.data) lo = std::min(lo, v), hi = std::max(hi, v);
  const double span = hi > lo ? hi - lo : 1.0;
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) {
      const auto g = static_cast<std::uint8_t>(std::lround(255.0 * (base(i / upscale, j / upscale) - lo) / span));
      out.set(i, j, g, g, g);
    }
  for (const auto& [line, c] : lines)
    for (std::size_t k = 0; k + 1 < line.size(); ++k) {
      const auto a = line[k], b = line[k + 1];
      const double len = std::hypot(b.x - a.x, b.y - a.y) * upscale;
      const int steps = std::max(1, static_cast<int>(std::ceil(2.0 * len)));
      for (int t = 0; t <= steps; ++t) {
        const double u = static_cast<double>(t) / steps;
        const double x = (a.x + u * (b.x - a.x) + 0.5) * upscale - 0.5;
        const double y = (a.y + u * (b.y - a.y) + 0.5) * upscale - 0.5;
        out.set(static_cast<int>(std::lround(y)), static_cast<int>(std::lround(x)), c.r, c.g, c.b);
      }
    }
  return out;
}

}  // namespace sprefine::io

#endif
