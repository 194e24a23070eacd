#pragma once

// 8-bit RGB image files: PNG (via libpng) and binary PPM (P6).
// Values map linearly between [0,255] and [0,1].

#include <png.h>

#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "patchsr/image.hpp"

namespace patchsr::io {

namespace detail {

inline unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline std::string lower_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  for (char& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return e;
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

inline ImageBuffer from_rgb8(const std::vector<unsigned char>& rgb, int h, int w) {
  ImageBuffer img(h, w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c)
        img(c, i, j) = rgb[(static_cast<std::size_t>(i) * w + j) * 3 + c] / 255.0;
  return img;
}

/// Interleaved 8-bit RGB, values clamped to [0,1] first.
inline std::vector<unsigned char> to_rgb8(const ImageBuffer& img) {
  const int h = img.height(), w = img.width();
  std::vector<unsigned char> rgb(static_cast<std::size_t>(h) * w * 3);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c) rgb[(static_cast<std::size_t>(i) * w + j) * 3 + c] = detail::to_byte(img(c, i, j));
  return rgb;
}

inline void write_ppm(const std::filesystem::path& path, const ImageBuffer& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os << "P6\n" << img.width() << ' ' << img.height() << "\n255\n";
  const auto rgb = to_rgb8(img);
  os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!os) throw FormatError("write failed: " + path.string());
}

inline ImageBuffer read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char c;
    while (is.get(c)) {
      if (c == '#') {
        while (is.get(c) && c != '\n') {
        }
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    return t;
  };
  if (token() != "P6") throw FormatError(path.string() + ": not a binary PPM (P6)");
  const int w = std::stoi(token());
  const int h = std::stoi(token());
  const int maxv = std::stoi(token());
  if (w <= 0 || h <= 0 || maxv != 255) throw FormatError(path.string() + ": unsupported PPM header");
  std::vector<unsigned char> rgb(static_cast<std::size_t>(w) * h * 3);
  is.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (is.gcount() != static_cast<std::streamsize>(rgb.size())) throw FormatError(path.string() + ": truncated PPM");
  return from_rgb8(rgb, h, w);
}

inline void write_png(const std::filesystem::path& path, const ImageBuffer& img) {
  detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw FormatError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("libpng initialisation failed");
  }
  const auto rgb = to_rgb8(img);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height()));
  for (int i = 0; i < img.height(); ++i)
    rows[static_cast<std::size_t>(i)] =
        const_cast<png_bytep>(rgb.data() + static_cast<std::size_t>(i) * img.width() * 3);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("PNG encoding failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width()), static_cast<png_uint_32>(img.height()), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline ImageBuffer read_png(const std::filesystem::path& path) {
  detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw FormatError("cannot open " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8)) throw FormatError(path.string() + ": not a PNG");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("libpng initialisation failed");
  }
  std::vector<unsigned char> rgb;
  std::vector<png_bytep> rows;
  png_uint_32 w = 0, h = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("PNG decoding failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  if (png_get_rowbytes(png, info) != w * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(path.string() + ": unsupported PNG layout");
  }
  rgb.resize(static_cast<std::size_t>(w) * h * 3);
  rows.resize(h);
  for (png_uint_32 i = 0; i < h; ++i) rows[i] = rgb.data() + static_cast<std::size_t>(i) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return from_rgb8(rgb, static_cast<int>(h), static_cast<int>(w));
}

/// Dispatches on extension: .png, .ppm.
inline ImageBuffer read_image(const std::filesystem::path& path) {
  const auto e = detail::lower_ext(path);
  if (e == ".png") return read_png(path);
  if (e == ".ppm") return read_ppm(path);
  throw FormatError("unsupported image extension: " + path.string());
}

inline void write_image(const std::filesystem::path& path, const ImageBuffer& img) {
  const auto e = detail::lower_ext(path);
  if (e == ".png") return write_png(path, img);
  if (e == ".ppm") return write_ppm(path, img);
  throw FormatError("unsupported image extension: " + path.string());
}

}  // namespace patchsr::io
