#pragma once

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "canon_pose/errors.hpp"

namespace canon_pose::png {

struct Gray8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void on_error(png_structp, png_const_charp msg) { throw IoError(std::string("png: ") + msg); }
inline void on_warning(png_structp, png_const_charp) {}
}  // namespace detail

/// Writes an 8-bit grayscale PNG. Output bytes depend only on the pixels.
inline void write_gray8(const std::filesystem::path& path, const Gray8& img) {
  if (img.pixels.size() != img.height * img.width || img.height == 0) throw DimensionError("png: bad image geometry");
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  detail::File fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot open '" + path.string() + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::on_error, detail::on_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png: out of memory");
  }
  try {
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t r = 0; r < img.height; ++r) png_write_row(png, img.pixels.data() + r * img.width);
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  if (std::fflush(fp.get()) != 0) throw IoError("failed writing '" + path.string() + "'");
}

/// Reads any PNG, converting to 8-bit grayscale.
inline Gray8 read_gray8(const std::filesystem::path& path) {
  detail::File fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open '" + path.string() + "' for reading");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) throw FormatError(path.string() + ": not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::on_error, detail::on_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png: out of memory");
  }
  Gray8 out;
  try {
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE)
      png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    png_read_update_info(png, info);
    out.width = png_get_image_width(png, info);
    out.height = png_get_image_height(png, info);
    out.pixels.resize(out.width * out.height);
    for (std::size_t r = 0; r < out.height; ++r) png_read_row(png, out.pixels.data() + r * out.width, nullptr);
    png_read_end(png, nullptr);
  } catch (const IoError& e) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(path.string() + ": " + e.what());
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace canon_pose::png
