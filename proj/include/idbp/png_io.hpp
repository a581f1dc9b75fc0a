#pragma once

// PNG import/export (8/16-bit, gray/RGB) through libpng.

#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "idbp/error.hpp"
#include "idbp/image.hpp"

namespace idbp {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_error_fn(png_structp png, png_const_charp msg)
{
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  if (what != nullptr) {
    *what = msg;
  }
  png_longjmp(png, 1);
}

inline void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace detail

/// Reads an 8- or 16-bit gray or RGB PNG into [0,1] samples. Palette images
/// are expanded to RGB and alpha channels are dropped.
inline Image load_png(const std::filesystem::path& path)
{
  detail::FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) {
    throw InputError("cannot open PNG '" + path.string() + "'");
  }
  png_byte sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw InputError("'" + path.string() + "' is not a PNG file");
  }

  std::string error_message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error_message, detail::png_error_fn,
                                           detail::png_warning_fn);
  png_infop info = png_create_info_struct(png);
  // Everything touched after setjmp lives in the heap or is volatile-free.
  std::vector<png_byte> raw;
  std::vector<png_bytep> rows;
  int width = 0, height = 0, bit_depth = 0, color_type = 0;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw InputError("failed to decode PNG '" + path.string() + "': " + error_message);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  bit_depth = png_get_bit_depth(png, info);
  color_type = png_get_color_type(png, info);

  if (color_type == PNG_COLOR_TYPE_PALETTE) {
    png_set_palette_to_rgb(png);
    bit_depth = 8;
    color_type = PNG_COLOR_TYPE_RGB;
  } else if (bit_depth != 8 && bit_depth != 16) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw InputError("unsupported PNG bit depth " + std::to_string(bit_depth) + " in '" + path.string() + "'");
  }
  if (color_type & PNG_COLOR_MASK_ALPHA) {
    png_set_strip_alpha(png);
  }
  if (png_get_valid(png, info, PNG_INFO_tRNS)) {
    png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
  }
  if (bit_depth == 16) {
    png_set_swap(png);  // host little-endian
  }
  png_read_update_info(png, info);
  const int channels = png_get_channels(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  raw.resize(rowbytes * static_cast<std::size_t>(height));
  rows.resize(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) {
    rows[static_cast<std::size_t>(y)] = raw.data() + rowbytes * static_cast<std::size_t>(y);
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const ColorSpace cs = channels >= 3 ? ColorSpace::RGB : ColorSpace::Gray;
  Image img(width, height, cs);
  const double maxval = bit_depth == 16 ? 65535.0 : 255.0;
  for (int y = 0; y < height; ++y) {
    const png_byte* row = rows[static_cast<std::size_t>(y)];
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < img.channels(); ++c) {
        const std::size_t idx = static_cast<std::size_t>(x) * channels + c;
        double q = 0;
        if (bit_depth == 16) {
          q = static_cast<double>(row[2 * idx] | (row[2 * idx + 1] << 8));
        } else {
          q = static_cast<double>(row[idx]);
        }
        img.at(c, y, x) = q / maxval;
      }
    }
  }
  return img;
}

/// Clamps to [0,1] and quantizes with round-half-up. YCbCr images are
/// converted to RGB first.
inline void save_png(const Image& input, const std::filesystem::path& path, int bit_depth = 8)
{
  if (bit_depth != 8 && bit_depth != 16) {
    throw std::invalid_argument("save_png: bit depth must be 8 or 16");
  }
  const Image img = input.colorspace() == ColorSpace::YCbCr ? ycbcr_to_rgb(input) : input;
  const int channels = img.channels();
  const double maxval = bit_depth == 16 ? 65535.0 : 255.0;
  const int bytes = bit_depth / 8;
  const std::size_t rowbytes = static_cast<std::size_t>(img.width()) * channels * bytes;
  std::vector<png_byte> raw(rowbytes * static_cast<std::size_t>(img.height()));
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < channels; ++c) {
        const double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
        const auto q = static_cast<unsigned>(std::floor(v * maxval + 0.5));
        const std::size_t idx = rowbytes * static_cast<std::size_t>(y) + (static_cast<std::size_t>(x) * channels + c) * bytes;
        if (bytes == 2) {
          raw[idx] = static_cast<png_byte>(q >> 8);  // PNG is big-endian
          raw[idx + 1] = static_cast<png_byte>(q & 0xFF);
        } else {
          raw[idx] = static_cast<png_byte>(q);
        }
      }
    }
  }

  detail::FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) {
    throw InputError("cannot write PNG '" + path.string() + "'");
  }
  std::string error_message;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error_message, detail::png_error_fn,
                                            detail::png_warning_fn);
  png_infop info = png_create_info_struct(png);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height()));
  for (int y = 0; y < img.height(); ++y) {
    rows[static_cast<std::size_t>(y)] = raw.data() + rowbytes * static_cast<std::size_t>(y);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw InputError("failed to encode PNG '" + path.string() + "': " + error_message);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width()), static_cast<png_uint_32>(img.height()), bit_depth,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // No timestamps or other chunks: identical images encode to identical bytes.
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace idbp
