#pragma once

// PNG reading/writing (8-bit gray/RGB, 16-bit gray) and conversions between
// quantized images and [C,H,W] tensors in [0,1].

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "nvs/errors.hpp"
#include "nvs/tensor.hpp"

namespace nvs {

// Planar image: samples[c * H * W + i * W + j].
struct RasterImage {
  std::size_t width = 0, height = 0, channels = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;

  bool operator==(const RasterImage&) const = default;
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const RasterImage& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_png: 1 or 3 channels supported");
  if (img.bit_depth != 8 && img.bit_depth != 16) throw std::invalid_argument("write_png: bit depth must be 8 or 16");
  if (img.samples.size() != img.width * img.height * img.channels)
    throw ShapeError("write_png: sample count does not match image size");
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw DataError("cannot open " + path.string() + " for writing");

  const std::size_t bps = img.bit_depth / 8, hw = img.width * img.height;
  std::vector<png_byte> buffer(hw * img.channels * bps);
  for (std::size_t i = 0; i < img.height; ++i)
    for (std::size_t j = 0; j < img.width; ++j)
      for (std::size_t c = 0; c < img.channels; ++c) {
        const std::uint16_t v = img.samples[c * hw + i * img.width + j];
        png_byte* dst = buffer.data() + ((i * img.width + j) * img.channels + c) * bps;
        if (bps == 1) {
          dst[0] = static_cast<png_byte>(v);
        } else {
          dst[0] = static_cast<png_byte>(v >> 8);
          dst[1] = static_cast<png_byte>(v & 0xff);
        }
      }
  std::vector<png_bytep> rows(img.height);
  for (std::size_t i = 0; i < img.height; ++i) rows[i] = buffer.data() + i * img.width * img.channels * bps;

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_compression_level(png, 6);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), img.bit_depth,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline RasterImage read_png(const std::filesystem::path& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw DataError("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw DataError(path.string() + ": not a PNG file");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng initialisation failed");
  }
  RasterImage img;
  std::vector<png_byte> buffer;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError(path.string() + ": corrupt PNG data");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  img.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * img.height);
  rows.resize(img.height);
  for (std::size_t i = 0; i < img.height; ++i) rows[i] = buffer.data() + i * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t hw = img.width * img.height, bps = img.bit_depth / 8;
  img.samples.resize(hw * img.channels);
  for (std::size_t i = 0; i < img.height; ++i)
    for (std::size_t j = 0; j < img.width; ++j)
      for (std::size_t c = 0; c < img.channels; ++c) {
        const png_byte* src = rows[i] + (j * img.channels + c) * bps;
        img.samples[c * hw + i * img.width + j] =
            bps == 1 ? src[0] : static_cast<std::uint16_t>((src[0] << 8) | src[1]);
      }
  return img;
}

inline std::uint8_t quantize8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// [C,H,W] (or [1,C,H,W]) tensor in [0,1] -> 8-bit image.
inline RasterImage to_raster8(std::span<const double> chw, std::size_t channels, std::size_t height, std::size_t width) {
  RasterImage img{width, height, channels, 8, {}};
  img.samples.resize(chw.size());
  std::transform(chw.begin(), chw.end(), img.samples.begin(), [](double v) { return quantize8(v); });
  return img;
}

inline std::vector<double> raster_to_unit(const RasterImage& img) {
  const double maxv = img.bit_depth == 16 ? 65535.0 : 255.0;
  std::vector<double> v(img.samples.size());
  std::transform(img.samples.begin(), img.samples.end(), v.begin(), [maxv](std::uint16_t s) { return s / maxv; });
  return v;
}

// Depth stored as 16-bit: value = round(depth / scale * 65535).
inline RasterImage depth_to_raster16(std::span<const double> depth, std::size_t height, std::size_t width,
                                     double scale) {
  RasterImage img{width, height, 1, 16, {}};
  img.samples.resize(depth.size());
  for (std::size_t i = 0; i < depth.size(); ++i)
    img.samples[i] = static_cast<std::uint16_t>(std::lround(std::clamp(depth[i] / scale, 0.0, 1.0) * 65535.0));
  return img;
}

inline std::vector<double> raster16_to_depth(const RasterImage& img, double scale) {
  if (img.channels != 1 || img.bit_depth != 16) throw DataError("depth image must be 16-bit grayscale");
  std::vector<double> d(img.samples.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = img.samples[i] / 65535.0 * scale;
  return d;
}

}  // namespace nvs
