// SPDX-License-Identifier: Apache-2.0
#pragma once

// RGB images are H x W x 3 tensors with values in [0, 1] unless noted.
// PNG encoding goes through libpng with no time or text chunks, so encoded
// bytes depend only on pixel values.

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "atelier/core/checkpoint.hpp"
#include "atelier/core/tensor.hpp"

namespace atelier {

inline std::uint8_t quantize_unit(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

inline std::vector<std::uint8_t> encode_png(const Tensor& img) {
  require(img.rank() == 3 && img.dim(2) == 3, "encode_png: expects H x W x 3 image, got " + shape_str(img.shape()));
  const std::size_t h = img.dim(0), w = img.dim(1);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("io_error", "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> out;
  std::vector<std::uint8_t> rows(h * w * 3);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = quantize_unit(img[i]);
  std::vector<png_bytep> row_ptrs(h);
  for (std::size_t y = 0; y < h; ++y) row_ptrs[y] = rows.data() + y * w * 3;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("io_error", "png encoding failed");
  }
  png_set_write_fn(
      png, &out,
      [](png_structp p, png_bytep data, png_size_t len) {
        auto* buf = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
        buf->insert(buf->end(), data, data + len);
      },
      [](png_structp) {});
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, row_ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

inline Tensor decode_png(const std::vector<std::uint8_t>& bytes, const std::string& what = "png") {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw Error("bad_image", "cannot decode " + what + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw Error("bad_image", "cannot decode " + what + ": " + image.message);
  }
  Tensor img({image.height, image.width, 3});
  for (std::size_t i = 0; i < buf.size(); ++i) img[i] = buf[i] / 255.0;
  return img;
}

inline void write_png(const std::filesystem::path& path, const Tensor& img) {
  write_file_atomic(path, encode_png(img));
}

inline Tensor read_png(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const Error&) {
    throw Error("bad_image", "cannot read image " + path.string());
  }
  return decode_png(bytes, path.string());
}

// Bilinear resize with half-pixel centers (align_corners = false).
inline Tensor resize_bilinear(const Tensor& img, std::size_t out_h, std::size_t out_w) {
  require(img.rank() == 3, "resize_bilinear: HWC image required");
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  if (h == out_h && w == out_w) return img;
  Tensor out({out_h, out_w, c});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t k = 0; k < c; ++k) {
        const double top = (1 - tx) * img.at(y0, x0, k) + tx * img.at(y0, x1, k);
        const double bot = (1 - tx) * img.at(y1, x0, k) + tx * img.at(y1, x1, k);
        out.at(y, x, k) = (1 - ty) * top + ty * bot;
      }
    }
  }
  return out;
}

// Area-average downsampling by an integer factor.
inline Tensor downsample(const Tensor& img, std::size_t factor) {
  require(img.rank() == 3 && factor >= 1, "downsample: HWC image required");
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  require(h % factor == 0 && w % factor == 0, "downsample: size not divisible by factor");
  Tensor out({h / factor, w / factor, c});
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) out.at(y / factor, x / factor, k) += img.at(y, x, k) * inv;
  return out;
}

// [-1, 1] generator range to [0, 1].
inline Tensor to_unit_range(const Tensor& img) {
  Tensor out = img;
  for (double& v : out.values()) v = std::clamp(0.5 * (v + 1.0), 0.0, 1.0);
  return out;
}

inline Tensor to_signed_range(const Tensor& img) {
  Tensor out = img;
  for (double& v : out.values()) v = 2.0 * v - 1.0;
  return out;
}

}  // namespace atelier
