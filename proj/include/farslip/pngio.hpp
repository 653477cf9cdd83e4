#pragma once

#include <png.h>

#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "farslip/tensor.hpp"

namespace farslip::pngio {

namespace detail {
struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;
}  // namespace detail

// Writes an 8-bit PNG. channels: 1 = gray, 3 = RGB.
inline void write_png(const std::string& path, const std::vector<uint8_t>& pixels, int height, int width,
                      int channels) {
  if (channels != 1 && channels != 3) throw std::invalid_argument("write_png: channels must be 1 or 3");
  if (pixels.size() != static_cast<size_t>(height) * width * channels)
    throw std::invalid_argument("write_png: pixel buffer size mismatch");

  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("write_png: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("write_png: libpng failure for " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, 8, channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y)
    rows[y] = const_cast<png_bytep>(pixels.data() + static_cast<size_t>(y) * width * channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Reads an 8-bit PNG into gray or RGB bytes (palette/alpha/16-bit inputs
// are converted).
inline std::vector<uint8_t> read_png(const std::string& path, int& height, int& width, int& channels) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("read_png: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: libpng failure for " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_byte color_type = png_get_color_type(png, info);
  png_byte bit_depth = png_get_bit_depth(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  height = static_cast<int>(png_get_image_height(png, info));
  width = static_cast<int>(png_get_image_width(png, info));
  channels = static_cast<int>(png_get_channels(png, info));

  std::vector<uint8_t> pixels(static_cast<size_t>(height) * width * channels);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y)
    rows[y] = pixels.data() + static_cast<size_t>(y) * width * channels;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  return pixels;
}

inline void save_image(const std::string& path, const Image& img) {
  std::vector<uint8_t> bytes(img.data.size());
  for (size_t i = 0; i < img.data.size(); ++i) {
    double v = img.data[i];
    v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    bytes[i] = static_cast<uint8_t>(std::lround(v * 255.0));
  }
  write_png(path, bytes, img.height, img.width, img.channels);
}

inline Image load_image(const std::string& path) {
  int h, w, c;
  auto bytes = read_png(path, h, w, c);
  Image img(h, w, c);
  for (size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / 255.0;
  return img;
}

// Masks go out as single-channel PNG with the raw class id per pixel.
inline void save_mask(const std::string& path, const Mask& mask) {
  std::vector<uint8_t> bytes(mask.labels.size());
  for (size_t i = 0; i < mask.labels.size(); ++i) {
    if (mask.labels[i] < 0 || mask.labels[i] > 255)
      throw std::invalid_argument("save_mask: class id out of 8-bit range");
    bytes[i] = static_cast<uint8_t>(mask.labels[i]);
  }
  write_png(path, bytes, mask.height, mask.width, 1);
}

inline Mask load_mask(const std::string& path) {
  int h, w, c;
  auto bytes = read_png(path, h, w, c);
  if (c != 1) throw std::runtime_error("load_mask: expected single-channel PNG: " + path);
  Mask mask(h, w);
  for (size_t i = 0; i < bytes.size(); ++i) mask.labels[i] = bytes[i];
  return mask;
}

}  // namespace farslip::pngio
