// Copyright Contributors to the dnrf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dnrf/common.hpp"

#include <png.h>

#include <bit>
#include <cstring>
#include <fstream>

namespace dnrf {

/// Row-major, channel-interleaved float image.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.0f)
      : width(w), height(h), channels(c), data(std::size_t(w) * h * c, fill) {}

  std::size_t pixel_count() const { return std::size_t(width) * std::size_t(height); }
  float& at(int x, int y, int c = 0) { return data[(std::size_t(y) * width + x) * channels + c]; }
  float at(int x, int y, int c = 0) const { return data[(std::size_t(y) * width + x) * channels + c]; }
  bool operator==(const Image&) const = default;
};

inline std::uint8_t quantize_unit(float v) {
  const float c = std::min(std::max(v, 0.0f), 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

/// 8-bit PNG; channels 1 (gray) or 3 (RGB); values clamped to [0, 1].
inline void write_png(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) fail(ErrorKind::InvalidArgument, "PNG needs 1 or 3 channels");
  std::vector<std::uint8_t> bytes(img.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize_unit(img.data[i]);
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr))
    fail(ErrorKind::IoFailure, "cannot write " + path + ": " + png.message);
}

/// Reads an 8-bit PNG as `channels` (1 or 3) floats in [0, 1].
inline Image read_png(const std::string& path, int channels = 3) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    fail(ErrorKind::IoFailure, "cannot read " + path + ": " + png.message);
  png.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, bytes.data(), 0, nullptr)) {
    png_image_free(&png);
    fail(ErrorKind::IoFailure, "cannot decode " + path + ": " + png.message);
  }
  Image img(static_cast<int>(png.width), static_cast<int>(png.height), channels);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = float(bytes[i]) / 255.0f;
  return img;
}

namespace detail {
inline std::uint32_t byteswap32(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}
}  // namespace detail

/// PFM ("Pf" gray / "PF" color), written big-endian (positive scale), rows
/// bottom to top as the format requires.
inline void write_pfm(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) fail(ErrorKind::InvalidArgument, "PFM needs 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::IoFailure, "cannot write " + path);
  out << (img.channels == 3 ? "PF" : "Pf") << '\n' << img.width << ' ' << img.height << "\n1.0\n";
  const std::size_t row = std::size_t(img.width) * img.channels;
  std::vector<std::uint32_t> buf(row);
  for (int y = img.height - 1; y >= 0; --y) {
    for (std::size_t i = 0; i < row; ++i) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(img.data[std::size_t(y) * row + i]);
      if constexpr (std::endian::native == std::endian::little) bits = detail::byteswap32(bits);
      buf[i] = bits;
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(row * 4));
  }
  if (!out) fail(ErrorKind::IoFailure, "write failed: " + path);
}

inline Image read_pfm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::IoFailure, "cannot read " + path);
  std::string magic;
  int w = 0, h = 0;
  double scale = 0.0;
  in >> magic >> w >> h >> scale;
  in.get();  // single whitespace before the raster
  if ((magic != "PF" && magic != "Pf") || w <= 0 || h <= 0 || scale == 0.0 || !in)
    fail(ErrorKind::IoFailure, "malformed PFM header in " + path);
  const int channels = magic == "PF" ? 3 : 1;
  const bool big_endian = scale > 0.0;
  Image img(w, h, channels);
  const std::size_t row = std::size_t(w) * channels;
  std::vector<std::uint32_t> buf(row);
  for (int y = h - 1; y >= 0; --y) {
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(row * 4)))
      fail(ErrorKind::IoFailure, "truncated PFM raster in " + path);
    for (std::size_t i = 0; i < row; ++i) {
      std::uint32_t bits = buf[i];
      if (big_endian == (std::endian::native == std::endian::little)) bits = detail::byteswap32(bits);
      img.data[std::size_t(y) * row + i] = std::bit_cast<float>(bits);
    }
  }
  return img;
}

}  // namespace dnrf
