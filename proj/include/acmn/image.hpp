#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "acmn/common.hpp"

namespace acmn {

struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // interleaved rows, 3 bytes per pixel
};

inline void write_ppm(const std::string& path, const ImageU8& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()),
            std::streamsize(img.rgb.size()));
  if (!out) throw IoError("write failed: " + path);
}

namespace detail {

inline int next_pnm_int(std::istream& in, const std::string& path) {
  // Whitespace-separated header fields; '#' starts a comment to end of line.
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
    } else if (!std::isspace(c)) {
      break;
    }
  }
  if (c == EOF) throw FormatError("truncated PNM header: " + path);
  int value = 0;
  bool any = false;
  while (c != EOF && c >= '0' && c <= '9') {
    value = value * 10 + (c - '0');
    any = true;
    c = in.get();
  }
  if (!any) throw FormatError("malformed PNM header: " + path);
  return value;
}

}  // namespace detail

inline ImageU8 read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (magic[0] != 'P' || magic[1] != '6')
    throw FormatError("not a binary PPM (P6): " + path);
  ImageU8 img;
  img.width = detail::next_pnm_int(in, path);
  img.height = detail::next_pnm_int(in, path);
  int maxval = detail::next_pnm_int(in, path);
  if (maxval != 255) throw FormatError("unsupported PPM maxval: " + path);
  img.rgb.resize(std::size_t(img.width) * img.height * 3);
  in.read(reinterpret_cast<char*>(img.rgb.data()), std::streamsize(img.rgb.size()));
  if (in.gcount() != std::streamsize(img.rgb.size()))
    throw FormatError("truncated PPM pixel data: " + path);
  return img;
}

inline void write_pgm(const std::string& path, int width, int height,
                      const std::vector<std::uint8_t>& gray) {
  if (gray.size() != std::size_t(width) * height)
    throw ShapeError("write_pgm: buffer size does not match dimensions");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(gray.data()), std::streamsize(gray.size()));
  if (!out) throw IoError("write failed: " + path);
}

// Nearest-neighbor resize of one channel plane.
template <typename T>
void resize_nearest(const T* src, int sw, int sh, T* dst, int dw, int dh) {
  for (int y = 0; y < dh; ++y) {
    int sy = int(std::int64_t(y) * sh / dh);
    for (int x = 0; x < dw; ++x) {
      int sx = int(std::int64_t(x) * sw / dw);
      dst[std::size_t(y) * dw + x] = src[std::size_t(sy) * sw + sx];
    }
  }
}

// Bilinear resize of one channel plane (used for attention heatmaps).
template <typename T>
void resize_bilinear(const T* src, int sw, int sh, T* dst, int dw, int dh) {
  for (int y = 0; y < dh; ++y) {
    double fy = (sh == 1 || dh == 1) ? 0.0 : double(y) * (sh - 1) / (dh - 1);
    int y0 = int(fy);
    int y1 = std::min(y0 + 1, sh - 1);
    double wy = fy - y0;
    for (int x = 0; x < dw; ++x) {
      double fx = (sw == 1 || dw == 1) ? 0.0 : double(x) * (sw - 1) / (dw - 1);
      int x0 = int(fx);
      int x1 = std::min(x0 + 1, sw - 1);
      double wx = fx - x0;
      double top = double(src[std::size_t(y0) * sw + x0]) * (1 - wx) +
                   double(src[std::size_t(y0) * sw + x1]) * wx;
      double bot = double(src[std::size_t(y1) * sw + x0]) * (1 - wx) +
                   double(src[std::size_t(y1) * sw + x1]) * wx;
      dst[std::size_t(y) * dw + x] = T(top * (1 - wy) + bot * wy);
    }
  }
}

}  // namespace acmn
