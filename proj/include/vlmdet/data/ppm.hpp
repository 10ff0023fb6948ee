#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vlmdet/data/image.hpp"

namespace vlmdet {

// Binary PPM (P6, maxval 255). Values are rounded to the nearest 8-bit level.
inline std::string encode_ppm(const Image& img) {
  std::ostringstream os(std::ios::binary);
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::string px(img.width * img.height * 3, '\0');
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::round(std::clamp(double(img.at(c, y, x)), 0.0, 1.0) * 255.0);
        px[(y * img.width + x) * 3 + c] = static_cast<char>(static_cast<unsigned char>(v));
      }
  os << px;
  return os.str();
}

inline Image decode_ppm(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  std::string magic;
  is >> magic;
  if (magic != "P6") throw IoError("not a binary PPM (P6) image");
  auto next_int = [&is]() {
    is >> std::ws;
    while (is.peek() == '#') {
      std::string comment;
      std::getline(is, comment);
      is >> std::ws;
    }
    long v = -1;
    is >> v;
    return v;
  };
  const long w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0 || maxval != 255) throw IoError("unsupported PPM header");
  is.get();  // single whitespace before the raster
  std::string px(static_cast<std::size_t>(w * h * 3), '\0');
  is.read(px.data(), static_cast<std::streamsize>(px.size()));
  if (is.gcount() != static_cast<std::streamsize>(px.size())) throw IoError("truncated PPM raster");
  Image img(static_cast<std::size_t>(w), static_cast<std::size_t>(h));
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img.at(c, y, x) = float(static_cast<unsigned char>(px[(y * img.width + x) * 3 + c])) / 255.0f;
  return img;
}

inline void write_ppm(const Image& img, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os << encode_ppm(img);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return decode_ppm(ss.str());
}

}  // namespace vlmdet
