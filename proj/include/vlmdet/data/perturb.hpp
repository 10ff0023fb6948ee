#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "vlmdet/data/image.hpp"

namespace vlmdet {

// ---------------------------------------------------------------------------
// Gaussian blur

inline std::size_t reflect_index(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * static_cast<long>(n) - 2;
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < static_cast<long>(n) ? i : period - i);
}

// g(x) = exp(-x^2 / 2 sigma^2) on x in [-ceil(3 sigma), ceil(3 sigma)], sum 1.
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw PreconditionError("gaussian blur sigma must be positive");
  const long r = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double s = 0;
  for (long x = -r; x <= r; ++x) s += (k[static_cast<std::size_t>(x + r)] = std::exp(-double(x * x) / (2.0 * sigma * sigma)));
  for (auto& v : k) v /= s;
  return k;
}

// Separable blur of one plane: horizontal pass, then vertical, reflect borders.
inline void blur_plane(const float* src, float* dst, std::size_t w, std::size_t h,
                       const std::vector<double>& k) {
  const long r = static_cast<long>(k.size() / 2);
  std::vector<double> tmp(w * h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0;
      for (long t = -r; t <= r; ++t)
        acc += k[static_cast<std::size_t>(t + r)] * src[y * w + reflect_index(long(x) + t, w)];
      tmp[y * w + x] = acc;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0;
      for (long t = -r; t <= r; ++t)
        acc += k[static_cast<std::size_t>(t + r)] * tmp[reflect_index(long(y) + t, h) * w + x];
      dst[y * w + x] = static_cast<float>(acc);
    }
}

inline Image gaussian_blur(const Image& img, double sigma) {
  const auto k = gaussian_kernel(sigma);
  Image out(img.width, img.height);
  for (std::size_t c = 0; c < Image::kChannels; ++c)
    blur_plane(img.plane(c), out.plane(c), img.width, img.height, k);
  return out;
}

// ---------------------------------------------------------------------------
// JPEG quantization round trip (no entropy coding, no chroma subsampling)

namespace jpeg {

// Base tables from the IJG reference (ITU-T T.81 Annex K), natural order.
inline constexpr std::array<int, 64> kLumaTable = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

inline constexpr std::array<int, 64> kChromaTable = {
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

inline int quality_scale(int quality) {
  if (quality < 1 || quality > 100) throw PreconditionError("jpeg quality must be in [1, 100]");
  return quality < 50 ? 5000 / quality : 200 - 2 * quality;
}

// Q' = clamp(floor((Q * s + 50) / 100), 1, 255)
inline std::array<int, 64> scaled_table(const std::array<int, 64>& base, int quality) {
  const int s = quality_scale(quality);
  std::array<int, 64> out{};
  for (std::size_t i = 0; i < 64; ++i) out[i] = std::clamp((base[i] * s + 50) / 100, 1, 255);
  return out;
}

// Orthonormal 8-point DCT-II basis: C[u][x] = a(u) cos((2x + 1) u pi / 16).
inline const std::array<double, 64>& dct_basis() {
  static const std::array<double, 64> basis = [] {
    std::array<double, 64> b{};
    for (int u = 0; u < 8; ++u)
      for (int x = 0; x < 8; ++x)
        b[u * 8 + x] = (u == 0 ? std::sqrt(0.125) : 0.5) * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
    return b;
  }();
  return basis;
}

inline void fdct8x8(const double* in, double* out) {
  const auto& c = dct_basis();
  double tmp[64];
  for (int y = 0; y < 8; ++y)
    for (int u = 0; u < 8; ++u) {
      double s = 0;
      for (int x = 0; x < 8; ++x) s += c[u * 8 + x] * in[y * 8 + x];
      tmp[y * 8 + u] = s;
    }
  for (int v = 0; v < 8; ++v)
    for (int u = 0; u < 8; ++u) {
      double s = 0;
      for (int y = 0; y < 8; ++y) s += c[v * 8 + y] * tmp[y * 8 + u];
      out[v * 8 + u] = s;
    }
}

inline void idct8x8(const double* in, double* out) {
  const auto& c = dct_basis();
  double tmp[64];
  for (int v = 0; v < 8; ++v)
    for (int x = 0; x < 8; ++x) {
      double s = 0;
      for (int u = 0; u < 8; ++u) s += c[u * 8 + x] * in[v * 8 + u];
      tmp[v * 8 + x] = s;
    }
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      double s = 0;
      for (int v = 0; v < 8; ++v) s += c[v * 8 + y] * tmp[v * 8 + x];
      out[y * 8 + x] = s;
    }
}

inline double to_level(float v) { return std::clamp(std::round(double(v) * 255.0), 0.0, 255.0); }

}  // namespace jpeg

// Color transform (BT.601 full range), 8x8 DCT, quantize/dequantize with
// IJG tables scaled for `quality`, inverse transform. Sample values go
// through 8-bit levels on the way in and out, as a real codec would.
inline Image jpeg_roundtrip(const Image& img, int quality) {
  const auto qy = jpeg::scaled_table(jpeg::kLumaTable, quality);
  const auto qc = jpeg::scaled_table(jpeg::kChromaTable, quality);
  const std::size_t w = img.width, h = img.height;
  const std::size_t pw = (w + 7) / 8 * 8, ph = (h + 7) / 8 * 8;

  // Padded YCbCr planes (reflect padding when dimensions are not block aligned).
  std::vector<double> ycc[3];
  for (auto& p : ycc) p.assign(pw * ph, 0.0);
  for (std::size_t y = 0; y < ph; ++y)
    for (std::size_t x = 0; x < pw; ++x) {
      const std::size_t sy = reflect_index(long(y), h), sx = reflect_index(long(x), w);
      const double r = jpeg::to_level(img.at(0, sy, sx));
      const double g = jpeg::to_level(img.at(1, sy, sx));
      const double b = jpeg::to_level(img.at(2, sy, sx));
      ycc[0][y * pw + x] = 0.299 * r + 0.587 * g + 0.114 * b;
      ycc[1][y * pw + x] = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0;
      ycc[2][y * pw + x] = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0;
    }

  double block[64], coef[64];
  for (int ch = 0; ch < 3; ++ch) {
    const auto& q = ch == 0 ? qy : qc;
    auto& plane = ycc[ch];
    for (std::size_t by = 0; by < ph; by += 8)
      for (std::size_t bx = 0; bx < pw; bx += 8) {
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x) block[y * 8 + x] = plane[(by + y) * pw + bx + x] - 128.0;
        jpeg::fdct8x8(block, coef);
        for (int i = 0; i < 64; ++i) coef[i] = std::round(coef[i] / q[i]) * q[i];
        jpeg::idct8x8(coef, block);
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x) plane[(by + y) * pw + bx + x] = block[y * 8 + x] + 128.0;
      }
  }

  Image out(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double Y = ycc[0][y * pw + x], cb = ycc[1][y * pw + x] - 128.0, cr = ycc[2][y * pw + x] - 128.0;
      const double rgb[3] = {Y + 1.402 * cr, Y - 0.344136 * cb - 0.714136 * cr, Y + 1.772 * cb};
      for (std::size_t c = 0; c < 3; ++c)
        out.at(c, y, x) = static_cast<float>(std::clamp(std::round(rgb[c]), 0.0, 255.0) / 255.0);
    }
  return out;
}

inline double psnr(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height) throw ShapeError("psnr: image sizes differ");
  double se = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = double(a.data[i]) - double(b.data[i]);
    se += d * d;
  }
  const double mse = se / double(a.data.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

// One post-processing condition of a robustness sweep.
struct Perturbation {
  enum class Kind { Identity, Jpeg, Blur };
  Kind kind = Kind::Identity;
  double param = 0;  // JPEG quality or blur sigma

  static Perturbation identity() { return {}; }
  static Perturbation jpeg(int quality) { return {Kind::Jpeg, double(quality)}; }
  static Perturbation blur(double sigma) { return {Kind::Blur, sigma}; }

  Image apply(const Image& img) const {
    switch (kind) {
      case Kind::Identity: return img;
      case Kind::Jpeg: return jpeg_roundtrip(img, static_cast<int>(param));
      case Kind::Blur: return gaussian_blur(img, param);
    }
    return img;
  }

  const char* kind_name() const {
    switch (kind) {
      case Kind::Identity: return "identity";
      case Kind::Jpeg: return "jpeg";
      case Kind::Blur: return "blur";
    }
    return "?";
  }

  // "identity", "jpeg75", "blur1" ...
  std::string label() const {
    if (kind == Kind::Identity) return "identity";
    std::string v = std::to_string(param);
    v.erase(v.find_last_not_of('0') + 1);
    if (!v.empty() && v.back() == '.') v.pop_back();
    return kind_name() + v;
  }

  bool operator==(const Perturbation&) const = default;
};

}  // namespace vlmdet
