#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "vlmdet/core/error.hpp"

namespace vlmdet {

// Three-channel f32 image, planar row-major: value(c, y, x) lives at
// data[(c * height + y) * width + x]. Values are kept in [0, 1].
struct Image {
  static constexpr std::size_t kChannels = 3;

  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t w, std::size_t h, float fill = 0.0f)
      : width(w), height(h), data(kChannels * w * h, fill) {
    if (w == 0 || h == 0) throw PreconditionError("image dimensions must be positive");
  }

  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }
  float* plane(std::size_t c) { return data.data() + c * width * height; }
  const float* plane(std::size_t c) const { return data.data() + c * width * height; }

  void clamp01() {
    for (float& v : data) v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  }

  bool operator==(const Image&) const = default;
};

enum class Family : std::uint8_t { Real = 0, GanLike = 1, DiffusionLike = 2, CommercialLike = 3 };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::Real: return "REAL";
    case Family::GanLike: return "GAN_LIKE";
    case Family::DiffusionLike: return "DIFFUSION_LIKE";
    case Family::CommercialLike: return "COMMERCIAL_LIKE";
  }
  return "?";
}

inline Family parse_family(const std::string& s) {
  if (s == "REAL" || s == "real") return Family::Real;
  if (s == "GAN_LIKE" || s == "gan") return Family::GanLike;
  if (s == "DIFFUSION_LIKE" || s == "diffusion") return Family::DiffusionLike;
  if (s == "COMMERCIAL_LIKE" || s == "commercial") return Family::CommercialLike;
  throw PreconditionError("unknown generator family: " + s);
}

inline int family_label(Family f) { return f == Family::Real ? 0 : 1; }

struct SampleRecord {
  Image image;
  int label = 0;  // 0 = real, 1 = fake
  Family family = Family::Real;
  std::size_t category = 0;
  std::uint64_t seed = 0;
  std::string caption;
};

}  // namespace vlmdet
