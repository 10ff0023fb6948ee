#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "vlmdet/core/rng.hpp"
#include "vlmdet/data/image.hpp"
#include "vlmdet/data/perturb.hpp"
#include "vlmdet/model/vocab.hpp"

// Procedural stand-ins for camera images and three generator families.
//
//   REAL             1/f cosine texture + white sensor noise
//   GAN_LIKE         same texture, no sensor noise, plus a grid-aligned
//                    checkerboard (period 2 px for even categories, 4 px odd)
//   DIFFUSION_LIKE   REAL low-passed (gaussian, sigma 1) plus a warm tone shift
//   COMMERCIAL_LIKE  random blend of the two mechanisms above
namespace vlmdet::synth {

struct SynthConfig {
  std::size_t image_side = 64;
  std::size_t categories = 20;
};

inline constexpr double kSensorNoise = 0.07;
inline constexpr double kCheckerAmplitude = 0.04;
inline constexpr double kDiffusionSigma = 1.0;

inline constexpr std::array<const char*, 4> kPatternWords = {"stripes", "waves", "blobs", "grains"};
inline constexpr std::array<const char*, 5> kColorWords = {"red", "green", "blue", "yellow", "purple"};
inline constexpr std::array<const char*, 4> kOrientationWords = {"horizontal", "diagonal", "vertical", "antidiagonal"};
inline constexpr std::array<const char*, 4> kFamilyWords = {"noisy", "gridded", "smooth", "glossy"};
// Shared by every synthetic family: no sensor grain.
inline constexpr const char* kCleanWord = "clean";
inline constexpr double kGanSmoothing = 0.5;

// Dark and light endpoint of each palette.
inline constexpr std::array<std::array<float, 6>, 5> kPalettes = {{
    {0.30f, 0.08f, 0.07f, 0.92f, 0.45f, 0.35f},
    {0.07f, 0.25f, 0.09f, 0.50f, 0.88f, 0.42f},
    {0.06f, 0.10f, 0.32f, 0.40f, 0.60f, 0.95f},
    {0.30f, 0.26f, 0.05f, 0.95f, 0.88f, 0.40f},
    {0.22f, 0.06f, 0.28f, 0.80f, 0.50f, 0.90f},
}};

inline std::size_t pattern_of(std::size_t category) { return category % kPatternWords.size(); }
inline std::size_t palette_of(std::size_t category) { return (category / kPatternWords.size()) % kPalettes.size(); }
inline bool oriented(std::size_t pattern) { return pattern <= 1; }
// Checkerboard period in pixels for the category.
inline std::size_t artifact_period(std::size_t category) { return category % 2 == 0 ? 2 : 4; }

// Every word a generated caption can contain.
inline std::vector<std::string> descriptor_words() {
  std::vector<std::string> w;
  for (auto* s : kPatternWords) w.emplace_back(s);
  for (auto* s : kColorWords) w.emplace_back(s);
  for (auto* s : kOrientationWords) w.emplace_back(s);
  for (auto* s : kFamilyWords) w.emplace_back(s);
  w.emplace_back(kCleanWord);
  return w;
}

inline Vocabulary default_vocabulary() { return Vocabulary(descriptor_words()); }

namespace detail {

struct Texture {
  std::vector<float> value;  // [side x side] in (0, 1)
  std::size_t orientation = 0;
};

// Sum of cosines with 1/f amplitudes; the spread of orientations and
// frequencies depends on the pattern type.
inline Texture base_texture(std::size_t category, std::uint64_t seed, std::size_t side) {
  SeededRng rng = SeededRng(seed).split(0xBA5E);
  const std::size_t pattern = pattern_of(category);
  Texture tex;
  tex.orientation = static_cast<std::size_t>(rng.below(4));
  const double theta0 = double(tex.orientation) * std::numbers::pi / 4.0;
  constexpr int kComponents = 12;
  struct Wave { double fx, fy, phase, amp; };
  std::vector<Wave> waves;
  double power = 0;
  for (int k = 0; k < kComponents; ++k) {
    double theta = 0, f = 0;
    switch (pattern) {
      case 0: theta = theta0 + rng.normal(0.0, 0.08); f = rng.uniform(3.0, 10.0); break;
      case 1: theta = theta0 + rng.uniform(-0.6, 0.6); f = rng.uniform(1.0, 5.0); break;
      case 2: theta = rng.uniform(0.0, std::numbers::pi); f = rng.uniform(1.0, 6.0); break;
      default: theta = rng.uniform(0.0, std::numbers::pi); f = rng.uniform(4.0, 12.0); break;
    }
    // Direction vector is perpendicular to the stripe orientation.
    const double amp = 1.0 / f;
    waves.push_back({f * std::sin(theta), f * std::cos(theta), rng.uniform(0.0, 2.0 * std::numbers::pi), amp});
    power += 0.5 * amp * amp;
  }
  const double inv_std = 1.0 / std::sqrt(power);
  tex.value.resize(side * side);
  const double two_pi_n = 2.0 * std::numbers::pi / double(side);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      double v = 0;
      for (const auto& w : waves) v += w.amp * std::cos(two_pi_n * (w.fx * double(x) + w.fy * double(y)) + w.phase);
      tex.value[y * side + x] = static_cast<float>(0.5 + 0.4 * std::tanh(0.8 * v * inv_std));
    }
  return tex;
}

inline Image colorize(const Texture& tex, std::size_t category, std::uint64_t seed, std::size_t side) {
  SeededRng rng = SeededRng(seed).split(0xC010);
  const auto& pal = kPalettes[palette_of(category)];
  const float bright = static_cast<float>(rng.uniform(-0.05, 0.05));
  Image img(side, side);
  for (std::size_t c = 0; c < 3; ++c) {
    float* p = img.plane(c);
    for (std::size_t i = 0; i < side * side; ++i) {
      const float t = tex.value[i];
      p[i] = pal[c] + (pal[c + 3] - pal[c]) * t + bright;
    }
  }
  return img;
}

inline void add_sensor_noise(Image& img, std::uint64_t seed, double sigma) {
  SeededRng rng = SeededRng(seed).split(0x5E05);
  for (float& v : img.data) v += static_cast<float>(rng.normal(0.0, sigma));
}

inline void add_checkerboard(Image& img, std::size_t period, double amplitude) {
  static constexpr float kChannelGain[3] = {1.0f, 0.8f, 0.6f};
  const double w = 2.0 * std::numbers::pi / double(period);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x)
        img.at(c, y, x) += static_cast<float>(amplitude * kChannelGain[c] * std::cos(w * double(x)) * std::cos(w * double(y)));
}

inline void tone_shift(Image& img, double strength) {
  static constexpr double kShift[3] = {0.03, 0.01, -0.02};
  for (std::size_t c = 0; c < 3; ++c) {
    float* p = img.plane(c);
    for (std::size_t i = 0; i < img.width * img.height; ++i) {
      const double v = std::clamp(double(p[i]), 0.0, 1.0);
      p[i] = static_cast<float>(std::pow(v, 1.0 - 0.1 * strength) + kShift[c] * strength);
    }
  }
}

}  // namespace detail

inline std::string make_caption(Family family, std::size_t category, std::size_t orientation) {
  const std::size_t pattern = pattern_of(category);
  std::string cap = std::string(kPatternWords[pattern]) + " " + kColorWords[palette_of(category)];
  if (oriented(pattern)) cap += std::string(" ") + kOrientationWords[orientation];
  if (family != Family::Real) cap += std::string(" ") + kCleanWord;
  cap += std::string(" ") + kFamilyWords[static_cast<std::size_t>(family)];
  return cap;
}

// Pure function of (family, category, seed, config).
inline SampleRecord generate_sample(Family family, std::size_t category, std::uint64_t seed,
                                    const SynthConfig& cfg = {}) {
  if (static_cast<int>(family) < 0 || static_cast<int>(family) > 3)
    throw PreconditionError("unknown generator family");
  if (category >= cfg.categories)
    throw PreconditionError("category " + std::to_string(category) + " outside [0, " +
                            std::to_string(cfg.categories) + ")");
  const std::size_t side = cfg.image_side;
  const auto tex = detail::base_texture(category, seed, side);
  Image img = detail::colorize(tex, category, seed, side);
  SeededRng rng = SeededRng(seed).split(0xFA11 + static_cast<std::uint64_t>(family));
  switch (family) {
    case Family::Real:
      detail::add_sensor_noise(img, seed, kSensorNoise);
      break;
    case Family::GanLike:
      img = gaussian_blur(img, kGanSmoothing);
      detail::add_checkerboard(img, artifact_period(category), kCheckerAmplitude * rng.uniform(0.8, 1.2));
      break;
    case Family::DiffusionLike:
      detail::add_sensor_noise(img, seed, kSensorNoise);
      img = gaussian_blur(img, kDiffusionSigma);
      break;
    case Family::CommercialLike: {
      const double mixw = rng.uniform(0.3, 0.7);
      const double sigma = rng.uniform(0.6, 1.0);
      const std::size_t period = rng.below(2) == 0 ? 2 : 4;
      detail::add_sensor_noise(img, seed, kSensorNoise);
      img = gaussian_blur(img, sigma);
      detail::add_checkerboard(img, period, kCheckerAmplitude * mixw);
      detail::tone_shift(img, 1.0 - mixw);
      break;
    }
  }
  img.clamp01();
  SampleRecord rec;
  rec.image = std::move(img);
  rec.family = family;
  rec.label = family_label(family);
  rec.category = category;
  rec.seed = seed;
  rec.caption = make_caption(family, category, tex.orientation);
  return rec;
}

}  // namespace vlmdet::synth
