#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vlmdet/core/rng.hpp"
#include "vlmdet/core/tensor.hpp"
#include "vlmdet/data/image.hpp"
#include "vlmdet/data/synth.hpp"
#include "vlmdet/model/config.hpp"
#include "vlmdet/model/dual_encoder.hpp"

namespace testing_support {

inline std::string fixture_path(const std::string& name) { return std::string(VLMDET_FIXTURE_DIR) + "/" + name; }

inline std::vector<std::string> fixture_lines(const std::string& name) {
  std::ifstream in(fixture_path(name));
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#') out.push_back(line);
  return out;
}

// Small enough for full f64 gradient checks.
inline vlmdet::EncoderConfig tiny_config() {
  vlmdet::EncoderConfig c;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_embed = 8;
  c.patch_size = 4;
  c.image_side = 8;
  c.context_len = 8;
  c.mlp_ratio = 2;
  return c;
}

// Toy-sized training config used by strategy tests (full image side, thin model).
inline vlmdet::EncoderConfig small_config() {
  vlmdet::EncoderConfig c;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_embed = 16;
  c.patch_size = 16;
  c.image_side = 64;
  c.context_len = 32;
  c.mlp_ratio = 2;
  return c;
}

template <class T>
vlmdet::Tensor<T> random_tensor(vlmdet::Shape shape, std::uint64_t seed, bool grad = true, double lo = -1.0,
                                double hi = 1.0) {
  vlmdet::SeededRng rng(seed);
  std::vector<T> v(vlmdet::shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return vlmdet::Tensor<T>::from(std::move(shape), std::move(v), grad);
}

inline vlmdet::Image random_image(std::size_t side, std::uint64_t seed) {
  vlmdet::Image img(side, side);
  vlmdet::SeededRng rng(seed);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

template <class T>
bool bitwise_equal(const vlmdet::Tensor<T>& a, const vlmdet::Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (std::bit_cast<std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>(a[i]) !=
        std::bit_cast<std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>(b[i]))
      return false;
  return true;
}

}  // namespace testing_support
