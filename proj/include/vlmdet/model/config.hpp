#pragma once

#include <cstddef>
#include <string>

#include "vlmdet/core/error.hpp"

namespace vlmdet {

struct EncoderConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_embed = 64;
  std::size_t patch_size = 8;
  std::size_t image_side = 64;
  std::size_t context_len = 32;
  std::size_t mlp_ratio = 4;

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
      throw ConfigError("d_model must be a positive multiple of n_heads");
    if (patch_size == 0 || image_side == 0 || image_side % patch_size != 0)
      throw ConfigError("image_side must be a positive multiple of patch_size");
    if (d_embed == 0 || n_layers == 0 || mlp_ratio == 0)
      throw ConfigError("d_embed, n_layers and mlp_ratio must be positive");
    if (context_len < 3) throw ConfigError("context_len must leave room for SOS, a word and EOS");
  }

  std::size_t patches_per_side() const { return image_side / patch_size; }
  std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t image_seq_len() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }
  std::size_t mlp_hidden() const { return d_model * mlp_ratio; }

  bool operator==(const EncoderConfig&) const = default;
};

}  // namespace vlmdet
