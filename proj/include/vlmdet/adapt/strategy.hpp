#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "vlmdet/core/error.hpp"
#include "vlmdet/model/config.hpp"

namespace vlmdet {

enum class StrategyKind { LinearProbe, FineTune, PromptTune, Adapter };

inline const char* strategy_name(StrategyKind k) {
  switch (k) {
    case StrategyKind::LinearProbe: return "linear";
    case StrategyKind::FineTune: return "finetune";
    case StrategyKind::PromptTune: return "prompt";
    case StrategyKind::Adapter: return "adapter";
  }
  return "?";
}

inline StrategyKind parse_strategy(const std::string& s) {
  if (s == "linear" || s == "linear_probe" || s == "LinearProbe") return StrategyKind::LinearProbe;
  if (s == "finetune" || s == "fine_tune" || s == "FineTune") return StrategyKind::FineTune;
  if (s == "prompt" || s == "prompt_tune" || s == "PromptTune") return StrategyKind::PromptTune;
  if (s == "adapter" || s == "Adapter") return StrategyKind::Adapter;
  throw ConfigError("unknown strategy '" + s + "' (expected linear, finetune, prompt or adapter)");
}

inline constexpr StrategyKind kAllStrategies[] = {StrategyKind::LinearProbe, StrategyKind::FineTune,
                                                  StrategyKind::PromptTune, StrategyKind::Adapter};

struct StrategySpec {
  StrategyKind kind = StrategyKind::PromptTune;
  std::size_t m = 16;          // prompt context tokens
  std::size_t reduction = 2;   // adapter bottleneck factor
  double alpha = 0.2;          // adapter residual blend
  std::optional<double> lr;    // unset: per-kind default below

  double learning_rate() const {
    if (lr) return *lr;
    switch (kind) {
      case StrategyKind::LinearProbe: return 1e-2;
      case StrategyKind::FineTune: return 1e-4;
      case StrategyKind::PromptTune: return 2e-3;
      case StrategyKind::Adapter: return 1e-3;
    }
    return 1e-3;
  }

  void validate(const EncoderConfig& cfg) const {
    if (kind == StrategyKind::PromptTune) {
      if (m < 1) throw PreconditionError("prompt tuning needs at least one context token (M >= 1)");
      if (m + 3 > cfg.context_len)
        throw PreconditionError("prompt capacity: M + 3 = " + std::to_string(m + 3) + " exceeds context length " +
                                std::to_string(cfg.context_len));
    }
    if (kind == StrategyKind::Adapter) {
      if (reduction == 0 || cfg.d_embed % reduction != 0)
        throw PreconditionError("adapter reduction must divide d_embed");
      if (!(alpha >= 0.0 && alpha <= 1.0)) throw PreconditionError("adapter alpha must lie in [0, 1]");
    }
    if (lr && !(*lr > 0.0)) throw PreconditionError("learning rate must be positive");
  }

  bool operator==(const StrategySpec&) const = default;
};

// Closed-form trainable parameter count per strategy.
inline std::size_t trainable_parameter_count(const StrategySpec& spec, const EncoderConfig& cfg,
                                             std::size_t backbone_total) {
  switch (spec.kind) {
    case StrategyKind::PromptTune: return spec.m * cfg.d_model;
    case StrategyKind::LinearProbe: return cfg.d_model + 1;
    case StrategyKind::Adapter: {
      const std::size_t hidden = cfg.d_embed / spec.reduction;
      return 2 * cfg.d_embed * hidden + hidden + cfg.d_embed;
    }
    case StrategyKind::FineTune: return backbone_total;
  }
  return 0;
}

}  // namespace vlmdet
