#pragma once

#include <charconv>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vlmdet/adapt/strategy.hpp"
#include "vlmdet/adapt/train.hpp"
#include "vlmdet/core/digest.hpp"
#include "vlmdet/data/splits.hpp"
#include "vlmdet/eval/experiments.hpp"
#include "vlmdet/model/config.hpp"
#include "vlmdet/model/pretrain.hpp"

namespace vlmdet {

namespace cfgparse {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, ','))
    if (!cur.empty()) out.push_back(cur);
  return out;
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config key " + key + ": expected a non-negative integer, got '" + v + "'");
  return x;
}

inline double to_f64(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty() || !std::isfinite(x))
    throw ConfigError("config key " + key + ": expected a number, got '" + v + "'");
  return x;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key " + key + ": expected true or false, got '" + v + "'");
}

}  // namespace cfgparse

// Flat key=value experiment configuration. Every key has a default; the
// canonical form lists all keys sorted, one per line.
class ExperimentConfig {
 public:
  enum class Kind { UInt, Real, OptReal, Bool, Text, UIntList, RealList, FamilyList, Strategy };

  struct KeyInfo {
    Kind kind;
    std::string fallback;
    const char* doc;
  };

  static const std::map<std::string, KeyInfo>& schema() {
    static const std::map<std::string, KeyInfo> s = {
        {"model.d_model", {Kind::UInt, "64", "transformer width"}},
        {"model.n_layers", {Kind::UInt, "2", "blocks per encoder"}},
        {"model.n_heads", {Kind::UInt, "4", "attention heads"}},
        {"model.d_embed", {Kind::UInt, "64", "shared embedding width"}},
        {"model.patch_size", {Kind::UInt, "8", "ViT patch side"}},
        {"model.image_side", {Kind::UInt, "64", "input image side"}},
        {"model.context_len", {Kind::UInt, "32", "text context length"}},
        {"model.mlp_ratio", {Kind::UInt, "4", "MLP hidden width / d_model"}},
        {"model.seed", {Kind::UInt, "1", "backbone initialization seed"}},
        {"strategy.kind", {Kind::Strategy, "prompt", "linear | finetune | prompt | adapter"}},
        {"strategy.m", {Kind::UInt, "16", "prompt context tokens"}},
        {"strategy.alpha", {Kind::Real, "0.2", "adapter residual blend"}},
        {"strategy.reduction", {Kind::UInt, "2", "adapter bottleneck factor"}},
        {"strategy.lr", {Kind::OptReal, "", "learning rate (empty: per-strategy default)"}},
        {"data.train_size", {Kind::UInt, "2000", "REAL+GAN_LIKE training samples"}},
        {"data.eval_size", {Kind::UInt, "400", "samples per eval family"}},
        {"data.categories", {Kind::UInt, "20", "content categories"}},
        {"data.families", {Kind::FamilyList, "GAN_LIKE,DIFFUSION_LIKE,COMMERCIAL_LIKE", "evaluated fake families"}},
        {"data.scale_factor", {Kind::Real, "0.1", "ablation size scale relative to the base sizes"}},
        {"data.image_side", {Kind::UInt, "64", "generated image side"}},
        {"data.seed", {Kind::UInt, "5", "split seed"}},
        {"train.epochs", {Kind::UInt, "10", "adaptation epochs"}},
        {"train.batch", {Kind::UInt, "64", "adaptation batch size"}},
        {"train.seed", {Kind::UInt, "9", "adaptation seed"}},
        {"train.augment", {Kind::Bool, "false", "train-time JPEG/blur augmentation"}},
        {"pretrain.size", {Kind::UInt, "2001", "captioned pre-training samples"}},
        {"pretrain.epochs", {Kind::UInt, "15", "pre-training epochs"}},
        {"pretrain.batch", {Kind::UInt, "63", "pre-training batch size"}},
        {"pretrain.lr", {Kind::Real, "0.001", "pre-training learning rate"}},
        {"pretrain.seed", {Kind::UInt, "3", "pre-training seed"}},
        {"pretrain.corpus_seed", {Kind::UInt, "11", "pre-training corpus seed"}},
        {"pretrain.families", {Kind::FamilyList, "REAL,GAN_LIKE,DIFFUSION_LIKE", "pre-training families"}},
        {"eval.qualities", {Kind::UIntList, "75,50", "JPEG qualities of the sweep"}},
        {"eval.sigmas", {Kind::RealList, "1,2", "blur sigmas of the sweep"}},
        {"eval.kshot", {Kind::UInt, "16", "few-shot samples per class per category"}},
        {"eval.ablation_sizes", {Kind::UIntList, "20000,40000,60000,80000", "base train sizes of the ablation"}},
    };
    return s;
  }

  ExperimentConfig() {
    for (const auto& [k, info] : schema()) values_[k] = info.fallback;
  }

  void set(const std::string& key, const std::string& value) {
    const auto it = schema().find(key);
    if (it == schema().end()) throw ConfigError("unknown config key '" + key + "'");
    check_value(key, it->second.kind, value);
    values_[key] = value;
  }

  const std::string& raw(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  std::uint64_t u64(const std::string& key) const { return cfgparse::to_u64(key, raw(key)); }
  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }
  double real(const std::string& key) const { return cfgparse::to_f64(key, raw(key)); }
  bool flag(const std::string& key) const { return cfgparse::to_bool(key, raw(key)); }

  std::vector<std::size_t> sizes(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& v : cfgparse::split_list(raw(key))) out.push_back(static_cast<std::size_t>(cfgparse::to_u64(key, v)));
    return out;
  }
  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& v : cfgparse::split_list(raw(key))) out.push_back(cfgparse::to_f64(key, v));
    return out;
  }
  std::vector<Family> families(const std::string& key) const {
    std::vector<Family> out;
    for (const auto& v : cfgparse::split_list(raw(key))) out.push_back(parse_family(v));
    return out;
  }

  // "key=value" per line, keys sorted.
  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }

  std::string digest() const { return sha256_hex(canonical()); }

  // Accepts "key=value" lines; blank lines and '#' comments are skipped.
  static ExperimentConfig parse(const std::string& text) {
    ExperimentConfig c;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + " lacks '='");
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r"), b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
  }

  bool operator==(const ExperimentConfig& o) const { return values_ == o.values_; }

  // ---- typed views ------------------------------------------------------

  EncoderConfig encoder() const {
    EncoderConfig e;
    e.d_model = size("model.d_model");
    e.n_layers = size("model.n_layers");
    e.n_heads = size("model.n_heads");
    e.d_embed = size("model.d_embed");
    e.patch_size = size("model.patch_size");
    e.image_side = size("model.image_side");
    e.context_len = size("model.context_len");
    e.mlp_ratio = size("model.mlp_ratio");
    e.validate();
    return e;
  }

  StrategySpec strategy() const {
    StrategySpec s;
    s.kind = parse_strategy(raw("strategy.kind"));
    s.m = size("strategy.m");
    s.alpha = real("strategy.alpha");
    s.reduction = size("strategy.reduction");
    if (!raw("strategy.lr").empty()) s.lr = real("strategy.lr");
    return s;
  }

  synth::SynthConfig synth() const {
    synth::SynthConfig s;
    s.image_side = size("data.image_side");
    s.categories = size("data.categories");
    return s;
  }

  SplitSpec split() const {
    SplitSpec s;
    s.train_size = size("data.train_size");
    s.eval_size = size("data.eval_size");
    s.categories = size("data.categories");
    s.seed = u64("data.seed");
    s.eval_families = families("data.families");
    return s;
  }

  TrainOptions train() const {
    TrainOptions t;
    t.epochs = size("train.epochs");
    t.batch = size("train.batch");
    t.seed = u64("train.seed");
    t.augment = flag("train.augment");
    return t;
  }

  PretrainOptions pretrain() const {
    PretrainOptions p;
    p.epochs = size("pretrain.epochs");
    p.batch = size("pretrain.batch");
    p.lr = real("pretrain.lr");
    p.seed = u64("pretrain.seed");
    p.group = families("pretrain.families").size();
    return p;
  }

  std::vector<std::size_t> ablation_sizes() const {
    return scaled_sizes(sizes("eval.ablation_sizes"), real("data.scale_factor"));
  }

 private:
  static void check_value(const std::string& key, Kind kind, const std::string& v) {
    switch (kind) {
      case Kind::UInt: (void)cfgparse::to_u64(key, v); break;
      case Kind::Real: (void)cfgparse::to_f64(key, v); break;
      case Kind::OptReal:
        if (!v.empty()) (void)cfgparse::to_f64(key, v);
        break;
      case Kind::Bool: (void)cfgparse::to_bool(key, v); break;
      case Kind::Text: break;
      case Kind::UIntList:
        for (const auto& x : cfgparse::split_list(v)) (void)cfgparse::to_u64(key, x);
        break;
      case Kind::RealList:
        for (const auto& x : cfgparse::split_list(v)) (void)cfgparse::to_f64(key, x);
        break;
      case Kind::FamilyList:
        for (const auto& x : cfgparse::split_list(v)) (void)parse_family(x);
        break;
      case Kind::Strategy: (void)parse_strategy(v); break;
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace vlmdet
