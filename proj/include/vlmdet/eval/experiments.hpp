#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vlmdet/adapt/train.hpp"
#include "vlmdet/eval/metrics.hpp"

namespace vlmdet {

struct MetricsRow {
  std::string dataset;
  Family family = Family::GanLike;
  std::size_t n_real = 0, n_fake = 0;
  double ap = 0, acc = 0;

  bool operator==(const MetricsRow&) const = default;
};

struct MetricsReport {
  std::string name;  // e.g. "in_distribution", "size_2000"
  std::vector<MetricsRow> rows;
  double map = 0;       // mean AP over rows
  double mean_acc = 0;  // mean accuracy over rows
  std::map<std::string, std::string> metadata;  // strategy, seed, config digest ...

  void finalize() {
    std::vector<double> aps, accs;
    for (const auto& r : rows) {
      aps.push_back(r.ap);
      accs.push_back(r.acc);
    }
    map = mean_of(aps);
    mean_acc = mean_of(accs);
  }

  const MetricsRow& row(Family f) const {
    for (const auto& r : rows)
      if (r.family == f) return r;
    throw PreconditionError(std::string("report has no row for ") + family_name(f));
  }

  bool operator==(const MetricsReport&) const = default;
};

inline double mean_ap(const std::vector<MetricsReport>& reports) {
  std::vector<double> aps;
  for (const auto& r : reports) aps.push_back(r.map);
  return mean_of(aps);
}

inline std::string dataset_name(Family f) {
  std::string s = family_name(f);
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// Scores align with eval-set items; source id is the item index.
inline std::vector<ScoredItem> scored_items(const EvalSet& set, const std::vector<double>& scores) {
  if (scores.size() != set.items.size()) throw ShapeError("score count does not match eval set size");
  std::vector<ScoredItem> out;
  out.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out.push_back({scores[i], set.items[i].label, i});
  return out;
}

inline MetricsRow metrics_row(const EvalSet& set, const std::vector<double>& scores) {
  const auto items = scored_items(set, scores);
  MetricsRow r;
  r.dataset = dataset_name(set.family);
  r.family = set.family;
  for (const auto& it : items) (it.label ? r.n_fake : r.n_real)++;
  r.ap = average_precision(items);
  r.acc = accuracy_at_threshold(items);
  return r;
}

// Backbone features of every eval set under each perturbation, computed on
// first use. Bound to one backbone by content digest, so frozen strategies
// sharing a backbone share the encodings.
template <class T>
class EvalFeatureCache {
 public:
  EvalFeatureCache(const DualEncoder<T>& backbone, const std::vector<EvalSet>& sets, synth::SynthConfig cfg)
      : backbone_(&backbone), sets_(&sets), cfg_(cfg), digest_(backbone_digest(backbone)) {}

  static std::string backbone_digest(const DualEncoder<T>& b) {
    Sha256 h;
    for (const auto& p : b.params()) h.update(parameter_digest(p));
    return h.finish();
  }

  const std::string& digest() const { return digest_; }
  const std::vector<EvalSet>& sets() const { return *sets_; }

  bool serves(const AdaptedModel<T>& m) const { return backbone_digest(m.backbone()) == digest_; }

  const FeatureBank<T>& get(std::size_t set_index, const Perturbation& p) {
    const auto key = std::make_pair(set_index, p.label());
    auto it = banks_.find(key);
    if (it == banks_.end()) {
      const auto& items = sets_->at(set_index).items;
      it = banks_.emplace(key, compute_features(*backbone_, std::span<const SampleKey>(items), cfg_, p)).first;
    }
    return it->second;
  }

 private:
  const DualEncoder<T>* backbone_;
  const std::vector<EvalSet>* sets_;
  synth::SynthConfig cfg_;
  std::string digest_;
  std::map<std::pair<std::size_t, std::string>, FeatureBank<T>> banks_;
};

template <class T>
std::vector<double> score_set(const AdaptedModel<T>& model, EvalFeatureCache<T>& cache, std::size_t set_index,
                              const Perturbation& p = {}) {
  return model.fake_probabilities(cache.get(set_index, p).all());
}

// Requires a cache built from this model's backbone.
template <class T>
MetricsReport evaluate(const AdaptedModel<T>& model, EvalFeatureCache<T>& cache, const std::string& name,
                       const Perturbation& p = {}) {
  if (!cache.serves(model)) throw ContractError("feature cache was built from a different backbone");
  MetricsReport rep;
  rep.name = name;
  for (std::size_t i = 0; i < cache.sets().size(); ++i) rep.rows.push_back(metrics_row(cache.sets()[i], score_set(model, cache, i, p)));
  rep.finalize();
  rep.metadata["strategy"] = strategy_name(model.spec().kind);
  return rep;
}

template <class T>
MetricsReport evaluate(const AdaptedModel<T>& model, const std::vector<EvalSet>& sets, const synth::SynthConfig& cfg,
                       const std::string& name) {
  EvalFeatureCache<T> cache(model.backbone(), sets, cfg);
  return evaluate(model, cache, name);
}

// ---- robustness sweep -------------------------------------------------------

struct SweepCell {
  Perturbation perturbation;
  Family family = Family::GanLike;
  std::size_t n_real = 0, n_fake = 0;
  double ap = 0, acc = 0;
  std::string error;  // non-empty when the cell failed

  bool operator==(const SweepCell&) const = default;
};

struct SweepResult {
  std::vector<SweepCell> cells;  // perturbation-major, families in eval order
  std::map<std::string, std::string> metadata;

  const SweepCell& cell(const Perturbation& p, Family f) const {
    for (const auto& c : cells)
      if (c.perturbation == p && c.family == f) return c;
    throw PreconditionError("sweep has no cell " + p.label() + "/" + family_name(f));
  }

  bool operator==(const SweepResult&) const = default;
};

inline std::vector<Perturbation> sweep_grid(const std::vector<int>& qualities, const std::vector<double>& sigmas) {
  std::vector<Perturbation> grid{Perturbation::identity()};
  for (int q : qualities) grid.push_back(Perturbation::jpeg(q));
  for (double s : sigmas) grid.push_back(Perturbation::blur(s));
  return grid;
}

template <class T>
SweepResult robustness_sweep(const AdaptedModel<T>& model, EvalFeatureCache<T>& cache,
                             const std::vector<int>& qualities = {75, 50},
                             const std::vector<double>& sigmas = {1.0, 2.0}) {
  if (!cache.serves(model)) throw ContractError("feature cache was built from a different backbone");
  SweepResult res;
  res.metadata["strategy"] = strategy_name(model.spec().kind);
  for (const auto& p : sweep_grid(qualities, sigmas)) {
    for (std::size_t i = 0; i < cache.sets().size(); ++i) {
      SweepCell cell;
      cell.perturbation = p;
      cell.family = cache.sets()[i].family;
      try {
        const MetricsRow row = metrics_row(cache.sets()[i], score_set(model, cache, i, p));
        cell.n_real = row.n_real;
        cell.n_fake = row.n_fake;
        cell.ap = row.ap;
        cell.acc = row.acc;
      } catch (const Error& e) {
        cell.error = e.what();
      }
      res.cells.push_back(std::move(cell));
    }
  }
  return res;
}

// ---- size ablation / few-shot -----------------------------------------------

struct AblationOptions {
  std::vector<std::size_t> sizes = {2000, 4000, 6000, 8000};
  SplitSpec split;  // train_size is overwritten with the largest size
  TrainOptions train;
};

// Toy sizes are the base sizes times a scale factor.
inline std::vector<std::size_t> scaled_sizes(const std::vector<std::size_t>& base, double factor) {
  std::vector<std::size_t> out;
  for (std::size_t b : base) {
    auto n = static_cast<std::size_t>(std::llround(double(b) * factor));
    n += n % 2;
    out.push_back(n);
  }
  return out;
}

template <class T>
std::vector<MetricsReport> size_ablation(const DualEncoder<T>& backbone, const StrategySpec& spec,
                                         const AblationOptions& opt, const synth::SynthConfig& cfg) {
  if (opt.sizes.empty()) throw PreconditionError("size ablation needs at least one size");
  for (std::size_t i = 0; i < opt.sizes.size(); ++i) {
    if (opt.sizes[i] == 0 || opt.sizes[i] % 2 != 0) throw PreconditionError("ablation sizes must be positive and even");
    if (i && opt.sizes[i] <= opt.sizes[i - 1]) throw PreconditionError("ablation sizes must be ascending");
  }
  SplitSpec ss = opt.split;
  ss.train_size = opt.sizes.back();
  const Splits splits = build_splits(ss);
  const bool frozen = spec.kind != StrategyKind::FineTune;
  std::optional<FeatureBank<T>> full_bank;
  if (frozen && !opt.train.augment) full_bank = compute_features(backbone, std::span<const SampleKey>(splits.train), cfg);
  std::optional<EvalFeatureCache<T>> frozen_cache;
  if (frozen) frozen_cache.emplace(backbone, splits.eval, cfg);

  std::vector<MetricsReport> out;
  for (std::size_t n : opt.sizes) {
    try {
      const std::span<const SampleKey> keys(splits.train.data(), n);
      std::optional<FeatureBank<T>> bank;
      if (full_bank) bank = full_bank->prefix(n);
      auto trained = train_adaptation(backbone, spec, keys, cfg, opt.train, bank ? &*bank : nullptr);
      MetricsReport rep;
      if (frozen) {
        rep = evaluate(trained.model, *frozen_cache, "size_" + std::to_string(n));
      } else {
        EvalFeatureCache<T> cache(trained.model.backbone(), splits.eval, cfg);
        rep = evaluate(trained.model, cache, "size_" + std::to_string(n));
      }
      rep.metadata["train_size"] = std::to_string(n);
      out.push_back(std::move(rep));
    } catch (const Error& e) {
      throw Error("size ablation failed at train size " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace vlmdet
