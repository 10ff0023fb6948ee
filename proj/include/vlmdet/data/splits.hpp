#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vlmdet/core/rng.hpp"
#include "vlmdet/data/synth.hpp"

namespace vlmdet {

// Everything needed to regenerate one sample.
struct SampleKey {
  Family family = Family::Real;
  std::size_t category = 0;
  std::uint64_t seed = 0;
  int label = 0;

  bool operator==(const SampleKey&) const = default;
};

inline SampleRecord materialize(const SampleKey& key, const synth::SynthConfig& cfg) {
  return synth::generate_sample(key.family, key.category, key.seed, cfg);
}

struct EvalSet {
  Family family = Family::GanLike;
  std::vector<SampleKey> items;  // real and fake interleaved
};

struct SplitSpec {
  std::size_t train_size = 10000;
  std::size_t eval_size = 400;  // per evaluated family, real + fake
  std::size_t categories = 20;
  std::uint64_t seed = 0;
  std::vector<Family> eval_families = {Family::GanLike, Family::DiffusionLike, Family::CommercialLike};
};

struct Splits {
  std::vector<SampleKey> train;
  std::vector<EvalSet> eval;
};

namespace detail {

enum : std::uint64_t { kTrainStream = 1, kEvalStream = 100, kPretrainStream = 7 };

inline std::uint64_t sample_seed(std::uint64_t split_seed, std::uint64_t stream, Family family, std::size_t k) {
  return SeededRng(split_seed).split(stream).split(static_cast<std::uint64_t>(family)).at(k);
}

// k-th sample of a balanced stream alternating real/fake.
inline SampleKey balanced_key(std::uint64_t split_seed, std::uint64_t stream, Family fake, std::size_t i,
                              std::size_t categories) {
  const std::size_t k = i / 2;
  const Family fam = (i % 2 == 0) ? Family::Real : fake;
  return {fam, k % categories, sample_seed(split_seed, stream, fam, k), family_label(fam)};
}

}  // namespace detail

// Train: REAL + GAN_LIKE only, alternating, so any even-length prefix is
// itself balanced (smaller train sets nest inside larger ones). Eval: one
// balanced set per family, each with its own fresh REAL samples.
inline Splits build_splits(const SplitSpec& spec) {
  if (spec.train_size % 2 != 0 || spec.eval_size % 2 != 0)
    throw PreconditionError("split sizes must be even for class balance");
  if (spec.categories == 0) throw PreconditionError("need at least one category");
  Splits s;
  s.train.reserve(spec.train_size);
  for (std::size_t i = 0; i < spec.train_size; ++i)
    s.train.push_back(detail::balanced_key(spec.seed, detail::kTrainStream, Family::GanLike, i, spec.categories));
  std::set<std::uint64_t> train_seeds;
  for (const auto& k : s.train) train_seeds.insert(k.seed);
  for (Family f : spec.eval_families) {
    EvalSet es;
    es.family = f;
    const std::uint64_t stream = detail::kEvalStream + static_cast<std::uint64_t>(f);
    for (std::size_t i = 0; i < spec.eval_size; ++i) {
      auto key = detail::balanced_key(spec.seed, stream, f, i, spec.categories);
      if (train_seeds.count(key.seed)) throw PreconditionError("train/eval seed collision");
      es.items.push_back(key);
    }
    s.eval.push_back(std::move(es));
  }
  return s;
}

// Captioned pre-training corpus in content-matched groups: consecutive runs
// of |families| samples share category and seed and differ only in family.
inline std::vector<SampleKey> pretrain_corpus(std::size_t n, std::uint64_t seed, std::size_t categories,
                                              const std::vector<Family>& families) {
  if (families.empty()) throw PreconditionError("pre-training corpus needs at least one family");
  if (categories == 0) throw PreconditionError("need at least one category");
  std::vector<SampleKey> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Family f = families[i % families.size()];
    const std::size_t k = i / families.size();
    out.push_back({f, k % categories, detail::sample_seed(seed, detail::kPretrainStream, Family::Real, k), family_label(f)});
  }
  return out;
}

// Exactly k real and k fake per category, chosen uniformly without
// replacement; output keeps the training-set order.
inline std::vector<SampleKey> kshot_subset(const std::vector<SampleKey>& train, std::size_t k, std::size_t categories,
                                           std::uint64_t seed) {
  std::map<std::pair<std::size_t, int>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < train.size(); ++i) groups[{train[i].category, train[i].label}].push_back(i);
  SeededRng rng = SeededRng(seed).split(0x5A0);
  std::vector<std::size_t> chosen;
  for (std::size_t c = 0; c < categories; ++c)
    for (int label = 0; label <= 1; ++label) {
      auto& g = groups[{c, label}];
      if (g.size() < k) {
        throw PreconditionError("kshot: category " + std::to_string(c) + " has " + std::to_string(g.size()) + " " +
                                (label ? "fake" : "real") + " samples, short by " + std::to_string(k - g.size()));
      }
      SeededRng local = rng.split(c * 2 + static_cast<std::size_t>(label));
      local.shuffle(std::span<std::size_t>(g));
      chosen.insert(chosen.end(), g.begin(), g.begin() + static_cast<long>(k));
    }
  std::sort(chosen.begin(), chosen.end());
  std::vector<SampleKey> out;
  out.reserve(chosen.size());
  for (std::size_t i : chosen) out.push_back(train[i]);
  return out;
}

// Split manifests: one "family,category,seed,label" line per sample.
inline std::string manifest_text(const std::vector<SampleKey>& keys) {
  std::ostringstream os;
  for (const auto& k : keys) os << family_name(k.family) << ',' << k.category << ',' << k.seed << ',' << k.label << '\n';
  return os.str();
}

inline std::vector<SampleKey> parse_manifest(const std::string& text) {
  std::vector<SampleKey> out;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string fam, cat, seed, label;
    if (!std::getline(ls, fam, ',') || !std::getline(ls, cat, ',') || !std::getline(ls, seed, ',') ||
        !std::getline(ls, label)) {
      throw IoError("manifest line " + std::to_string(lineno) + " is malformed");
    }
    SampleKey k;
    k.family = parse_family(fam);
    k.category = std::stoul(cat);
    k.seed = std::stoull(seed);
    k.label = std::stoi(label);
    if (k.label != family_label(k.family)) throw IoError("manifest line " + std::to_string(lineno) + ": label does not match family");
    out.push_back(k);
  }
  return out;
}

}  // namespace vlmdet
