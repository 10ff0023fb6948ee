#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "vlmdet/core/error.hpp"

namespace vlmdet {

struct ScoredItem {
  double score = 0;  // fake probability
  int label = 0;     // 1 = fake
  std::uint64_t source_id = 0;
};

inline void check_items(std::span<const ScoredItem> items, const char* what) {
  for (const auto& it : items) {
    if (!std::isfinite(it.score) || it.score < 0.0 || it.score > 1.0)
      throw MetricError(std::string(what) + ": score " + std::to_string(it.score) + " outside [0, 1]");
    if (it.label != 0 && it.label != 1) throw MetricError(std::string(what) + ": label must be 0 or 1");
  }
}

// Descending score; ties resolved by ascending source id.
inline std::vector<std::size_t> ranking(std::span<const ScoredItem> items) {
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (items[a].score != items[b].score) return items[a].score > items[b].score;
    return items[a].source_id < items[b].source_id;
  });
  return order;
}

// Mean over positives of precision at each positive's rank.
inline double average_precision(std::span<const ScoredItem> items) {
  check_items(items, "average_precision");
  const auto order = ranking(items);
  std::size_t positives = 0;
  double sum = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (items[order[r]].label == 1) {
      ++positives;
      sum += double(positives) / double(r + 1);
    }
  }
  if (positives == 0) throw MetricError("average precision is undefined without positive items");
  return sum / double(positives);
}

// Fraction of items where (score >= threshold) agrees with label == 1.
inline double accuracy_at_threshold(std::span<const ScoredItem> items, double threshold = 0.5) {
  check_items(items, "accuracy");
  if (items.empty()) throw MetricError("accuracy of an empty item list");
  std::size_t hits = 0;
  for (const auto& it : items) hits += ((it.score >= threshold) == (it.label == 1)) ? 1 : 0;
  return double(hits) / double(items.size());
}

inline double mean_of(std::span<const double> v) {
  if (v.empty()) throw MetricError("mean of an empty list");
  double s = 0;
  for (double x : v) s += x;
  return s / double(v.size());
}

}  // namespace vlmdet
