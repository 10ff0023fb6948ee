#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "vlmdet/eval/experiments.hpp"

using namespace vlmdet;
using testing_support::small_config;

namespace {

std::vector<ScoredItem> items_of(std::vector<double> scores, std::vector<int> labels) {
  std::vector<ScoredItem> out;
  for (std::size_t i = 0; i < scores.size(); ++i) out.push_back({scores[i], labels[i], i});
  return out;
}

// Walks the ranked list accumulating precision times the recall increment.
double ap_oracle(std::vector<ScoredItem> items) {
  std::sort(items.begin(), items.end(), [](const ScoredItem& a, const ScoredItem& b) { return a.score > b.score; });
  double P = 0;
  for (const auto& it : items) P += it.label;
  double tp = 0, prev_recall = 0, ap = 0;
  for (std::size_t k = 0; k < items.size(); ++k) {
    tp += items[k].label;
    const double recall = tp / P, precision = tp / double(k + 1);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

}  // namespace

// ---- average precision ---------------------------------------------------------

TEST(AveragePrecision, HandExample) {
  const auto items = items_of({.9, .8, .7, .6}, {1, 0, 1, 0});
  EXPECT_NEAR(average_precision(items), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
}

TEST(AveragePrecision, PerfectRankingAndAllPositive) {
  EXPECT_EQ(average_precision(items_of({.9, .8, .2, .1}, {1, 1, 0, 0})), 1.0);
  EXPECT_EQ(average_precision(items_of({.1, .5, .3}, {1, 1, 1})), 1.0);
}

TEST(AveragePrecision, NoPositivesIsAnError) {
  EXPECT_THROW(average_precision(items_of({.9, .1}, {0, 0})), MetricError);
  EXPECT_THROW(average_precision(std::vector<ScoredItem>{}), MetricError);
}

TEST(AveragePrecision, InvalidScoresAndLabels) {
  EXPECT_THROW(average_precision(items_of({1.5}, {1})), MetricError);
  EXPECT_THROW(average_precision(items_of({std::nan("")}, {1})), MetricError);
  EXPECT_THROW(average_precision(items_of({.5}, {2})), MetricError);
}

// Tied scores rank by ascending source id.
TEST(AveragePrecision, TiesBrokenBySourceId) {
  std::vector<ScoredItem> a = {{0.5, 0, 0}, {0.5, 1, 1}};
  EXPECT_NEAR(average_precision(a), 0.5, 1e-15);
  std::vector<ScoredItem> b = {{0.5, 0, 1}, {0.5, 1, 0}};
  EXPECT_EQ(average_precision(b), 1.0);
}

TEST(AveragePrecision, ExhaustiveAgainstOracle) {
  SeededRng rng(31);
  for (std::size_t n = 1; n <= 10; ++n) {
    for (std::uint32_t mask = 1; mask < (1u << n); ++mask) {
      const auto perm = rng.permutation(n);
      std::vector<ScoredItem> items;
      for (std::size_t i = 0; i < n; ++i) items.push_back({(double(perm[i]) + 0.5) / double(n), int((mask >> i) & 1), i});
      ASSERT_NEAR(average_precision(items), ap_oracle(items), 1e-12) << "n=" << n << " mask=" << mask;
    }
  }
}

TEST(AveragePrecision, InvariantUnderIncreasingTransform) {
  SeededRng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<ScoredItem> items, warped;
    for (std::size_t i = 0; i < 30; ++i) {
      const double s = rng.uniform();
      const int y = int(rng.below(2));
      items.push_back({s, y, i});
      warped.push_back({std::pow(s, 3.0) * 0.5 + 0.1, y, i});
    }
    items[0].label = 1;
    warped[0].label = 1;
    EXPECT_EQ(average_precision(items), average_precision(warped));
  }
}

// ---- accuracy --------------------------------------------------------------------

TEST(Accuracy, Examples) {
  EXPECT_EQ(accuracy_at_threshold(items_of({.9, .8, .2, .1}, {1, 1, 0, 0})), 1.0);
  EXPECT_EQ(accuracy_at_threshold(items_of({.5, .5, .5, .5}, {1, 0, 1, 0})), 0.5);
  EXPECT_EQ(accuracy_at_threshold(items_of({.6, .4, .7, .2}, {1, 0, 0, 1})), 0.5);
  EXPECT_EQ(accuracy_at_threshold(items_of({.6, .4}, {1, 0}), 0.7), 0.5);
  EXPECT_THROW(accuracy_at_threshold(std::vector<ScoredItem>{}), MetricError);
}

TEST(Accuracy, MirrorComplement) {
  SeededRng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<ScoredItem> items, mirrored, flipped, both;
    for (std::size_t i = 0; i < 17; ++i) {
      double s = rng.uniform();
      if (s == 0.5) s = 0.25;
      const int y = int(rng.below(2));
      items.push_back({s, y, i});
      mirrored.push_back({1.0 - s, y, i});
      flipped.push_back({s, 1 - y, i});
      both.push_back({1.0 - s, 1 - y, i});
    }
    const double acc = accuracy_at_threshold(items);
    EXPECT_NEAR(acc + accuracy_at_threshold(mirrored), 1.0, 1e-15);
    EXPECT_NEAR(acc + accuracy_at_threshold(flipped), 1.0, 1e-15);
    EXPECT_EQ(acc, accuracy_at_threshold(both));
  }
}

// ---- aggregation -----------------------------------------------------------------

TEST(MeanAp, Aggregates) {
  MetricsReport a, b;
  a.rows = {{"gan_like", Family::GanLike, 1, 1, 1.0, 1.0}};
  a.finalize();
  EXPECT_EQ(mean_ap({a}), 1.0);
  b.rows = {{"gan_like", Family::GanLike, 1, 1, 0.5, 0.5}};
  b.finalize();
  EXPECT_EQ(mean_ap({a, b}), 0.75);
  MetricsReport same;
  same.rows = {{"x", Family::GanLike, 1, 1, 0.8, 0.7}, {"y", Family::DiffusionLike, 1, 1, 0.8, 0.6}};
  same.finalize();
  EXPECT_NEAR(same.map, 0.8, 1e-15);
  EXPECT_NEAR(same.mean_acc, 0.65, 1e-15);
  EXPECT_THROW(mean_ap({}), MetricError);
  EXPECT_THROW(same.row(Family::CommercialLike), PreconditionError);
}

TEST(Ablation, ScaledSizes) {
  EXPECT_EQ(scaled_sizes({20000, 40000, 60000, 80000}, 0.1), (std::vector<std::size_t>{2000, 4000, 6000, 8000}));
  EXPECT_EQ(scaled_sizes({20000}, 1.0), (std::vector<std::size_t>{20000}));
  EXPECT_EQ(scaled_sizes({30}, 0.1), (std::vector<std::size_t>{4}));
}

// ---- experiments on a small random backbone --------------------------------------

namespace {

struct Fixture {
  DualEncoder<float> backbone{small_config(), synth::default_vocabulary(), 5};
  synth::SynthConfig cfg{64, 20};
  Splits splits = [] {
    SplitSpec s;
    s.train_size = 40;
    s.eval_size = 12;
    return build_splits(s);
  }();
};

AdaptedModel<float> trained(const Fixture& f, StrategyKind k) {
  StrategySpec s;
  s.kind = k;
  s.m = 4;
  TrainOptions opt;
  opt.epochs = 2;
  opt.batch = 16;
  return train_adaptation(f.backbone, s, f.splits.train, f.cfg, opt).model;
}

}  // namespace

TEST(Evaluate, ReportShape) {
  Fixture f;
  const auto model = trained(f, StrategyKind::LinearProbe);
  const auto rep = evaluate(model, f.splits.eval, f.cfg, "in_distribution");
  ASSERT_EQ(rep.rows.size(), 3u);
  double s = 0;
  for (const auto& r : rep.rows) {
    EXPECT_EQ(r.n_real, 6u);
    EXPECT_EQ(r.n_fake, 6u);
    EXPECT_TRUE(r.ap >= 0 && r.ap <= 1 && r.acc >= 0 && r.acc <= 1);
    s += r.ap;
  }
  EXPECT_NEAR(rep.map, s / 3.0, 1e-15);
  EXPECT_EQ(rep.rows[1].dataset, "diffusion_like");
  EXPECT_EQ(rep.metadata.at("strategy"), "linear");
}

TEST(Evaluate, CacheMustMatchBackbone) {
  Fixture f;
  const auto model = trained(f, StrategyKind::FineTune);
  EvalFeatureCache<float> cache(f.backbone, f.splits.eval, f.cfg);
  EXPECT_THROW(evaluate(model, cache, "x"), ContractError);
}

TEST(Sweep, GridShapeAndIdentityBaseline) {
  Fixture f;
  const auto model = trained(f, StrategyKind::Adapter);
  EvalFeatureCache<float> cache(model.backbone(), f.splits.eval, f.cfg);
  const auto sweep = robustness_sweep(model, cache);
  EXPECT_EQ(sweep.cells.size(), 5u * 3u);
  const auto base = evaluate(model, f.splits.eval, f.cfg, "base");
  for (const auto& row : base.rows) {
    const auto& c = sweep.cell(Perturbation::identity(), row.family);
    EXPECT_EQ(c.ap, row.ap);
    EXPECT_EQ(c.acc, row.acc);
    EXPECT_TRUE(c.error.empty());
  }
  for (int q : {75, 50}) EXPECT_NO_THROW(sweep.cell(Perturbation::jpeg(q), Family::GanLike));
  for (double s : {1.0, 2.0}) EXPECT_NO_THROW(sweep.cell(Perturbation::blur(s), Family::CommercialLike));
  EXPECT_EQ(sweep_grid({90}, {}).size(), 2u);
}

TEST(Ablation, ValidationAndSingleSize) {
  Fixture f;
  StrategySpec s;
  s.kind = StrategyKind::LinearProbe;
  AblationOptions opt;
  opt.split.eval_size = 8;
  opt.train.epochs = 1;
  opt.train.batch = 8;
  opt.sizes = {};
  EXPECT_THROW(size_ablation(f.backbone, s, opt, f.cfg), PreconditionError);
  opt.sizes = {20, 10};
  EXPECT_THROW(size_ablation(f.backbone, s, opt, f.cfg), PreconditionError);
  opt.sizes = {21};
  EXPECT_THROW(size_ablation(f.backbone, s, opt, f.cfg), PreconditionError);
  opt.sizes = {20};
  const auto one = size_ablation(f.backbone, s, opt, f.cfg);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].name, "size_20");
}

TEST(Ablation, DeterministicAndNested) {
  Fixture f;
  StrategySpec s;
  s.kind = StrategyKind::Adapter;
  AblationOptions opt;
  opt.split.eval_size = 8;
  opt.train.epochs = 2;
  opt.train.batch = 8;
  opt.sizes = {20, 40};
  const auto a = size_ablation(f.backbone, s, opt, f.cfg);
  const auto b = size_ablation(f.backbone, s, opt, f.cfg);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a, b);
  // The first size trained alone must match its entry in the longer run.
  opt.sizes = {20};
  const auto alone = size_ablation(f.backbone, s, opt, f.cfg);
  EXPECT_EQ(alone[0].rows, a[0].rows);
}

TEST(Ablation, FailureNamesTheSize) {
  Fixture f;
  StrategySpec s;
  s.kind = StrategyKind::LinearProbe;
  AblationOptions opt;
  opt.split.eval_size = 8;
  opt.train.epochs = 1;
  opt.train.batch = 8;
  opt.train.lr = 1e300;
  opt.sizes = {20};
  try {
    size_ablation(f.backbone, s, opt, f.cfg);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("train size 20"), std::string::npos) << e.what();
  }
}
