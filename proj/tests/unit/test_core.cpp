#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "support.hpp"
#include "vlmdet/core/gradcheck.hpp"
#include "vlmdet/core/kernels.hpp"
#include "vlmdet/core/ops.hpp"
#include "vlmdet/core/optim.hpp"

using namespace vlmdet;
using testing_support::random_tensor;
using T64 = Tensor<double>;

namespace {

// Weighted sum with fixed random weights: a scalar whose gradient touches
// every output coordinate with a different weight.
T64 probe(const T64& y, std::uint64_t seed = 99) {
  return ops::sum(ops::mul(y, random_tensor<double>(y.shape(), seed, false)));
}

double check(const std::function<T64()>& f, std::vector<T64> inputs) {
  return finite_diff_grad_check<double>(f, std::move(inputs)).max_rel_error;
}

}  // namespace

// ---- RNG ------------------------------------------------------------------

TEST(Rng, MatchesFixtureVectors) {
  std::size_t checked = 0;
  for (const auto& line : testing_support::fixture_lines("rng_vectors.txt")) {
    std::istringstream is(line);
    if (line.rfind("split", 0) == 0) {
      std::string tag;
      std::uint64_t seed, stream, child;
      is >> tag >> seed >> stream >> child;
      EXPECT_EQ(SeededRng(seed).split(stream).seed(), child);
    } else {
      std::uint64_t seed, pos, value;
      is >> seed >> pos >> value;
      EXPECT_EQ(SeededRng(seed).at(pos), value) << "seed " << seed << " pos " << pos;
    }
    ++checked;
  }
  EXPECT_GE(checked, 38u);
  EXPECT_EQ(SeededRng(0).at(0), 0xE220A8397B1DCDAFULL);
}

TEST(Rng, StreamAdvancesThroughPositions) {
  SeededRng a(5);
  for (std::uint64_t i = 0; i < 10; ++i) EXPECT_EQ(a.next_u64(), SeededRng(5).at(i));
}

TEST(Rng, UniformAndBelowRanges) {
  SeededRng r(3);
  std::vector<int> hist(7, 0);
  for (int i = 0; i < 7000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    const auto b = r.below(7);
    ASSERT_LT(b, 7u);
    ++hist[b];
  }
  for (int h : hist) EXPECT_NEAR(h, 1000, 150);
}

TEST(Rng, NormalMoments) {
  SeededRng r(11);
  double s = 0, s2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.03);
  EXPECT_NEAR(s2 / n, 1.0, 0.04);
}

TEST(Rng, PermutationIsDeterministicBijection) {
  auto p = SeededRng(8).permutation(50);
  auto q = SeededRng(8).permutation(50);
  EXPECT_EQ(p, q);
  std::set<std::size_t> s(p.begin(), p.end());
  EXPECT_EQ(s.size(), 50u);
  EXPECT_EQ(*s.rbegin(), 49u);
  EXPECT_NE(p, SeededRng(9).permutation(50));
}

// ---- GELU -----------------------------------------------------------------

TEST(Gelu, MatchesHighPrecisionFixture) {
  for (const auto& line : testing_support::fixture_lines("gelu_vectors.txt")) {
    std::istringstream is(line);
    double x, y;
    is >> x >> y;
    EXPECT_NEAR(ops::gelu_value(x), y, 1e-15 * std::max(1.0, std::abs(y))) << "x=" << x;
  }
}

TEST(Gelu, ZeroAndAsymptotics) {
  EXPECT_EQ(ops::gelu_value(0.0), 0.0);
  EXPECT_NEAR(ops::gelu_value(20.0), 20.0, 1e-12);
  EXPECT_NEAR(ops::gelu_value(-20.0), 0.0, 1e-12);
}

// ---- tensor basics ----------------------------------------------------------

TEST(Tensor, ShapeMismatchOnConstruction) {
  EXPECT_THROW(Tensor<float>::from({2, 2}, {1, 2, 3}), ShapeError);
  const auto t = Tensor<float>::zeros({3, 4});
  EXPECT_EQ(t.rows(), 3u);
  EXPECT_EQ(t.cols(), 4u);
  EXPECT_EQ(t.numel(), 12u);
}

TEST(Tensor, NonFiniteForwardIsAnError) {
  const auto t = Tensor<double>::from({1}, {1000.0});
  EXPECT_THROW(ops::exp(t), NumericError);
}

// ---- matmul -------------------------------------------------------------------

TEST(Matmul, IdentityAndHandProduct) {
  const auto eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  const auto m = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  const auto y = ops::matmul(eye, m);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{1, 2, 3, 4}));
  const auto z = ops::matmul(Tensor<double>::from({1, 2}, {1, 2}), Tensor<double>::from({2, 1}, {3, 4}));
  EXPECT_EQ(z.item(), 11.0);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    ops::matmul(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({4, 5}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  auto a = random_tensor<double>({3, 4}, 1), b = random_tensor<double>({4, 2}, 2);
  EXPECT_LT(check([&] { return ops::sum(ops::matmul(a, b)); }, {a, b}), 1e-6);
  EXPECT_LT(check([&] { return probe(ops::matmul(a, b)); }, {a, b}), 1e-6);
}

TEST(Kernels, BlockedGemmMatchesReferenceOrderBitwise) {
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {5, 7, 3}, {4, 16, 16}, {9, 33, 41}, {65, 48, 192}}) {
    auto a = random_tensor<float>({std::size_t(m), std::size_t(k)}, 3, false);
    auto b = random_tensor<float>({std::size_t(k), std::size_t(n)}, 4, false);
    std::vector<float> fast(m * n, 0.5f), ref(m * n, 0.5f);
    kernels::gemm_acc(a.data().data(), b.data().data(), fast.data(), m, k, n);
    kernels::detail::gemm_rows(a.data().data(), b.data().data(), ref.data(), 0, m, 0, k, n);
    for (int i = 0; i < m * n; ++i) ASSERT_EQ(std::bit_cast<std::uint32_t>(fast[i]), std::bit_cast<std::uint32_t>(ref[i]));
  }
}

// ---- softmax / layer norm / losses -----------------------------------------------

TEST(Softmax, Examples) {
  auto s = ops::softmax(Tensor<double>::from({1, 2}, {0, 0}));
  EXPECT_EQ(s[0], 0.5);
  EXPECT_EQ(s[1], 0.5);
  s = ops::softmax(Tensor<double>::from({1, 2}, {1000, 0}));
  EXPECT_NEAR(s[0], 1.0, 1e-12);
  EXPECT_NEAR(s[1], 0.0, 1e-12);
  s = ops::softmax(Tensor<double>::from({1, 3}, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(s[i], std::exp(i + 1.0) / z, 1e-15);
  EXPECT_NEAR(s[0], 0.09003057, 1e-8);
  EXPECT_NEAR(s[2], 0.66524096, 1e-8);
}

TEST(Softmax, EmptyAxisIsAnError) { EXPECT_THROW(ops::softmax(Tensor<double>::from({2, 0}, {})), Error); }

TEST(Softmax, RowsSumToOneProperty) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto x32 = random_tensor<float>({4, 7}, seed, false, -30, 30);
    auto x64 = random_tensor<double>({4, 7}, seed, false, -30, 30);
    auto s32 = ops::softmax(x32);
    auto s64 = ops::softmax(x64);
    for (std::size_t r = 0; r < 4; ++r) {
      double a = 0, b = 0;
      for (std::size_t j = 0; j < 7; ++j) {
        ASSERT_GE(s32[r * 7 + j], 0.0f);
        ASSERT_LE(s32[r * 7 + j], 1.0f);
        a += s32[r * 7 + j];
        b += s64[r * 7 + j];
      }
      EXPECT_NEAR(a, 1.0, 1e-6);
      EXPECT_NEAR(b, 1.0, 1e-12);
    }
  }
}

TEST(LayerNorm, Examples) {
  const auto g = Tensor<double>::full({2}, 1.0), b = Tensor<double>::zeros({2});
  auto y = ops::layer_norm(Tensor<double>::from({1, 2}, {3, 3}), g, b);
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.0);
  y = ops::layer_norm(Tensor<double>::from({1, 2}, {1, 3}), g, b, 1e-14);
  EXPECT_NEAR(y[0], -1.0, 1e-9);
  EXPECT_NEAR(y[1], 1.0, 1e-9);
}

TEST(CrossEntropy, Examples) {
  const std::size_t t0[] = {0};
  EXPECT_NEAR(ops::cross_entropy_with_logits(Tensor<double>::from({1, 2}, {0, 0}), t0).item(), std::log(2.0), 1e-15);
  EXPECT_LT(ops::cross_entropy_with_logits(Tensor<double>::from({1, 2}, {10, -10}), t0).item(), 1e-8);
  const std::size_t bad[] = {2};
  EXPECT_THROW(ops::cross_entropy_with_logits(Tensor<double>::from({1, 2}, {0, 0}), bad), IndexError);
}

TEST(CrossEntropy, MatchesPerRowOracle) {
  auto x = random_tensor<double>({3, 4}, 21, false, -3, 3);
  const std::size_t t[] = {2, 0, 3};
  double manual = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    double z = 0;
    for (std::size_t j = 0; j < 4; ++j) z += std::exp(x[r * 4 + j]);
    manual += -std::log(std::exp(x[r * 4 + t[r]]) / z);
  }
  EXPECT_NEAR(ops::cross_entropy_with_logits(x, t).item(), manual / 3, 1e-14);
}

TEST(BinaryCrossEntropy, Examples) {
  const double one[] = {1.0};
  EXPECT_NEAR(ops::binary_cross_entropy_with_logit(Tensor<double>::from({1}, {0.0}), std::span<const double>(one)).item(), std::log(2.0), 1e-15);
  EXPECT_LT(ops::binary_cross_entropy_with_logit(Tensor<double>::from({1}, {20.0}), std::span<const double>(one)).item(), 1e-8);
  const double y[] = {0.0, 1.0};
  const double z[] = {-1.0, 2.0};
  double direct = 0;
  for (int i = 0; i < 2; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-z[i]));
    direct += -(y[i] * std::log(s) + (1 - y[i]) * std::log(1 - s));
  }
  EXPECT_NEAR(ops::binary_cross_entropy_with_logit(Tensor<double>::from({2}, {-1.0, 2.0}), std::span<const double>(y)).item(), direct / 2, 1e-15);
}

// ---- tape ------------------------------------------------------------------------

TEST(Tape, SumGradIsOnes) {
  auto x = random_tensor<double>({2, 2}, 1);
  Tape<double> tape;
  backward(ops::sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Tape, ReuseAccumulates) {
  auto x = random_tensor<double>({2, 2}, 1);
  Tape<double> tape;
  backward(ops::sum(ops::add(x, x)));
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Tape, NonScalarLossIsAnError) {
  auto x = random_tensor<double>({2, 2}, 1);
  Tape<double> tape;
  EXPECT_THROW(backward(ops::scale(x, 2.0)), TapeError);
}

TEST(Tape, ClearedTapeDetachesLoss) {
  auto x = random_tensor<double>({2, 2}, 1);
  Tape<double> tape;
  auto loss = ops::sum(x);
  tape.clear();
  EXPECT_THROW(backward(loss), TapeError);
}

TEST(Tape, NoActiveTapeIsAnError) {
  auto x = random_tensor<double>({2}, 1);
  auto loss = ops::sum(x);
  EXPECT_THROW(backward(loss), TapeError);
}

TEST(Tape, NestedTapesRestorePrevious) {
  Tape<double> outer;
  {
    Tape<double> inner;
    EXPECT_EQ(Tape<double>::active(), &inner);
  }
  EXPECT_EQ(Tape<double>::active(), &outer);
}

// ---- gradient checker -----------------------------------------------------------

TEST(GradCheck, HalfSquaredNorm) {
  auto x = random_tensor<double>({5}, 4);
  EXPECT_LT(check([&] { return ops::scale(ops::sum(ops::mul(x, x)), 0.5); }, {x}), 1e-9);
}

TEST(GradCheck, SoftmaxCrossEntropyPipeline) {
  auto x = random_tensor<double>({3, 4}, 5);
  const std::size_t t[] = {1, 3, 0};
  EXPECT_LT(check([&] { return ops::cross_entropy_with_logits(ops::scale(ops::softmax(x), 3.0), t); }, {x}), 1e-6);
}

// Custom op whose backward rule is off by a factor of two.
TEST(GradCheck, DetectsWrongBackwardRule) {
  auto x = random_tensor<double>({4}, 6);
  auto doubled_wrong = [](const T64& a) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= 3.0;
    auto an = a.node_ptr();
    return make_result<double>(a.shape(), std::move(out), "triple_wrong", {&a}, [an](const std::vector<double>& g) {
      auto* d = detail::grad_sink(an);
      if (!d) return;
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += 6.0 * g[i];
    });
  };
  EXPECT_GT(check([&] { return probe(doubled_wrong(x)); }, {x}), 1e-2);
}

TEST(GradCheck, RejectsNonDeterministicFunction) {
  auto x = random_tensor<double>({3}, 7);
  int calls = 0;
  auto f = [&] { return ops::scale(ops::sum(x), 1.0 + 1e-3 * ++calls); };
  EXPECT_THROW(check(f, {x}), PreconditionError);
}

// ---- f64 gradient checks for every primitive ---------------------------------------

TEST(OpGradients, Elementwise) {
  auto a = random_tensor<double>({3, 4}, 10), b = random_tensor<double>({3, 4}, 11);
  auto row = random_tensor<double>({1, 4}, 12);
  auto s = random_tensor<double>({1}, 13);
  EXPECT_LT(check([&] { return probe(ops::add(a, b)); }, {a, b}), 1e-6);
  EXPECT_LT(check([&] { return probe(ops::sub(a, b)); }, {a, b}), 1e-6);
  EXPECT_LT(check([&] { return probe(ops::mul(a, b)); }, {a, b}), 1e-6);
  EXPECT_LT(check([&] { return probe(ops::add_tiled(a, row)); }, {a, row}), 1e-6);
  EXPECT_LT(check([&] { return probe(ops::scale(a, 1.7)); }, {a}), 1e-6);
  EXPECT_LT(check([&] { return probe(ops::mul_scalar(a, s)); }, {a, s}), 1e-6);
  EXPECT_LT(check([&] { return probe(ops::exp(a)); }, {a}), 1e-6);
  EXPECT_LT(check([&] { return probe(ops::gelu(a)); }, {a}), 1e-6);
  EXPECT_LT(check([&] { return ops::mean(ops::mul(a, b)); }, {a, b}), 1e-6);
  EXPECT_LT(check([&] { return probe(ops::transpose(a)); }, {a}), 1e-6);
}

TEST(OpGradients, ReluAwayFromKink) {
  auto a = random_tensor<double>({3, 4}, 14, true, 0.1, 1.0);
  auto m = a.mutable_data();
  for (std::size_t i = 0; i < m.size(); i += 2) m[i] = -m[i];
  EXPECT_LT(check([&] { return probe(ops::relu(a)); }, {a}), 1e-6);
}

TEST(OpGradients, LinearSoftmaxNorms) {
  auto x = random_tensor<double>({3, 4}, 15), w = random_tensor<double>({4, 5}, 16), bias = random_tensor<double>({5}, 17);
  auto g = random_tensor<double>({4}, 18, true, 0.5, 1.5), be = random_tensor<double>({4}, 19);
  EXPECT_LT(check([&] { return probe(ops::linear(x, w, bias)); }, {x, w, bias}), 1e-6);
  EXPECT_LT(check([&] { return probe(ops::linear(x, w)); }, {x, w}), 1e-6);
  EXPECT_LT(check([&] { return probe(ops::softmax(x)); }, {x}), 1e-6);
  EXPECT_LT(check([&] { return probe(ops::layer_norm(x, g, be)); }, {x, g, be}), 1e-6);
  EXPECT_LT(check([&] { return probe(ops::l2_normalize(x)); }, {x}), 1e-6);
}

TEST(OpGradients, RowPlumbing) {
  auto x = random_tensor<double>({4, 3}, 20), y = random_tensor<double>({2, 3}, 21), r = random_tensor<double>({3}, 22);
  const std::size_t idx[] = {3, 0, 3, 1};
  EXPECT_LT(check([&] { return probe(ops::gather_rows(x, std::span<const std::size_t>(idx))); }, {x}), 1e-6);
  EXPECT_LT(check([&] {
              const T64 parts[] = {x, y};
              return probe(ops::concat_rows(std::span<const T64>(parts)));
            },
            {x, y}),
            1e-6);
  EXPECT_LT(check([&] { return probe(ops::prepend_row(x, r, 2)); }, {x, r}), 1e-6);
}

TEST(OpGradients, Attention) {
  for (bool causal : {false, true}) {
    auto qkv = random_tensor<double>({2 * 3, 3 * 4}, 23);
    EXPECT_LT(check([&] { return probe(ops::attention(qkv, 2, 3, 2, causal)); }, {qkv}), 1e-6) << causal;
  }
}

TEST(OpGradients, Losses) {
  auto x = random_tensor<double>({3, 4}, 24, true, -2, 2);
  const std::size_t t[] = {0, 3, 1};
  const double soft[] = {0.5, 0.5, 0, 0, 0, 0, 0, 0, 0.2, 0.3, 0.1, 0.4};
  auto z = random_tensor<double>({4}, 25, true, -2, 2);
  const double y[] = {0, 1, 1, 0};
  EXPECT_LT(check([&] { return ops::cross_entropy_with_logits(x, t); }, {x}), 1e-6);
  EXPECT_LT(check([&] { return ops::soft_cross_entropy(x, std::span<const double>(soft)); }, {x}), 1e-6);
  EXPECT_LT(check([&] { return ops::binary_cross_entropy_with_logit(z, std::span<const double>(y)); }, {z}), 1e-6);
}

TEST(Attention, CausalIgnoresLaterPositions) {
  auto qkv = random_tensor<double>({4, 6}, 30, false);
  auto base = ops::attention(qkv, 1, 4, 1, true);
  auto m = qkv.mutable_data();
  for (std::size_t j = 0; j < 6; ++j) m[3 * 6 + j] += 0.5;
  auto changed = ops::attention(qkv, 1, 4, 1, true);
  for (std::size_t i = 0; i < 3 * 2; ++i) EXPECT_EQ(base[i], changed[i]);
}

// ---- optimizer ---------------------------------------------------------------------------

TEST(Adam, ZeroGradLeavesParamAndMoments) {
  std::vector<double> p{1.0, -2.0}, g{0.0, 0.0}, m{0, 0}, v{0, 0};
  adam_update<double>(p, g, m, v, AdamHyper{0.1}, 1);
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0}));
  EXPECT_EQ(m, (std::vector<double>{0, 0}));
  EXPECT_EQ(v, (std::vector<double>{0, 0}));
}

TEST(Adam, SingleStepClosedForm) {
  std::vector<double> p{0.0}, g{1.0}, m{0}, v{0};
  const AdamHyper h{0.1};
  adam_update<double>(p, g, m, v, h, 1);
  const double mhat = (1 - h.beta1) * 1.0 / (1 - h.beta1);
  const double vhat = (1 - h.beta2) * 1.0 / (1 - h.beta2);
  EXPECT_NEAR(p[0], -0.1 * mhat / (std::sqrt(vhat) + h.eps), 1e-15);
  EXPECT_NEAR(p[0], -0.1, 1e-8);
}

TEST(Adam, ShapeMismatchIsAnError) {
  std::vector<double> p{0.0, 1.0}, g{1.0}, m{0, 0}, v{0, 0};
  EXPECT_THROW(adam_update<double>(p, g, m, v, AdamHyper{}, 1), ShapeError);
}

TEST(Adam, FrozenParameterWithGradIsBitwiseUnchanged) {
  ParameterSet<double> ps;
  ps.add("a", random_tensor<double>({3}, 1), true);
  ps.add("b", random_tensor<double>({3}, 2), false);
  ps.at("b").tensor.set_requires_grad(true);
  const auto before = ps.at("b").tensor.clone();
  {
    Tape<double> tape;
    backward(ops::sum(ops::mul(ps.at("a").tensor, ps.at("b").tensor)));
  }
  ASSERT_TRUE(ps.at("b").tensor.has_grad());
  Adam<double> adam(AdamHyper{0.5});
  adam.step(ps);
  EXPECT_TRUE(testing_support::bitwise_equal(before, ps.at("b").tensor));
  EXPECT_EQ(adam.moments("b"), nullptr);
  EXPECT_NE(adam.moments("a"), nullptr);
}

TEST(ParameterSet, DuplicateNamesRejected) {
  ParameterSet<float> ps;
  ps.add("x", Tensor<float>::zeros({1}));
  EXPECT_THROW(ps.add("x", Tensor<float>::zeros({1})), PreconditionError);
  EXPECT_THROW(ps.at("y"), IndexError);
}

// ---- determinism --------------------------------------------------------------------------

TEST(Determinism, SameSeedSameOpsBitwise) {
  auto run = [] {
    auto a = random_tensor<float>({8, 16}, 42), b = random_tensor<float>({16, 8}, 43);
    return ops::softmax(ops::gelu(ops::matmul(a, b)));
  };
  EXPECT_TRUE(testing_support::bitwise_equal(run(), run()));
}
