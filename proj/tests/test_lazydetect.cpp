#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "lazykv/lazydetect.hpp"
#include "lazykv/model.hpp"
#include "oracles.hpp"

using namespace lazykv;

namespace {

// Direct double sum over the head-averaged weights.
double ratio_oracle(const std::vector<Matrix>& a, std::size_t w_last, std::size_t s, std::size_t w) {
  const std::size_t n = a[0].rows();
  const std::size_t rows = std::min(w_last, n);
  double total = 0;
  for (std::size_t q = n - rows; q < n; ++q) {
    double mass = 0;
    for (std::size_t j = 0; j <= q; ++j) {
      if (!(j < s || j + w > q)) continue;
      for (const auto& m : a) mass += m(q, j);
    }
    total += mass / double(a.size());
  }
  return total / double(rows);
}

struct RandomLayer {
  ModelConfig c;
  Weights w;
  Matrix xn;
  std::vector<Matrix> weights, q, k;
  std::vector<std::vector<double>> lse;

  RandomLayer(std::mt19937_64& rng, std::size_t n, std::size_t heads, std::size_t w_last, double spread) {
    c.layers = 1;
    c.heads = heads;
    c.dim = 2 + rng() % 7;
    c.head_dim = 1 + rng() % c.dim;
    c.logit_scaling = rng() % 2 ? LogitScaling::None : LogitScaling::InvSqrtDk;
    w = random_init(c, rng(), spread);
    xn = ln_rows(oracle::random_matrix(rng, n, c.dim, 2.0), c.ln_mode);
    const auto pass = mha_pass(xn, w.layers[0], MaskSpec::causal(), c);
    const std::size_t rows = std::min(w_last, n);
    for (std::size_t h = 0; h < heads; ++h) {
      weights.push_back(attention_weights(xn, w.layers[0].heads[h], MaskSpec::causal(), c));
      Matrix ql(0, c.head_dim);
      std::vector<double> l;
      for (std::size_t r = n - rows; r < n; ++r) {
        ql.append_row(pass.heads[h].q.row(r));
        l.push_back(pass.lse[h][r]);
      }
      q.push_back(ql);
      k.push_back(pass.heads[h].k);
      lse.push_back(l);
    }
  }
};

}  // namespace

TEST(LazyRatio, ShortInputIsExactlyOne) {
  std::mt19937_64 rng(40);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 1 + rng() % 12;
    RandomLayer L(rng, n, 2, 32, 1.0);
    DetectParams p;
    p.w_sink = 4;
    p.w_recent = 8;
    EXPECT_EQ(lazy_ratio_bruteforce(L.weights, p), 1.0);
    EXPECT_EQ(lazy_ratio_lse(L.q, L.k, L.lse, p, L.c.logit_scale()).ratio, 1.0);
  }
}

TEST(LazyRatio, UniformSingleQueryHalfMass) {
  // One query over 8 keys with equal logits; sink {0}, recent {5,6,7}.
  Matrix a(8, 8);
  for (std::size_t j = 0; j < 8; ++j) a(7, j) = 1.0 / 8;
  DetectParams p;
  p.w_last = 1;
  p.w_sink = 1;
  p.w_recent = 3;
  const std::vector<Matrix> heads{a};
  EXPECT_DOUBLE_EQ(lazy_ratio_bruteforce(heads, p), 0.5);

  // Same case through the lse path: zero queries give equal scores.
  const std::vector<Matrix> q{Matrix(1, 2)}, k{Matrix(8, 2)};
  const std::vector<std::vector<double>> lse{{std::log(8.0)}};
  EXPECT_NEAR(lazy_ratio_lse(q, k, lse, p, 1.0).ratio, 0.5, 1e-15);
}

TEST(LazyRatio, KeptSetEqualsFullSetGivesZeroLogRatio) {
  std::mt19937_64 rng(41);
  RandomLayer L(rng, 10, 3, 4, 1.0);
  DetectParams p;
  p.w_last = 4;
  p.w_sink = 0;
  p.w_recent = 10;
  const auto r = lazy_ratio_lse(L.q, L.k, L.lse, p, L.c.logit_scale());
  EXPECT_EQ(r.ratio, 1.0);
  for (const auto& h : r.log_ratios)
    for (double v : h) EXPECT_EQ(v, 0.0);
}

TEST(LazyRatio, BruteForceMatchesDoubleSumOracle) {
  std::mt19937_64 rng(42);
  for (int t = 0; t < 50; ++t) {
    RandomLayer L(rng, 32, 2, 1 + rng() % 40, 1.5);
    DetectParams p;
    p.w_last = 1 + rng() % 40;
    p.w_sink = rng() % 5;
    p.w_recent = 1 + rng() % 12;
    EXPECT_NEAR(lazy_ratio_bruteforce(L.weights, p), ratio_oracle(L.weights, p.w_last, p.w_sink, p.w_recent), 1e-12);
  }
}

TEST(LazyRatio, LseMatchesBruteForce) {
  std::mt19937_64 rng(43);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 1 + rng() % 64;
    DetectParams p;
    p.w_last = 1 + rng() % 40;
    p.w_sink = rng() % 6;
    p.w_recent = 1 + rng() % 16;
    RandomLayer L(rng, n, 1 + rng() % 4, p.w_last, 0.3 + 2.0 * double(rng() % 100) / 100.0);
    const auto lse = lazy_ratio_lse(L.q, L.k, L.lse, p, L.c.logit_scale());
    const double brute = lazy_ratio_bruteforce(L.weights, p);
    EXPECT_NEAR(lse.ratio, brute, 1e-10);
    EXPECT_GT(lse.ratio, 0.0);
    EXPECT_LE(lse.ratio, 1.0 + 1e-9);
    for (const auto& h : lse.log_ratios)
      for (double v : h) {
        EXPECT_LE(std::exp(v), 1.0);
        EXPECT_GT(std::exp(v), 0.0);
      }
  }
}

TEST(LazyRatio, ErrorPaths) {
  DetectParams p;
  const std::vector<Matrix> none;
  EXPECT_THROW(lazy_ratio_bruteforce(none, p), ContractViolation);
  const std::vector<Matrix> empty{Matrix(0, 0)};
  EXPECT_THROW(lazy_ratio_bruteforce(empty, p), InputError);
  const std::vector<Matrix> q(2, Matrix(1, 2)), k(1, Matrix(4, 2));
  const std::vector<std::vector<double>> lse(2, std::vector<double>(1));
  EXPECT_THROW(lazy_ratio_lse(q, k, lse, p, 1.0), ContractViolation);
}

TEST(Identifier, KeepAllWhenPEqualsL) {
  IdentifierState s(4, 4);
  for (std::size_t l = 0; l < 4; ++l) EXPECT_FALSE(s.push(l, 0.1 * double(l + 1)));
  const auto sel = s.finalize();
  EXPECT_EQ(sel.non_lazy, (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_TRUE(sel.lazy.empty());
}

TEST(Identifier, HandSimulatedQueue) {
  IdentifierState s(2, 4);
  EXPECT_EQ(s.push(0, 0.9), std::nullopt);
  EXPECT_EQ(s.push(1, 0.2), std::nullopt);
  EXPECT_EQ(s.push(2, 0.8), std::optional<std::size_t>(0));
  EXPECT_EQ(s.push(3, 0.1), std::optional<std::size_t>(2));
  const auto sel = s.finalize();
  EXPECT_EQ(sel.non_lazy, (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(sel.lazy, (std::vector<std::size_t>{0, 2}));
}

TEST(Identifier, ZeroCapacityPopsEveryPush) {
  IdentifierState s(0, 3);
  for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(s.push(l, 0.5), std::optional<std::size_t>(l));
  EXPECT_TRUE(s.finalize().non_lazy.empty());
}

TEST(Identifier, EqualRatiosPopDeeperLayers) {
  IdentifierState s(2, 4);
  for (std::size_t l = 0; l < 4; ++l) s.push(l, 0.7);
  const auto sel = s.finalize();
  EXPECT_EQ(sel.lazy, (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(sel.non_lazy, (std::vector<std::size_t>{0, 1}));
}

TEST(Identifier, NonLazyAreThePSmallestRatios) {
  std::mt19937_64 rng(44);
  for (int t = 0; t < 500; ++t) {
    const std::size_t layers = 1 + rng() % 12, P = rng() % (layers + 1);
    std::vector<double> r(layers);
    for (double& v : r) v = double(rng() % 6) / 5.0;  // coarse grid forces ties
    IdentifierState s(P, layers);
    for (std::size_t l = 0; l < layers; ++l) {
      s.push(l, r[l]);
      ASSERT_LE(s.size(), P);
    }
    std::vector<std::size_t> order(layers);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return r[a] != r[b] ? r[a] < r[b] : a < b; });
    std::vector<std::size_t> want(order.begin(), order.begin() + long(P));
    std::sort(want.begin(), want.end());
    const auto sel = s.finalize();
    EXPECT_EQ(sel.non_lazy, want);
    EXPECT_EQ(sel.lazy.size(), layers - P);
  }
}

TEST(Identifier, ErrorPaths) {
  IdentifierState s(1, 3);
  s.push(0, 0.5);
  EXPECT_THROW(s.push(0, 0.4), ContractViolation);
  EXPECT_THROW(s.push(3, 0.4), ContractViolation);
  EXPECT_THROW(s.finalize(), ContractViolation);
  EXPECT_THROW(IdentifierState(4, 3), ContractViolation);
}
