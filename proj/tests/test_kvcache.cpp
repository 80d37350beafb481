#include <gtest/gtest.h>

#include <random>
#include <set>

#include "lazykv/kvcache.hpp"
#include "lazykv/model.hpp"
#include "oracles.hpp"

using namespace lazykv;

namespace {

std::vector<std::size_t> range(std::size_t a, std::size_t b) {
  std::vector<std::size_t> v;
  for (std::size_t i = a; i < b; ++i) v.push_back(i);
  return v;
}

std::vector<std::size_t> concat(std::vector<std::size_t> a, const std::vector<std::size_t>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// Appends `t` tokens whose key/value rows encode their absolute position.
void append_tokens(LayerCache& c, std::size_t t) {
  std::vector<Matrix> k(c.heads(), Matrix(t, 2)), v(c.heads(), Matrix(t, 3));
  for (std::size_t h = 0; h < c.heads(); ++h)
    for (std::size_t r = 0; r < t; ++r) {
      const double pos = double(c.total_seen() + r);
      k[h](r, 0) = pos;
      k[h](r, 1) = double(h);
      v[h](r, 2) = -pos;
    }
  c.append(k, v);
}

void expect_rows_match_positions(const LayerCache& c) {
  const auto kept = c.kept_positions();
  for (std::size_t h = 0; h < c.heads(); ++h) {
    ASSERT_EQ(c.keys(h).rows(), kept.size());
    ASSERT_EQ(c.values(h).rows(), kept.size());
    for (std::size_t r = 0; r < kept.size(); ++r) {
      EXPECT_EQ(c.keys(h)(r, 0), double(kept[r]));
      EXPECT_EQ(c.values(h)(r, 2), -double(kept[r]));
    }
  }
}

// Set-arithmetic oracle for the streaming window.
std::vector<std::size_t> window_oracle(std::size_t n, std::size_t s, std::size_t w) {
  std::set<std::size_t> kept;
  for (std::size_t p = 0; p < std::min(s, n); ++p) kept.insert(p);
  for (std::size_t p = n >= w ? n - w : 0; p < n; ++p) kept.insert(p);
  return {kept.begin(), kept.end()};
}

}  // namespace

TEST(Cache, StreamingUnderCapacityKeepsEverything) {
  LayerCache c(2, 2, 3, CachePolicy::streaming(4, 8));
  for (int i = 0; i < 10; ++i) append_tokens(c, 1);
  EXPECT_EQ(std::vector<std::size_t>(c.kept_positions().begin(), c.kept_positions().end()), range(0, 10));
  EXPECT_EQ(c.size(), 10u);
}

TEST(Cache, StreamingEvictsMiddle) {
  LayerCache c(2, 2, 3, CachePolicy::streaming(4, 8));
  for (int i = 0; i < 20; ++i) append_tokens(c, 1);
  const auto want = concat(range(0, 4), range(12, 20));
  EXPECT_EQ(std::vector<std::size_t>(c.kept_positions().begin(), c.kept_positions().end()), want);
  EXPECT_EQ(c.size(), 12u);
  expect_rows_match_positions(c);
}

TEST(Cache, FullKeepsAll) {
  LayerCache c(1, 2, 3);
  for (int i = 0; i < 20; ++i) append_tokens(c, 1);
  EXPECT_EQ(c.size(), 20u);
  EXPECT_EQ(c.total_seen(), 20u);
}

TEST(Cache, TransferAtDefaultWindows) {
  LayerCache c(1, 2, 3);
  append_tokens(c, 2048);
  c.transfer_to_streaming(4, 1020);
  const auto want = concat(range(0, 4), range(1028, 2048));
  EXPECT_EQ(std::vector<std::size_t>(c.kept_positions().begin(), c.kept_positions().end()), want);
  EXPECT_EQ(c.size(), 1024u);
  expect_rows_match_positions(c);
}

TEST(Cache, TransferShortInputDropsNothing) {
  LayerCache c(2, 2, 3);
  append_tokens(c, 12);
  c.transfer_to_streaming(4, 8);
  EXPECT_EQ(c.size(), 12u);
  EXPECT_TRUE(c.policy().is_streaming());
}

TEST(Cache, TransferIsIdempotent) {
  LayerCache a(2, 2, 3), b(2, 2, 3);
  append_tokens(a, 50);
  append_tokens(b, 50);
  a.transfer_to_streaming(3, 7);
  b.transfer_to_streaming(3, 7);
  b.transfer_to_streaming(3, 7);
  b.transfer_to_streaming(1, 2);  // already streaming: ignored
  EXPECT_EQ(a.policy(), b.policy());
  EXPECT_EQ(std::vector<std::size_t>(a.kept_positions().begin(), a.kept_positions().end()),
            std::vector<std::size_t>(b.kept_positions().begin(), b.kept_positions().end()));
  for (std::size_t h = 0; h < 2; ++h) EXPECT_EQ(a.keys(h), b.keys(h));
}

TEST(Cache, RandomSchedulesRespectWindowAndOrdering) {
  std::mt19937_64 rng(30);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t s = rng() % 5, w = 1 + rng() % 9;
    LayerCache c(1 + rng() % 3, 2, 3, CachePolicy::streaming(s, w));
    const int steps = 1 + int(rng() % 20);
    for (int k = 0; k < steps; ++k) {
      append_tokens(c, rng() % 7);  // includes zero-row appends
      ASSERT_LE(c.size(), s + w);
      const auto kept = c.kept_positions();
      EXPECT_TRUE(std::is_sorted(kept.begin(), kept.end()));
      EXPECT_EQ(std::adjacent_find(kept.begin(), kept.end()), kept.end());
      if (!kept.empty()) EXPECT_LT(kept.back(), c.total_seen());
      EXPECT_EQ(std::vector<std::size_t>(kept.begin(), kept.end()), window_oracle(c.total_seen(), s, w));
    }
    expect_rows_match_positions(c);
  }
}

TEST(Cache, TransferThenAppendIsPathIndependent) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t s = rng() % 4, w = 1 + rng() % 6, n0 = 1 + rng() % 20, k = rng() % 15;
    LayerCache moved(1, 2, 3), native(1, 2, 3, CachePolicy::streaming(s, w));
    append_tokens(moved, n0);
    append_tokens(native, n0);
    moved.transfer_to_streaming(s, w);
    for (std::size_t i = 0; i < k; ++i) {
      append_tokens(moved, 1);
      append_tokens(native, 1);
    }
    EXPECT_EQ(std::vector<std::size_t>(moved.kept_positions().begin(), moved.kept_positions().end()),
              std::vector<std::size_t>(native.kept_positions().begin(), native.kept_positions().end()));
    EXPECT_EQ(moved.keys(0), native.keys(0));
  }
}

TEST(Cache, StreamingPositionsHelper) {
  EXPECT_EQ(streaming_positions(20, 4, 8), concat(range(0, 4), range(12, 20)));
  EXPECT_EQ(streaming_positions(3, 4, 8), range(0, 3));
  EXPECT_EQ(streaming_positions(10, 0, 3), range(7, 10));
}

TEST(Cache, ErrorPaths) {
  EXPECT_THROW(CachePolicy::streaming(4, 0), ContractViolation);
  LayerCache c(2, 2, 3);
  std::vector<Matrix> k1(1, Matrix(1, 2)), v1(1, Matrix(1, 3));
  EXPECT_THROW(c.append(k1, v1), ContractViolation);  // head count
  std::vector<Matrix> k(2, Matrix(1, 4)), v(2, Matrix(1, 3));
  EXPECT_THROW(c.append(k, v), ContractViolation);  // width
  const std::vector<Matrix> q(2, Matrix(1, 2));
  const std::size_t pos[] = {0};
  EXPECT_THROW(attend_from_cache(c, q, pos, 1.0), ContractViolation);  // empty cache
}

namespace {

struct LayerFixture {
  ModelConfig c;
  Weights w;
  Matrix xn;
  std::vector<HeadProjections> proj;

  LayerFixture(std::uint64_t seed, std::size_t n) {
    std::mt19937_64 rng(seed);
    c.layers = 1;
    c.heads = 3;
    c.dim = 6;
    c.head_dim = 4;
    w = random_init(c, seed, 0.8);
    xn = ln_rows(oracle::random_matrix(rng, n, c.dim, 2.0), c.ln_mode);
    for (const auto& h : w.layers[0].heads) proj.push_back(project_head(xn, h));
  }

  LayerCache fill(CachePolicy p) const {
    LayerCache cache(c.heads, c.head_dim, c.dim, p);
    std::vector<Matrix> k, v;
    for (const auto& pr : proj) {
      k.push_back(pr.k);
      v.push_back(pr.v);
    }
    cache.append(k, v);
    return cache;
  }

  std::vector<Matrix> queries(std::size_t from) const {
    std::vector<Matrix> q;
    for (const auto& pr : proj) {
      Matrix m(0, c.head_dim);
      for (std::size_t r = from; r < pr.q.rows(); ++r) m.append_row(pr.q.row(r));
      q.push_back(m);
    }
    return q;
  }
};

}  // namespace

TEST(AttendFromCache, FullEqualsCausalMha) {
  const LayerFixture f(32, 17);
  const auto cache = f.fill(CachePolicy::full());
  const auto positions = range(0, 17);
  const Matrix got = attend_from_cache(cache, f.queries(0), positions, f.c.logit_scale());
  const Matrix want = mha_forward(f.xn, f.w.layers[0], MaskSpec::causal(), f.c);
  for (std::size_t i = 0; i < 17; ++i) EXPECT_LT(oracle::max_abs_diff(got.row(i), want.row(i)), 1e-12);
}

TEST(AttendFromCache, StreamingWithoutEvictionEqualsFull) {
  const LayerFixture f(33, 10);
  const auto cache = f.fill(CachePolicy::streaming(2, 8));
  const auto positions = range(0, 10);
  const Matrix got = attend_from_cache(cache, f.queries(0), positions, f.c.logit_scale());
  const Matrix want = mha_forward(f.xn, f.w.layers[0], MaskSpec::causal(), f.c);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_LT(oracle::max_abs_diff(got.row(i), want.row(i)), 1e-12);
}

TEST(AttendFromCache, StreamingMatchesMaskedSoftmaxOracle) {
  const std::size_t n = 64;
  const LayerFixture f(34, n);
  const auto cache = f.fill(CachePolicy::streaming(2, 8));
  const std::size_t pos[] = {n - 1};
  const Matrix got = attend_from_cache(cache, f.queries(n - 1), pos, f.c.logit_scale());
  const auto kept = oracle::streaming(n - 1, 2, 8);
  EXPECT_EQ(kept, concat(range(0, 2), range(56, 64)));
  std::vector<double> want(f.c.dim, 0.0);
  for (const auto& pr : f.proj) {
    oracle::Vec scores(n, 0.0);
    for (std::size_t j : kept) {
      double s = 0;
      for (std::size_t d = 0; d < f.c.head_dim; ++d) s += pr.q(n - 1, d) * pr.k(j, d);
      scores[j] = s * f.c.logit_scale();
    }
    const auto p = oracle::softmax_subset(scores, kept);
    for (std::size_t j : kept)
      for (std::size_t d = 0; d < f.c.dim; ++d) want[d] += p[j] * pr.v(j, d);
  }
  EXPECT_LT(oracle::max_abs_diff(got.row(0), want), 1e-10);
}

TEST(MemoryMeter, CountsAndPeaks) {
  MemoryMeter empty(3);
  const auto z = memory_stats(empty);
  EXPECT_EQ(z.total_rows, 0u);
  EXPECT_EQ(z.peak_rows, 0u);
  EXPECT_EQ(z.layer_rows, std::vector<std::size_t>(3, 0));

  MemoryMeter one(1);
  one.record(0, 100);
  EXPECT_EQ(one.stats().total_rows, 100u);

  // Mixed: a full layer at 40 rows, a streaming layer trimmed from 40 to 12.
  MemoryMeter mixed(2);
  LayerCache full(1, 2, 3), stream(1, 2, 3);
  append_tokens(full, 40);
  append_tokens(stream, 40);
  mixed.record(0, full.size());
  mixed.record(1, stream.size());
  stream.transfer_to_streaming(4, 8);
  mixed.record(1, stream.size());
  const auto r = mixed.stats();
  EXPECT_EQ(r.total_rows, 52u);
  EXPECT_EQ(r.peak_rows, 80u);
  EXPECT_EQ(r.layer_peak_rows, (std::vector<std::size_t>{40, 40}));
  EXPECT_THROW(mixed.record(2, 1), ContractViolation);
}
