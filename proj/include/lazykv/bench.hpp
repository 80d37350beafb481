#pragma once

// Desk-scale timing helpers shared by the CLI bench command and the
// acceptance suite.

#include <chrono>
#include <cstdint>
#include <random>
#include <vector>

#include "lazykv/engine.hpp"

namespace lazykv {

inline std::vector<std::int64_t> random_prompt(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::int64_t> t(n);
  for (auto& v : t) v = static_cast<std::int64_t>(rng() % vocab);
  return t;
}

struct DecodeTiming {
  std::vector<double> step_ms;  // every timed step, all repeats
  double median_step_ms = 0.0;
  double tokens_per_sec = 0.0;
  std::size_t rows_after_prefill = 0;
  std::size_t peak_rows = 0;
};

// Times greedy decode steps on copies of an already prefilled session. The
// first `warmup` steps of every repeat are not timed.
inline DecodeTiming time_decode(const Session& prefilled, std::int64_t first_token, std::size_t steps,
                                std::size_t repeats, std::size_t warmup = 2) {
  DecodeTiming t;
  t.rows_after_prefill = prefilled.meter().stats().total_rows;
  for (std::size_t r = 0; r < repeats; ++r) {
    Session s = prefilled;
    std::int64_t tok = first_token;
    for (std::size_t k = 0; k < warmup + steps; ++k) {
      const auto t0 = std::chrono::steady_clock::now();
      auto logits = s.decode_step(tok);
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      if (k >= warmup) t.step_ms.push_back(ms);
      tok = argmax_token(logits);
    }
    t.peak_rows = std::max(t.peak_rows, s.meter().stats().peak_rows);
  }
  t.median_step_ms = median(t.step_ms);
  t.tokens_per_sec = 1e3 / t.median_step_ms;
  return t;
}

// Cached rows right after prefill for P full layers and L - P streaming ones.
inline std::size_t analytic_rows(std::size_t layers, std::size_t p_layers, std::size_t n, std::size_t w_sink,
                                 std::size_t w_recent) {
  return p_layers * n + (layers - p_layers) * std::min(n, w_sink + w_recent);
}

// Least-squares slope of y on x with its t statistic.
struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double t_stat = 0.0;
  double mean_y = 0.0;
};

inline SlopeFit fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 3, "fit_slope: need >= 3 paired points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  SlopeFit f;
  f.mean_y = my;
  f.slope = sxx > 0 ? sxy / sxx : 0.0;
  f.intercept = my - f.slope * mx;
  double sse = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - (f.intercept + f.slope * x[i]);
    sse += e * e;
  }
  const double se = std::sqrt(sse / (n - 2.0) / sxx);
  f.t_stat = se > 0 ? f.slope / se : (f.slope == 0 ? 0.0 : INFINITY);
  return f;
}

}  // namespace lazykv
