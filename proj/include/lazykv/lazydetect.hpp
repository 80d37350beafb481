#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <queue>
#include <span>
#include <utility>
#include <vector>

#include "lazykv/errors.hpp"
#include "lazykv/kvcache.hpp"
#include "lazykv/numerics.hpp"

namespace lazykv {

struct DetectParams {
  std::size_t w_last = 32;
  std::size_t w_sink = 4;
  std::size_t w_recent = 1020;
  std::size_t p_layers = 0;  // layers that keep full attention

  // Query rows actually scored for an N-token prompt.
  std::size_t last_rows(std::size_t n) const { return std::min(w_last, n); }
};

// Positions a streaming layer would keep for the query at position q: the
// sinks plus the window of w_recent positions ending at q.
inline std::vector<std::size_t> kept_for_query(std::size_t q, std::size_t w_sink, std::size_t w_recent) {
  return streaming_positions(q + 1, w_sink, w_recent);
}

struct LayerRatio {
  double ratio = 1.0;
  std::vector<std::vector<double>> log_ratios;  // [head][scored query]
};

struct LazyRatioReport {
  std::vector<double> ratios;                                // per layer
  std::vector<std::vector<std::vector<double>>> log_ratios;  // [layer][head][query]
};

// Reference form: head-averaged causal attention mass that each of the last
// w_last queries puts on its kept set, averaged over those queries.
inline double lazy_ratio_bruteforce(std::span<const Matrix> head_weights, const DetectParams& params) {
  require(!head_weights.empty(), "lazy_ratio_bruteforce: no heads");
  const std::size_t n = head_weights[0].rows();
  require_input(n >= 1, "lazy_ratio_bruteforce: need at least one token");
  for (const auto& a : head_weights) {
    require(a.rows() == n && a.cols() == n, "lazy_ratio_bruteforce: weights must be N x N for every head");
  }
  const std::size_t rows = params.last_rows(n);
  double total = 0.0;
  for (std::size_t q = n - rows; q < n; ++q) {
    const auto kept = kept_for_query(q, params.w_sink, params.w_recent);
    if (kept.size() == q + 1) {  // whole causal row kept
      total += 1.0;
      continue;
    }
    double mass = 0.0;
    for (const auto& a : head_weights) {
      for (std::size_t j : kept) mass += a(q, j);
    }
    total += mass / static_cast<double>(head_weights.size());
  }
  return total / static_cast<double>(rows);
}

// Log-sum-exp form: for every head and scored query, the log of the kept
// mass is logsumexp(scaled q.k over the kept set) minus the full-row lse that
// the attention pass already produced. Only the kept scores are recomputed.
//
// q_last[h] holds the last rows of head h's queries (positions
// N-rows..N-1), keys[h] all N keys, lse[h][r] the full causal lse of row r.
inline LayerRatio lazy_ratio_lse(std::span<const Matrix> q_last, std::span<const Matrix> keys,
                                 std::span<const std::vector<double>> lse, const DetectParams& params,
                                 double scale) {
  require(!q_last.empty(), "lazy_ratio_lse: no heads");
  require(q_last.size() == keys.size() && keys.size() == lse.size(), "lazy_ratio_lse: head count mismatch");
  const std::size_t n = keys[0].rows();
  const std::size_t rows = q_last[0].rows();
  require(rows >= 1 && rows <= n, "lazy_ratio_lse: need 1..N query rows");
  LayerRatio out;
  out.log_ratios.assign(q_last.size(), std::vector<double>(rows));
  std::vector<double> scores;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t pos = n - rows + r;
    const auto kept = kept_for_query(pos, params.w_sink, params.w_recent);
    double mass = 0.0;
    for (std::size_t h = 0; h < q_last.size(); ++h) {
      require(q_last[h].rows() == rows && keys[h].rows() == n && lse[h].size() == rows,
              "lazy_ratio_lse: inconsistent shapes across heads");
      if (kept.size() == pos + 1) {  // whole causal row kept
        out.log_ratios[h][r] = 0.0;
        mass += 1.0;
        continue;
      }
      scores.clear();
      for (std::size_t j : kept) scores.push_back(scale * dot(q_last[h].row(r), keys[h].row(j)));
      // Clamp: the kept set is a subset, so the true log ratio is <= 0.
      const double log_ratio = std::min(0.0, logsumexp(scores) - lse[h][r]);
      out.log_ratios[h][r] = log_ratio;
      mass += std::exp(log_ratio);
    }
    total += mass / static_cast<double>(q_last.size());
  }
  out.ratio = total / static_cast<double>(rows);
  return out;
}

// Size-P max-priority queue over (lazy ratio, layer). Pushing past capacity
// pops the laziest layer; equal ratios pop the deeper layer first.
class IdentifierState {
 public:
  IdentifierState(std::size_t capacity, std::size_t layer_count)
      : capacity_(capacity), layer_count_(layer_count), pushed_(layer_count, false) {
    require(capacity <= layer_count, "IdentifierState: P must not exceed the layer count");
  }

  std::optional<std::size_t> push(std::size_t layer, double ratio) {
    require(layer < layer_count_, "IdentifierState::push: layer out of range");
    require(!pushed_[layer], "IdentifierState::push: layer pushed twice");
    pushed_[layer] = true;
    ++pushed_count_;
    heap_.emplace(ratio, layer);
    if (heap_.size() <= capacity_) return std::nullopt;
    const std::size_t popped = heap_.top().second;
    heap_.pop();
    lazy_.push_back(popped);
    return popped;
  }

  std::size_t size() const { return heap_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t pushed() const { return pushed_count_; }
  std::span<const std::size_t> lazy_so_far() const { return lazy_; }

  struct Selection {
    std::vector<std::size_t> non_lazy;  // ascending
    std::vector<std::size_t> lazy;      // ascending
  };

  Selection finalize() const {
    require(pushed_count_ == layer_count_, "IdentifierState::finalize: not every layer has been pushed");
    Selection s;
    auto copy = heap_;
    while (!copy.empty()) {
      s.non_lazy.push_back(copy.top().second);
      copy.pop();
    }
    s.lazy.assign(lazy_.begin(), lazy_.end());
    std::sort(s.non_lazy.begin(), s.non_lazy.end());
    std::sort(s.lazy.begin(), s.lazy.end());
    return s;
  }

 private:
  std::size_t capacity_;
  std::size_t layer_count_;
  std::vector<bool> pushed_;
  std::size_t pushed_count_ = 0;
  // std::pair ordering gives (ratio, layer) lexicographic max: ties -> deeper.
  std::priority_queue<std::pair<double, std::size_t>> heap_;
  std::vector<std::size_t> lazy_;
};

}  // namespace lazykv
