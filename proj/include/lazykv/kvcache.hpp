#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "lazykv/errors.hpp"
#include "lazykv/numerics.hpp"

namespace lazykv {

struct CachePolicy {
  enum class Kind { Full, Streaming };

  Kind kind = Kind::Full;
  std::size_t w_sink = 0;
  std::size_t w_recent = 1;

  static CachePolicy full() { return {}; }
  static CachePolicy streaming(std::size_t w_sink, std::size_t w_recent) {
    require(w_recent >= 1, "CachePolicy: w_recent must be >= 1");
    return {Kind::Streaming, w_sink, w_recent};
  }

  bool is_streaming() const { return kind == Kind::Streaming; }
  std::size_t capacity() const { return w_sink + w_recent; }

  // Whether position `pos` survives once `seen` tokens have been appended.
  bool keeps(std::size_t pos, std::size_t seen) const {
    if (kind == Kind::Full) return pos < seen;
    return pos < w_sink || pos + w_recent >= seen;
  }

  friend bool operator==(const CachePolicy&, const CachePolicy&) = default;
};

// Kept positions for a streaming view of `seen` tokens:
// ({0..w_sink-1} U {seen-w_recent..seen-1}) n {0..seen-1}, ascending.
inline std::vector<std::size_t> streaming_positions(std::size_t seen, std::size_t w_sink, std::size_t w_recent) {
  std::vector<std::size_t> out;
  const std::size_t recent_begin = seen > w_recent ? seen - w_recent : 0;
  for (std::size_t p = 0; p < std::min(w_sink, seen); ++p) out.push_back(p);
  for (std::size_t p = std::max(recent_begin, std::min(w_sink, seen)); p < seen; ++p) out.push_back(p);
  return out;
}

// Key/value rows of one layer, per head.
class LayerCache {
 public:
  LayerCache() = default;
  LayerCache(std::size_t heads, std::size_t key_width, std::size_t value_width,
             CachePolicy policy = CachePolicy::full())
      : policy_(policy), key_width_(key_width), value_width_(value_width) {
    keys_.assign(heads, Matrix(0, key_width));
    values_.assign(heads, Matrix(0, value_width));
  }

  const CachePolicy& policy() const { return policy_; }
  std::size_t heads() const { return keys_.size(); }
  std::size_t total_seen() const { return total_seen_; }
  std::size_t size() const { return kept_.size(); }
  std::span<const std::size_t> kept_positions() const { return kept_; }
  const Matrix& keys(std::size_t head) const { return keys_.at(head); }
  const Matrix& values(std::size_t head) const { return values_.at(head); }

  // Appends t new tokens: new_keys[h] is t x key_width, new_values[h] is
  // t x value_width. Streaming caches are trimmed back to their window
  // immediately.
  void append(std::span<const Matrix> new_keys, std::span<const Matrix> new_values) {
    require(new_keys.size() == heads() && new_values.size() == heads(), "LayerCache::append: head count mismatch");
    const std::size_t t = heads() == 0 ? 0 : new_keys[0].rows();
    for (std::size_t h = 0; h < heads(); ++h) {
      require(new_keys[h].rows() == t && new_values[h].rows() == t,
              "LayerCache::append: every head must add the same number of rows");
      require(t == 0 || (new_keys[h].cols() == key_width_ && new_values[h].cols() == value_width_),
              "LayerCache::append: width mismatch");
      for (std::size_t r = 0; r < t; ++r) {
        keys_[h].append_row(new_keys[h].row(r));
        values_[h].append_row(new_values[h].row(r));
      }
    }
    for (std::size_t r = 0; r < t; ++r) kept_.push_back(total_seen_ + r);
    total_seen_ += t;
    evict();
  }

  // Single-token convenience: one key row and one value row per head.
  void append_token(std::span<const std::vector<double>> key_rows, std::span<const std::vector<double>> value_rows) {
    require(key_rows.size() == heads() && value_rows.size() == heads(), "LayerCache::append_token: head count mismatch");
    for (std::size_t h = 0; h < heads(); ++h) {
      require(key_rows[h].size() == key_width_ && value_rows[h].size() == value_width_,
              "LayerCache::append_token: width mismatch");
      keys_[h].append_row(key_rows[h]);
      values_[h].append_row(value_rows[h]);
    }
    kept_.push_back(total_seen_++);
    evict();
  }

  // Switches a full cache to streaming, dropping the middle in one step.
  // Already-streaming caches are left untouched.
  void transfer_to_streaming(std::size_t w_sink, std::size_t w_recent) {
    if (policy_.is_streaming()) return;
    policy_ = CachePolicy::streaming(w_sink, w_recent);
    evict();
  }

 private:
  void evict() {
    // At or under capacity every kept position is still inside the window.
    if (!policy_.is_streaming() || kept_.size() <= policy_.capacity()) return;
    std::vector<std::size_t> rows;
    std::vector<std::size_t> positions;
    for (std::size_t r = 0; r < kept_.size(); ++r) {
      if (policy_.keeps(kept_[r], total_seen_)) {
        rows.push_back(r);
        positions.push_back(kept_[r]);
      }
    }
    if (rows.size() == kept_.size()) return;
    for (auto& k : keys_) k.keep_rows(rows);
    for (auto& v : values_) v.keep_rows(rows);
    kept_ = std::move(positions);
    require(kept_.size() <= policy_.capacity(), "LayerCache: streaming cache exceeded w_sink + w_recent");
  }

  CachePolicy policy_;
  std::size_t key_width_ = 0;
  std::size_t value_width_ = 0;
  std::vector<Matrix> keys_;
  std::vector<Matrix> values_;
  std::vector<std::size_t> kept_;
  std::size_t total_seen_ = 0;
};

struct CacheAttention {
  Matrix out;                            // queries x value_width, summed over heads
  std::vector<std::vector<double>> lse;  // [head][query]
};

// Attention of query rows (absolute positions `positions`) over the cached
// rows. Each query only sees kept positions <= its own position.
inline CacheAttention attend_from_cache_detailed(const LayerCache& cache, std::span<const Matrix> queries,
                                                 std::span<const std::size_t> positions, double scale) {
  require(cache.size() > 0, "attend_from_cache: empty cache");
  require(queries.size() == cache.heads(), "attend_from_cache: head count mismatch");
  const std::size_t n_q = positions.size();
  const std::size_t width = cache.values(0).cols();
  CacheAttention res;
  res.out = Matrix(n_q, width);
  res.lse.assign(cache.heads(), std::vector<double>(n_q));
  const auto kept = cache.kept_positions();
  std::vector<double> head_out(width);
  std::vector<double> scratch;
  for (std::size_t h = 0; h < cache.heads(); ++h) {
    require(queries[h].rows() == n_q, "attend_from_cache: one query row per position expected");
    for (std::size_t i = 0; i < n_q; ++i) {
      // kept is ascending, so the visible rows form a prefix.
      const auto visible = static_cast<std::size_t>(std::upper_bound(kept.begin(), kept.end(), positions[i]) - kept.begin());
      require(visible > 0, "attend_from_cache: query sees no cached position");
      res.lse[h][i] = attend_row(queries[h].row(i), cache.keys(h), cache.values(h),
                                 std::views::iota(std::size_t{0}, visible), scale, head_out, scratch);
      auto dst = res.out.row(i);
      for (std::size_t c = 0; c < width; ++c) dst[c] += head_out[c];
    }
  }
  return res;
}

inline Matrix attend_from_cache(const LayerCache& cache, std::span<const Matrix> queries,
                                std::span<const std::size_t> positions, double scale) {
  return attend_from_cache_detailed(cache, queries, positions, scale).out;
}

struct MemoryReport {
  std::vector<std::size_t> layer_rows;
  std::vector<std::size_t> layer_peak_rows;
  std::size_t total_rows = 0;
  std::size_t peak_rows = 0;
};

// Tracks cached rows per layer and the running peak of their sum.
class MemoryMeter {
 public:
  explicit MemoryMeter(std::size_t layers = 0) : rows_(layers, 0), peaks_(layers, 0) {}

  void record(std::size_t layer, std::size_t rows) {
    require(layer < rows_.size(), "MemoryMeter: layer out of range");
    total_ = total_ - rows_[layer] + rows;
    rows_[layer] = rows;
    peaks_[layer] = std::max(peaks_[layer], rows);
    peak_ = std::max(peak_, total_);
  }

  MemoryReport stats() const { return {rows_, peaks_, total_, peak_}; }

 private:
  std::vector<std::size_t> rows_;
  std::vector<std::size_t> peaks_;
  std::size_t total_ = 0;
  std::size_t peak_ = 0;
};

inline MemoryReport memory_stats(const MemoryMeter& meter) { return meter.stats(); }

}  // namespace lazykv
