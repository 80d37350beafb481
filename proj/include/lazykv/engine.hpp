#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lazykv/errors.hpp"
#include "lazykv/kvcache.hpp"
#include "lazykv/lazydetect.hpp"
#include "lazykv/model.hpp"
#include "lazykv/numerics.hpp"

namespace lazykv {

enum class Provenance { Online, Preselect, Pyramid, Random, Manual };

inline const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::Online: return "online";
    case Provenance::Preselect: return "preselect";
    case Provenance::Pyramid: return "pyramid";
    case Provenance::Random: return "random";
    case Provenance::Manual: return "manual";
  }
  return "?";
}

inline Provenance provenance_from_string(const std::string& s) {
  if (s == "online") return Provenance::Online;
  if (s == "preselect") return Provenance::Preselect;
  if (s == "pyramid") return Provenance::Pyramid;
  if (s == "random") return Provenance::Random;
  if (s == "manual") return Provenance::Manual;
  throw InputError("unknown policy provenance '" + s + "'");
}

// Persisted per-layer attention policy.
struct PolicyFile {
  std::string fingerprint;
  std::vector<std::size_t> lazy_layers;  // ascending
  std::size_t w_sink = 4;
  std::size_t w_recent = 1020;
  Provenance provenance = Provenance::Manual;
  std::optional<std::uint64_t> seed;
  // Pyramid only: one window per layer, overriding w_recent.
  std::vector<std::size_t> w_recent_per_layer;

  std::size_t window_for(std::size_t layer) const {
    return w_recent_per_layer.empty() ? w_recent : w_recent_per_layer.at(layer);
  }

  bool is_lazy(std::size_t layer) const {
    return std::binary_search(lazy_layers.begin(), lazy_layers.end(), layer);
  }

  void validate(std::size_t layers) const {
    for (std::size_t i = 0; i < lazy_layers.size(); ++i) {
      require_input(lazy_layers[i] < layers, "policy: lazy layer index " + std::to_string(lazy_layers[i]) +
                                                 " out of range for " + std::to_string(layers) + " layers");
      require_input(i == 0 || lazy_layers[i - 1] < lazy_layers[i], "policy: lazy layer indices must be unique");
    }
    require_input(w_recent >= 1, "policy: w_recent must be >= 1");
    require_input(w_recent_per_layer.empty() || w_recent_per_layer.size() == layers,
                  "policy: w_recent_per_layer must list every layer");
    for (auto w : w_recent_per_layer) require_input(w >= 1, "policy: per-layer windows must be >= 1");
  }

  friend bool operator==(const PolicyFile&, const PolicyFile&) = default;
};

inline nlohmann::json to_json(const PolicyFile& p) {
  nlohmann::json j = {
      {"fingerprint", p.fingerprint},  {"lazy_layers", p.lazy_layers},
      {"w_sink", p.w_sink},            {"w_recent", p.w_recent},
      {"provenance", to_string(p.provenance)},
  };
  if (p.seed) j["seed"] = *p.seed;
  if (!p.w_recent_per_layer.empty()) j["w_recent_per_layer"] = p.w_recent_per_layer;
  return j;
}

inline PolicyFile policy_from_json(const nlohmann::json& j) {
  PolicyFile p;
  try {
    p.fingerprint = j.at("fingerprint").get<std::string>();
    p.lazy_layers = j.at("lazy_layers").get<std::vector<std::size_t>>();
    p.w_sink = j.at("w_sink").get<std::size_t>();
    p.w_recent = j.at("w_recent").get<std::size_t>();
    p.provenance = provenance_from_string(j.at("provenance").get<std::string>());
    if (j.contains("seed")) p.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("w_recent_per_layer")) p.w_recent_per_layer = j.at("w_recent_per_layer").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("policy file: ") + e.what());
  }
  std::sort(p.lazy_layers.begin(), p.lazy_layers.end());
  return p;
}

struct EngineParams {
  DetectParams detect;
  // nullopt: identify lazy layers online during prefill. Otherwise apply
  // this static policy.
  std::optional<PolicyFile> policy;
};

struct PrefillResult {
  std::vector<double> logits;  // last prompt position
  LazyRatioReport report;      // empty in static mode
};

// Greedy choice; ties go to the smallest token id.
inline std::int64_t argmax_token(std::span<const double> logits) {
  require(!logits.empty(), "argmax_token: empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<std::int64_t>(best);
}

// One generation request: per-layer caches plus identification state. The
// weights must outlive the session.
class Session {
 public:
  Session(const Weights& weights, EngineParams params)
      : w_(&weights), params_(std::move(params)), meter_(weights.config.layers) {
    const auto& c = weights.config;
    if (params_.policy) {
      params_.policy->validate(c.layers);
    } else {
      require_input(params_.detect.p_layers <= c.layers, "engine: P must not exceed the layer count");
      require_input(params_.detect.w_recent >= 1, "engine: w_recent must be >= 1");
      require_input(params_.detect.w_last >= 1, "engine: w_last must be >= 1");
    }
    caches_.reserve(c.layers);
    for (std::size_t i = 0; i < c.layers; ++i) caches_.emplace_back(c.heads, c.head_dim, c.dim);
  }

  bool online() const { return !params_.policy.has_value(); }

  // Prefill over the whole prompt. In online mode every layer's lazy ratio
  // goes through a size-P max queue as soon as that layer is done; a popped
  // layer's cache is cut to sink + recent on the spot. Hidden states of
  // finished layers are not recomputed, so the returned logits are those of
  // the unmodified model.
  PrefillResult prefill(std::span<const std::int64_t> tokens) {
    require_input(!tokens.empty(), "prefill: empty token sequence");
    require(!prefilled_, "prefill: session already prefilled");
    const auto& c = w_->config;
    const std::size_t n = tokens.size();
    const double scale = c.logit_scale();
    const auto& dp = params_.detect;

    std::optional<IdentifierState> queue;
    if (online()) queue.emplace(dp.p_layers, c.layers);

    PrefillResult res;
    res.report.ratios.assign(online() ? c.layers : 0, 1.0);
    res.report.log_ratios.resize(online() ? c.layers : 0);

    Matrix x = embed(tokens, *w_);
    for (std::size_t i = 0; i < c.layers; ++i) {
      const auto& layer = w_->layers[i];
      MhaPass pass = mha_pass(ln_rows(x, c.ln_mode), layer, MaskSpec::causal(), c);

      std::vector<Matrix> keys, values;
      for (auto& hp : pass.heads) {
        keys.push_back(hp.k);
        values.push_back(hp.v);
      }
      caches_[i].append(keys, values);
      meter_.record(i, caches_[i].size());
      note_full_caches();

      if (queue) {
        const auto t0 = std::chrono::steady_clock::now();
        const std::size_t rows = dp.last_rows(n);
        std::vector<Matrix> q_last;
        std::vector<std::vector<double>> lse_last;
        for (std::size_t h = 0; h < c.heads; ++h) {
          Matrix q(rows, c.head_dim);
          for (std::size_t r = 0; r < rows; ++r) {
            auto src = pass.heads[h].q.row(n - rows + r);
            std::copy(src.begin(), src.end(), q.row(r).begin());
          }
          q_last.push_back(std::move(q));
          lse_last.emplace_back(pass.lse[h].end() - static_cast<std::ptrdiff_t>(rows), pass.lse[h].end());
        }
        LayerRatio lr = lazy_ratio_lse(q_last, keys, lse_last, dp, scale);
        res.report.ratios[i] = lr.ratio;
        res.report.log_ratios[i] = std::move(lr.log_ratios);
        if (auto popped = queue->push(i, lr.ratio)) {
          caches_[*popped].transfer_to_streaming(dp.w_sink, dp.w_recent);
          meter_.record(*popped, caches_[*popped].size());
        }
        detection_seconds_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      } else if (params_.policy->is_lazy(i)) {
        caches_[i].transfer_to_streaming(params_.policy->w_sink, params_.policy->window_for(i));
        meter_.record(i, caches_[i].size());
      }
      note_full_caches();

      Matrix y = add(x, pass.out);
      x = add(y, ffn_forward(ln_rows(y, c.ln_mode), layer, c.activation));
    }

    if (queue) {
      auto sel = queue->finalize();
      lazy_layers_ = std::move(sel.lazy);
    } else {
      lazy_layers_ = params_.policy->lazy_layers;
    }
    tokens_.assign(tokens.begin(), tokens.end());
    prefilled_ = true;
    res.logits.assign(c.vocab, 0.0);
    vecmat(x.row(n - 1), w_->w_unemb, res.logits);
    return res;
  }

  // Single-token step: every layer appends the new K/V under its policy and
  // attends over what it has kept.
  std::vector<double> decode_step(std::int64_t token) {
    require(prefilled_, "decode_step: call prefill first");
    const auto& c = w_->config;
    const std::int64_t tok[] = {token};
    Matrix xm = embed(tok, *w_);
    std::vector<double> x(xm.row(0).begin(), xm.row(0).end());
    const std::size_t pos = tokens_.size();
    const std::size_t positions[] = {pos};
    const double scale = c.logit_scale();

    std::vector<double> xn(c.dim), y(c.dim), yn(c.dim), hidden(c.dim), ff(c.dim);
    std::vector<Matrix> queries(c.heads, Matrix(1, c.head_dim));
    std::vector<std::vector<double>> key_rows(c.heads, std::vector<double>(c.head_dim));
    std::vector<std::vector<double>> value_rows(c.heads, std::vector<double>(c.dim));
    std::vector<std::optional<double>> step_ratios(c.layers);

    for (std::size_t i = 0; i < c.layers; ++i) {
      const auto& layer = w_->layers[i];
      ln(x, c.ln_mode, xn);
      for (std::size_t h = 0; h < c.heads; ++h) {
        vecmat(xn, layer.heads[h].w_q, queries[h].row(0));
        vecmat(xn, layer.heads[h].w_k, key_rows[h]);
        vecmat(xn, layer.heads[h].w_v, value_rows[h]);
      }
      caches_[i].append_token(key_rows, value_rows);
      meter_.record(i, caches_[i].size());
      CacheAttention att = attend_from_cache_detailed(caches_[i], queries, positions, scale);
      if (track_decode_ratios_ && !caches_[i].policy().is_streaming()) {
        step_ratios[i] = query_lazy_ratio(caches_[i], queries, att.lse, pos, scale);
      }
      for (std::size_t k = 0; k < c.dim; ++k) y[k] = x[k] + att.out(0, k);
      ln(y, c.ln_mode, yn);
      vecmat(yn, layer.w_a1, hidden);
      for (double& v : hidden) v = activate(c.activation, v);
      vecmat(hidden, layer.w_a2, ff);
      for (std::size_t k = 0; k < c.dim; ++k) x[k] = y[k] + ff[k];
    }
    if (track_decode_ratios_) decode_ratios_.push_back(std::move(step_ratios));
    tokens_.push_back(token);
    std::vector<double> logits(c.vocab);
    vecmat(x, w_->w_unemb, logits);
    return logits;
  }

  // Moves one layer to streaming after prefill. Leaves the same cache a
  // static policy naming this layer would have produced.
  void transfer_layer(std::size_t layer, std::size_t w_sink, std::size_t w_recent) {
    require(prefilled_, "transfer_layer: call prefill first");
    require(layer < caches_.size(), "transfer_layer: layer out of range");
    if (caches_[layer].policy().is_streaming()) return;
    caches_[layer].transfer_to_streaming(w_sink, w_recent);
    meter_.record(layer, caches_[layer].size());
    lazy_layers_.insert(std::upper_bound(lazy_layers_.begin(), lazy_layers_.end(), layer), layer);
  }

  // Records, at every decode step, the single-query lazy ratio of each
  // full-attention layer (the newest token as the only scored query).
  void track_decode_ratios(bool on) { track_decode_ratios_ = on; }
  const std::vector<std::vector<std::optional<double>>>& decode_ratios() const { return decode_ratios_; }

  const std::vector<LayerCache>& caches() const { return caches_; }
  const MemoryMeter& meter() const { return meter_; }
  std::span<const std::size_t> lazy_layers() const { return lazy_layers_; }
  std::span<const std::int64_t> tokens() const { return tokens_; }
  std::size_t peak_full_caches() const { return peak_full_caches_; }
  double detection_seconds() const { return detection_seconds_; }
  const EngineParams& params() const { return params_; }
  const Weights& weights() const { return *w_; }

  // Policy that replays this session's online selection statically.
  PolicyFile emitted_policy(std::string fingerprint) const {
    require(prefilled_, "emitted_policy: call prefill first");
    PolicyFile p;
    if (params_.policy) {
      p = *params_.policy;
    } else {
      p.lazy_layers = lazy_layers_;
      p.w_sink = params_.detect.w_sink;
      p.w_recent = params_.detect.w_recent;
      p.provenance = Provenance::Online;
    }
    p.fingerprint = std::move(fingerprint);
    return p;
  }

 private:
  // Full-policy caches alive during prefill are bounded by P + 1 (the queue
  // plus the layer in flight); checked on every change.
  void note_full_caches() {
    std::size_t full = 0;
    for (const auto& cache : caches_)
      if (cache.size() > 0 && !cache.policy().is_streaming()) ++full;
    peak_full_caches_ = std::max(peak_full_caches_, full);
    if (online()) {
      require(full <= params_.detect.p_layers + 1, "engine: more than P + 1 full caches alive during prefill");
    }
  }

  double query_lazy_ratio(const LayerCache& cache, std::span<const Matrix> queries,
                          const std::vector<std::vector<double>>& lse, std::size_t pos, double scale) const {
    const auto kept = kept_for_query(pos, params_.detect.w_sink, params_.detect.w_recent);
    if (kept.size() == pos + 1) return 1.0;
    double mass = 0.0;
    std::vector<double> scores;
    for (std::size_t h = 0; h < queries.size(); ++h) {
      scores.clear();
      // Full cache: row index == absolute position.
      for (std::size_t j : kept) scores.push_back(scale * dot(queries[h].row(0), cache.keys(h).row(j)));
      mass += std::exp(std::min(0.0, logsumexp(scores) - lse[h][0]));
    }
    return mass / static_cast<double>(queries.size());
  }

  const Weights* w_;
  EngineParams params_;
  std::vector<LayerCache> caches_;
  MemoryMeter meter_;
  std::vector<std::size_t> lazy_layers_;
  std::vector<std::int64_t> tokens_;
  bool prefilled_ = false;
  std::size_t peak_full_caches_ = 0;
  double detection_seconds_ = 0.0;
  bool track_decode_ratios_ = false;
  std::vector<std::vector<std::optional<double>>> decode_ratios_;
};

inline PrefillResult prefill_transfer(Session& session, std::span<const std::int64_t> tokens) {
  require(session.online(), "prefill_transfer: session is in static-policy mode");
  return session.prefill(tokens);
}

inline std::vector<double> decode_step(Session& session, std::int64_t token) { return session.decode_step(token); }

struct Generation {
  std::vector<std::int64_t> tokens;              // continuation only
  std::vector<std::vector<double>> step_logits;  // logits that chose each token
  std::vector<double> decode_seconds;            // one entry per decode step
  PrefillResult prefill;
};

// Greedy decoding: the first token comes from the prefill logits, every later
// one from a decode step fed with its predecessor.
inline Generation generate_greedy(Session& session, std::span<const std::int64_t> prompt, std::size_t max_new_tokens) {
  Generation g;
  g.prefill = session.prefill(prompt);
  if (max_new_tokens == 0) return g;
  std::vector<double> logits = g.prefill.logits;
  for (std::size_t step = 0; step < max_new_tokens; ++step) {
    const std::int64_t next = argmax_token(logits);
    g.tokens.push_back(next);
    g.step_logits.push_back(logits);
    if (step + 1 == max_new_tokens) break;
    const auto t0 = std::chrono::steady_clock::now();
    logits = session.decode_step(next);
    g.decode_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return g;
}

// Per-layer windows for the pyramid ablation: linear in depth from 2*mean
// down to mean/2, rescaled so the windows sum to exactly layers*mean. Rounding
// is floor (min 1) plus largest-remainder correction; equal remainders favor
// the shallower layer.
inline std::vector<std::size_t> pyramid_windows(std::size_t layers, std::size_t mean_window) {
  require_input(layers >= 1 && mean_window >= 1, "pyramid: need >= 1 layer and mean window >= 1");
  const double mean = static_cast<double>(mean_window);
  std::vector<double> raw(layers);
  for (std::size_t i = 0; i < layers; ++i) {
    const double t = layers == 1 ? 0.5 : static_cast<double>(i) / static_cast<double>(layers - 1);
    raw[i] = 2.0 * mean + (0.5 * mean - 2.0 * mean) * t;
  }
  const double budget = static_cast<double>(layers * mean_window);
  const double raw_sum = std::accumulate(raw.begin(), raw.end(), 0.0);
  std::vector<std::size_t> out(layers);
  std::vector<double> rem(layers);
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < layers; ++i) {
    const double v = raw[i] * budget / raw_sum;
    const double f = std::floor(v);
    out[i] = std::max<std::size_t>(1, static_cast<std::size_t>(f));
    rem[i] = v - f;
    assigned += static_cast<std::int64_t>(out[i]);
  }
  std::vector<std::size_t> order(layers);
  std::iota(order.begin(), order.end(), 0);
  std::int64_t deficit = static_cast<std::int64_t>(layers * mean_window) - assigned;
  if (deficit > 0) {
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return rem[a] > rem[b]; });
    for (std::size_t k = 0; deficit > 0; k = (k + 1) % layers, --deficit) ++out[order[k]];
  } else {
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return rem[a] < rem[b]; });
    for (std::size_t k = 0; deficit < 0; k = (k + 1) % layers) {
      if (out[order[k]] > 1) {
        --out[order[k]];
        ++deficit;
      }
    }
  }
  // Remainder rounding and the floor of 1 can swap neighbours; restore the shape.
  std::sort(out.rbegin(), out.rend());
  return out;
}

struct PolicyStrategy {
  enum class Kind { Pyramid, Random, Manual };
  Kind kind = Kind::Manual;
  std::size_t mean_window = 1020;             // Pyramid
  std::size_t range_begin = 0, range_end = 0;  // Random: [begin, end); end == 0 means all layers
  std::vector<std::size_t> manual;             // Manual
};

// Random picks L - P layers from the range with a partial Fisher-Yates
// shuffle driven by mt19937_64 (reproducible for a fixed seed).
inline PolicyFile make_policy(const PolicyStrategy& strategy, std::size_t layers, const DetectParams& params,
                              std::uint64_t seed) {
  PolicyFile p;
  p.w_sink = params.w_sink;
  p.w_recent = params.w_recent;
  switch (strategy.kind) {
    case PolicyStrategy::Kind::Pyramid: {
      p.provenance = Provenance::Pyramid;
      p.lazy_layers.resize(layers);
      std::iota(p.lazy_layers.begin(), p.lazy_layers.end(), 0);
      p.w_recent_per_layer = pyramid_windows(layers, strategy.mean_window);
      p.w_recent = strategy.mean_window;
      break;
    }
    case PolicyStrategy::Kind::Random: {
      p.provenance = Provenance::Random;
      p.seed = seed;
      require_input(params.p_layers <= layers, "make-policy: P must not exceed the layer count");
      const std::size_t end = strategy.range_end == 0 ? layers : strategy.range_end;
      require_input(strategy.range_begin < end && end <= layers, "make-policy: bad layer range");
      const std::size_t want = layers - params.p_layers;
      std::vector<std::size_t> pool(end - strategy.range_begin);
      std::iota(pool.begin(), pool.end(), strategy.range_begin);
      require_input(pool.size() >= want, "make-policy: range holds " + std::to_string(pool.size()) +
                                             " layers but " + std::to_string(want) + " lazy layers are needed");
      std::mt19937_64 rng(seed);
      for (std::size_t k = 0; k < want; ++k) {
        const std::size_t j = k + static_cast<std::size_t>(rng() % (pool.size() - k));
        std::swap(pool[k], pool[j]);
      }
      p.lazy_layers.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(want));
      break;
    }
    case PolicyStrategy::Kind::Manual: {
      p.provenance = Provenance::Manual;
      p.lazy_layers = strategy.manual;
      break;
    }
  }
  std::sort(p.lazy_layers.begin(), p.lazy_layers.end());
  p.validate(layers);
  return p;
}

struct OverheadSample {
  std::size_t length = 0;
  double baseline_ms = 0.0;        // median prefill, detection off
  double detect_ms = 0.0;          // median prefill, online detection on
  double ratio = 1.0;              // detect_ms / baseline_ms
  double detection_share = 0.0;    // median in-prefill detection time / baseline_ms
};

inline double median(std::vector<double> v) {
  require(!v.empty(), "median: empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// Prefill timing with and without online identification. Runs alternate
// between the two modes after `warmup` discarded pairs; medians are reported.
// `disable_detection` turns detection off on both sides (timer-noise control).
inline OverheadSample identification_overhead(const Weights& w, std::span<const std::int64_t> tokens,
                                              const DetectParams& params, std::size_t repeats,
                                              std::size_t warmup = 2, bool disable_detection = false) {
  require_input(repeats >= 1, "identification_overhead: repeats must be >= 1");
  EngineParams off;
  off.detect = params;
  off.policy = PolicyFile{};
  EngineParams on;
  on.detect = params;
  if (disable_detection) on.policy = PolicyFile{};
  std::vector<double> base, det, share, pair_ratio;
  for (std::size_t r = 0; r < warmup + repeats; ++r) {
    auto time_one = [&](const EngineParams& ep, double* detect_s) {
      Session s(w, ep);
      const auto t0 = std::chrono::steady_clock::now();
      s.prefill(tokens);
      const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (detect_s) *detect_s = s.detection_seconds();
      return sec;
    };
    double d_s = 0.0;
    double b, t;
    if (r % 2 == 0) {
      b = time_one(off, nullptr);
      t = time_one(on, &d_s);
    } else {
      t = time_one(on, &d_s);
      b = time_one(off, nullptr);
    }
    if (r < warmup) continue;
    base.push_back(b * 1e3);
    det.push_back(t * 1e3);
    share.push_back(d_s * 1e3);
    pair_ratio.push_back(t / b);
  }
  OverheadSample s;
  s.length = tokens.size();
  s.baseline_ms = median(base);
  s.detect_ms = median(det);
  // Ratio of back-to-back pairs: slow drift in machine load cancels.
  s.ratio = median(pair_ratio);
  s.detection_share = median(share) / s.baseline_ms;
  return s;
}

}  // namespace lazykv
