#pragma once

// Numerical checks of the hidden-state and logit error bounds for replacing
// full attention with a masked (sink + window) attention in a subset of
// layers, plus randomized checks of the supporting lemmas.
//
// Everything here runs two complete forward passes (original and masked)
// rather than the cache engine, and requires the clip-norm / unscaled-logit
// model form the bounds are stated for.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lazykv/errors.hpp"
#include "lazykv/kvcache.hpp"
#include "lazykv/model.hpp"
#include "lazykv/numerics.hpp"
#include "lazykv/parallel.hpp"

namespace lazykv::theory {

struct TheoremConstants {
  double B = 0.0;      // max parameter Frobenius norm
  double H = 1.0;      // heads
  double L = 1.0;      // layers
  double L_lip = 1.0;  // activation Lipschitz constant

  static TheoremConstants from(const Weights& w) {
    return {param_norm_bound(w), static_cast<double>(w.config.heads), static_cast<double>(w.config.layers),
            lipschitz_constant(w.config.activation)};
  }

  // Per-layer amplification coefficient of the recursion.
  double c_step() const { return H * B + L_lip * B * B + 4.0 * H * B * B * B; }
  double c_amp() const { return 1.0 + H * B * (1.0 + 4.0 * B * B); }
  // Coefficient of the discarded mass newly introduced at a masked layer.
  double c_new() const { return 2.0 * H * (B + L_lip * B * B * B); }
  double c_logit_const() const { return 2.0 * L * B * B * (H + L_lip * B + 4.0 * H * B * B); }
  double c_logit_mass() const { return 2.0 * H * B * B * (1.0 + L_lip * B * B); }
};

// Per-row discarded index sets M_i (subsets of {0..i}).
using DiscardSets = std::vector<std::vector<std::size_t>>;

// Discarded sets of a sink + window view over n rows.
inline DiscardSets streaming_discards(std::size_t n, std::size_t w_sink, std::size_t w_recent) {
  DiscardSets out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto kept = streaming_positions(i + 1, w_sink, w_recent);
    std::size_t k = 0;
    for (std::size_t j = 0; j <= i; ++j) {
      if (k < kept.size() && kept[k] == j) {
        ++k;
      } else {
        out[i].push_back(j);
      }
    }
  }
  return out;
}

// Allowed sets {0..i} \ M_i as a lazy-set mask.
inline MaskSpec mask_from_discards(const DiscardSets& discards) {
  std::vector<std::vector<std::size_t>> allowed(discards.size());
  for (std::size_t i = 0; i < discards.size(); ++i) {
    std::size_t k = 0;
    for (std::size_t j = 0; j <= i; ++j) {
      if (k < discards[i].size() && discards[i][k] == j) {
        ++k;
      } else {
        allowed[i].push_back(j);
      }
    }
  }
  return MaskSpec::lazy_set(std::move(allowed));
}

// s_l: largest (over query rows) head-averaged causal attention mass that
// falls on the discarded positions, evaluated on the hidden state entering
// the layer.
inline double discarded_mass(const LayerWeights& layer, const Matrix& x_prev, const DiscardSets& discards,
                             const ModelConfig& config) {
  require(config.theory_exact(), "discarded_mass: needs clip-norm LN and unscaled logits");
  require(discards.size() == x_prev.rows(), "discarded_mass: one discard set per row expected");
  const Matrix xn = ln_rows(x_prev, config.ln_mode);
  std::vector<Matrix> weights;
  for (const auto& head : layer.heads) weights.push_back(attention_weights(xn, head, MaskSpec::causal(), config));
  double best = 0.0;
  for (std::size_t i = 0; i < x_prev.rows(); ++i) {
    double mass = 0.0;
    for (const auto& a : weights)
      for (std::size_t j : discards[i]) {
        require(j <= i, "discarded_mass: discarded index beyond the query row");
        mass += a(i, j);
      }
    best = std::max(best, mass / static_cast<double>(weights.size()));
  }
  return best;
}

struct ErrorTrace {
  std::vector<double> e_x;        // e_x[i] = ||X^(i) - X~^(i)||_{2,inf}, i = 0..L
  std::vector<double> s;          // s[i-1] for layer i; 0 for unmasked layers
  std::vector<double> s_modified; // same mass measured on the masked network's input
  double logit_error = 0.0;
  double unemb_norm = 0.0;        // ||W_unemb||_F
};

// Runs the original network (causal everywhere) and the modified one (masked
// at the layers in `lazy`, 0-based) from the same input X^(0).
inline ErrorTrace run_pair(const Weights& w, const Matrix& x0, const std::set<std::size_t>& lazy,
                           const DiscardSets& discards) {
  require(w.config.theory_exact(), "run_pair: needs clip-norm LN and unscaled logits");
  const std::size_t layers = w.config.layers;
  for (std::size_t l : lazy) require(l < layers, "run_pair: lazy layer out of range");
  require(lazy.empty() || discards.size() == x0.rows(), "run_pair: one discard set per row expected");

  std::vector<std::optional<MaskSpec>> masks(layers);
  if (!lazy.empty()) {
    const MaskSpec m = mask_from_discards(discards);
    for (std::size_t l : lazy) masks[l] = m;
  }
  const HiddenTrace orig = forward_masked(x0, w, {});
  const HiddenTrace mod = forward_masked(x0, w, masks);

  ErrorTrace t;
  for (std::size_t i = 0; i <= layers; ++i) t.e_x.push_back(row_2inf_norm(subtract(orig.x[i], mod.x[i])));
  t.s.assign(layers, 0.0);
  t.s_modified.assign(layers, 0.0);
  for (std::size_t l : lazy) {
    t.s[l] = discarded_mass(w.layers[l], orig.x[l], discards, w.config);
    t.s_modified[l] = discarded_mass(w.layers[l], mod.x[l], discards, w.config);
  }
  t.logit_error = row_2inf_norm(subtract(orig.logits, mod.logits));
  t.unemb_norm = frobenius_norm(w.w_unemb);
  return t;
}

struct BoundReport {
  std::vector<double> rhs;      // per layer 1..L
  std::vector<double> margins;  // rhs - e_x[i]
  double min_margin = std::numeric_limits<double>::infinity();
  bool pass = true;
};

inline constexpr double kBoundSlack = 1e-9;

// e_x[i] <= e_x[i-1] + c_step * min{2, c_amp * e_x[i-1]} + c_new * [i in I] * s_i
inline BoundReport check_recursive_bound(const ErrorTrace& t, const TheoremConstants& k,
                                         const std::set<std::size_t>& lazy) {
  BoundReport r;
  for (std::size_t i = 1; i < t.e_x.size(); ++i) {
    const double prev = t.e_x[i - 1];
    const double masked = lazy.count(i - 1) ? t.s[i - 1] : 0.0;
    const double rhs = prev + k.c_step() * std::min(2.0, k.c_amp() * prev) + k.c_new() * masked;
    r.rhs.push_back(rhs);
    r.margins.push_back(rhs - t.e_x[i]);
    r.min_margin = std::min(r.min_margin, r.margins.back());
  }
  r.pass = r.margins.empty() || r.min_margin >= -kBoundSlack;
  return r;
}

struct LogitBound {
  double rhs = 0.0;
  double margin = 0.0;
  bool pass = true;
};

inline LogitBound check_logit_bound(const ErrorTrace& t, const TheoremConstants& k,
                                    const std::set<std::size_t>& lazy) {
  double mass = 0.0;
  for (std::size_t l : lazy) mass += t.s.at(l);
  LogitBound b;
  b.rhs = k.c_logit_const() + k.c_logit_mass() * mass;
  b.margin = b.rhs - t.logit_error;
  b.pass = b.margin >= -kBoundSlack;
  return b;
}

// ---------------------------------------------------------------------------
// Lemma oracles

struct LemmaResult {
  std::string name;
  std::size_t trials = 0;
  std::size_t violations = 0;
  double worst_excess = -std::numeric_limits<double>::infinity();  // max(LHS - RHS)

  void record(double lhs, double rhs) {
    ++trials;
    worst_excess = std::max(worst_excess, lhs - rhs);
    if (lhs > rhs + kBoundSlack) ++violations;
  }
};

namespace detail {

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1p-53);
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

inline Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale) {
  Matrix m(r, c);
  for (double& v : m.data()) v = uniform(rng, -scale, scale);
  return m;
}

inline std::vector<double> softmax(std::span<const double> x) {
  std::vector<double> out(x.begin(), x.end());
  const double lse = logsumexp(x);
  for (double& v : out) v = std::exp(v - lse);
  return out;
}

inline double lp_norm(std::span<const double> v, double p) {
  if (std::isinf(p)) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
  }
  double s = 0.0;
  for (double x : v) s += std::pow(std::abs(x), p);
  return std::pow(s, 1.0 / p);
}

// ||A||_{p,q}: row-wise l_p, then l_q over the row norms.
inline double lpq_norm(const Matrix& a, double p, double q) {
  std::vector<double> rows;
  for (std::size_t i = 0; i < a.rows(); ++i) rows.push_back(lp_norm(a.row(i), p));
  return lp_norm(rows, q);
}

// Scales rows down so that every row norm is at most `bound`.
inline void clip_rows(Matrix& x, double bound) {
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    const double n = l2_norm(r);
    if (n > bound)
      for (double& v : r) v *= bound / n;
  }
}

}  // namespace detail

// softmax is 2-Lipschitz from l_inf to l_1.
inline LemmaResult lemma_softmax_lipschitz(std::size_t trials, std::uint64_t seed) {
  LemmaResult r{"softmax_l1_linf"};
  std::mt19937_64 rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t d = detail::pick(rng, 1, 8);
    const double spread = detail::uniform(rng, 0.01, 5.0);
    std::vector<double> x(d), y(d), diff(d);
    for (std::size_t i = 0; i < d; ++i) {
      x[i] = detail::uniform(rng, -spread, spread);
      // a tenth of the trials use x == y
      y[i] = t % 10 == 0 ? x[i] : detail::uniform(rng, -spread, spread);
    }
    const auto sx = detail::softmax(x), sy = detail::softmax(y);
    for (std::size_t i = 0; i < d; ++i) diff[i] = sx[i] - sy[i];
    std::vector<double> xy(d);
    for (std::size_t i = 0; i < d; ++i) xy[i] = x[i] - y[i];
    r.record(detail::lp_norm(diff, 1.0), 2.0 * detail::lp_norm(xy, INFINITY));
  }
  return r;
}

// ||Ax||_p <= ||A^T||_{p,u} ||x||_v and ||Ax||_p <= ||A||_{u,p} ||x||_v for
// conjugate u, v.
inline LemmaResult lemma_matvec(std::size_t trials, std::uint64_t seed) {
  LemmaResult r{"matvec_holder"};
  std::mt19937_64 rng(seed);
  const double ps[] = {1.0, 2.0, INFINITY};
  const std::pair<double, double> conj[] = {{1.0, INFINITY}, {2.0, 2.0}, {INFINITY, 1.0}, {3.0, 1.5}};
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t rows = detail::pick(rng, 1, 8), cols = detail::pick(rng, 1, 8);
    const Matrix a = detail::random_matrix(rng, rows, cols, detail::uniform(rng, 0.1, 3.0));
    const Matrix x = detail::random_matrix(rng, cols, 1, detail::uniform(rng, 0.1, 3.0));
    const double p = ps[rng() % 3];
    const auto [u, v] = conj[rng() % 4];
    const Matrix ax = matmul(a, x);
    const double lhs = detail::lp_norm(ax.data(), p);
    const double xv = detail::lp_norm(x.data(), v);
    // Both forms must hold; the trial is checked against the tighter one.
    const double rhs1 = detail::lpq_norm(transpose(a), p, u) * xv;
    const double rhs2 = detail::lpq_norm(a, u, p) * xv;
    r.record(lhs, std::min(rhs1, rhs2));
  }
  return r;
}

// Causal multi-head attention is Lipschitz in X (row norms <= B_X):
// ||mha(X) - mha(X~)||_{2,inf} <= H B_V (1 + 4 B_X^2 B_Q B_K) ||X - X~||_{2,inf}.
inline LemmaResult lemma_mha_lipschitz(std::size_t trials, std::uint64_t seed) {
  LemmaResult r{"mha_lipschitz"};
  std::mt19937_64 rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    ModelConfig c;
    c.layers = 1;
    c.heads = detail::pick(rng, 1, 3);
    c.dim = detail::pick(rng, 1, 8);
    c.head_dim = detail::pick(rng, 1, 8);
    c.vocab = 1;
    c.ln_mode = LnMode::ClipNorm;
    c.logit_scaling = LogitScaling::None;
    const std::size_t n = detail::pick(rng, 1, 8);
    const double bx = detail::uniform(rng, 0.1, 2.0);
    LayerWeights layer;
    const double ws = detail::uniform(rng, 0.05, 1.5);
    for (std::size_t h = 0; h < c.heads; ++h) {
      layer.heads.push_back({detail::random_matrix(rng, c.dim, c.head_dim, ws),
                             detail::random_matrix(rng, c.dim, c.head_dim, ws),
                             detail::random_matrix(rng, c.dim, c.dim, ws)});
    }
    double bq = 0, bk = 0, bv = 0;
    for (const auto& h : layer.heads) {
      bq = std::max(bq, frobenius_norm(h.w_q));
      bk = std::max(bk, frobenius_norm(h.w_k));
      bv = std::max(bv, frobenius_norm(h.w_v));
    }
    Matrix x = detail::random_matrix(rng, n, c.dim, bx);
    detail::clip_rows(x, bx);
    Matrix xt = x;
    const double eps = detail::uniform(rng, 1e-4, 1.0);
    for (double& v : xt.data()) v += detail::uniform(rng, -eps, eps);
    detail::clip_rows(xt, bx);
    const double lhs = row_2inf_norm(subtract(mha_forward(x, layer, MaskSpec::causal(), c),
                                              mha_forward(xt, layer, MaskSpec::causal(), c)));
    const double rhs = static_cast<double>(c.heads) * bv * (1.0 + 4.0 * bx * bx * bq * bk) *
                       row_2inf_norm(subtract(x, xt));
    r.record(lhs, rhs);
  }
  return r;
}

// Dropping key/value rows K2/V2 from one query's attention moves its output
// by at most 2 ||s2||_1 max(||V1||_{2,inf}, ||V2||_{2,inf}), s2 being the
// softmax mass the dropped rows held.
inline LemmaResult lemma_truncated_attention(std::size_t trials, std::uint64_t seed) {
  LemmaResult r{"truncated_attention"};
  std::mt19937_64 rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t d = detail::pick(rng, 1, 8), dv = detail::pick(rng, 1, 8);
    const std::size_t n1 = detail::pick(rng, 1, 8);
    const std::size_t n2 = t % 10 == 0 ? 0 : detail::pick(rng, 1, 8);
    const double s = detail::uniform(rng, 0.1, 2.5);
    const Matrix q = detail::random_matrix(rng, 1, d, s);
    const Matrix k1 = detail::random_matrix(rng, n1, d, s), k2 = detail::random_matrix(rng, n2, d, s);
    const Matrix v1 = detail::random_matrix(rng, n1, dv, s), v2 = detail::random_matrix(rng, n2, dv, s);

    std::vector<double> all_scores, kept_scores;
    for (std::size_t i = 0; i < n1; ++i) kept_scores.push_back(dot(q.row(0), k1.row(i)));
    all_scores = kept_scores;
    for (std::size_t i = 0; i < n2; ++i) all_scores.push_back(dot(q.row(0), k2.row(i)));
    const auto p_all = detail::softmax(all_scores), p_kept = detail::softmax(kept_scores);

    std::vector<double> full(dv, 0.0), trunc(dv, 0.0), diff(dv);
    double s2 = 0.0;
    for (std::size_t i = 0; i < n1; ++i)
      for (std::size_t c = 0; c < dv; ++c) {
        full[c] += p_all[i] * v1(i, c);
        trunc[c] += p_kept[i] * v1(i, c);
      }
    for (std::size_t i = 0; i < n2; ++i) {
      s2 += p_all[n1 + i];
      for (std::size_t c = 0; c < dv; ++c) full[c] += p_all[n1 + i] * v2(i, c);
    }
    for (std::size_t c = 0; c < dv; ++c) diff[c] = trunc[c] - full[c];
    const double vmax = std::max(row_2inf_norm(v1), row_2inf_norm(v2));
    r.record(l2_norm(diff), 2.0 * s2 * vmax);
  }
  return r;
}

inline std::vector<LemmaResult> lemma_oracles(std::size_t trials, std::uint64_t seed) {
  return {lemma_softmax_lipschitz(trials, seed), lemma_matvec(trials, seed + 1),
          lemma_mha_lipschitz(trials, seed + 2), lemma_truncated_attention(trials, seed + 3)};
}

// ---------------------------------------------------------------------------
// Randomized theorem trials

struct TrialLimits {
  std::size_t max_layers = 4;
  std::size_t max_heads = 3;
  std::size_t max_dim = 8;
  std::size_t max_tokens = 24;
  double max_b = 1.2;
};

struct TrialResult {
  std::uint64_t seed = 0;
  ModelConfig config;
  std::size_t tokens = 0;
  std::size_t w_sink = 0, w_recent = 1;
  std::set<std::size_t> lazy;
  TheoremConstants constants;
  ErrorTrace trace;
  BoundReport recursive;
  LogitBound logit;
  bool unemb_ok = true;  // logit error <= ||W_unemb||_F * e_x[L]

  bool pass() const { return recursive.pass && logit.pass && unemb_ok; }
};

// One random instance: model, input, masked layer set and window. Every
// tenth trial masks no layer at all.
inline TrialResult run_trial(std::uint64_t seed, const TrialLimits& lim) {
  std::mt19937_64 rng(seed);
  TrialResult r;
  r.seed = seed;
  auto& c = r.config;
  c.layers = detail::pick(rng, 1, lim.max_layers);
  c.heads = detail::pick(rng, 1, lim.max_heads);
  c.dim = detail::pick(rng, 2, std::max<std::size_t>(2, lim.max_dim));
  c.head_dim = detail::pick(rng, 1, c.dim);
  c.vocab = detail::pick(rng, 2, 16);
  const Activation acts[] = {Activation::ReLU, Activation::GELU, Activation::Sigmoid};
  c.activation = acts[rng() % 3];
  c.ln_mode = LnMode::ClipNorm;
  c.logit_scaling = LogitScaling::None;

  Weights w = random_init(c, rng(), 1.0);
  const double target_b = detail::uniform(rng, 0.05, lim.max_b);
  const double factor = target_b / param_norm_bound(w);
  w.for_each_matrix([&](Matrix& m) {
    if (&m == &w.embedding) return;
    for (double& v : m.data()) v *= factor;
  });
  // Inputs with row norms on both sides of 1 so the clip branch is exercised.
  for (double& v : w.embedding.data()) v *= detail::uniform(rng, 0.2, 1.5);

  r.tokens = detail::pick(rng, 2, std::max<std::size_t>(2, lim.max_tokens));
  std::vector<std::int64_t> toks(r.tokens);
  for (auto& t : toks) t = static_cast<std::int64_t>(rng() % c.vocab);
  const Matrix x0 = embed(toks, w);

  r.w_sink = detail::pick(rng, 0, 2);
  r.w_recent = detail::pick(rng, 1, 4);
  if (seed % 10 != 0) {
    for (std::size_t l = 0; l < c.layers; ++l)
      if (rng() % 2) r.lazy.insert(l);
    if (r.lazy.empty()) r.lazy.insert(rng() % c.layers);
  }
  const DiscardSets discards = streaming_discards(r.tokens, r.w_sink, r.w_recent);
  r.constants = TheoremConstants::from(w);
  r.trace = run_pair(w, x0, r.lazy, discards);
  r.recursive = check_recursive_bound(r.trace, r.constants, r.lazy);
  r.logit = check_logit_bound(r.trace, r.constants, r.lazy);
  r.unemb_ok = r.trace.logit_error <= r.trace.unemb_norm * r.trace.e_x.back() + kBoundSlack;
  return r;
}

struct VerificationReport {
  std::vector<TrialResult> trials;
  std::vector<LemmaResult> lemmas;
  double min_recursive_margin = std::numeric_limits<double>::infinity();
  double min_logit_margin = std::numeric_limits<double>::infinity();
  std::size_t violations = 0;

  bool pass() const {
    if (violations) return false;
    for (const auto& l : lemmas)
      if (l.violations) return false;
    return true;
  }
};

inline VerificationReport verify_theory(std::size_t trials, const TrialLimits& lim, std::uint64_t seed,
                                        std::size_t lemma_trials = 500) {
  VerificationReport rep;
  rep.trials.resize(trials);
  parallel_for(trials, [&](std::size_t i) { rep.trials[i] = run_trial(seed + i, lim); });
  for (const auto& t : rep.trials) {
    if (!t.recursive.margins.empty()) rep.min_recursive_margin = std::min(rep.min_recursive_margin, t.recursive.min_margin);
    rep.min_logit_margin = std::min(rep.min_logit_margin, t.logit.margin);
    if (!t.pass()) ++rep.violations;
  }
  rep.lemmas = lemma_oracles(lemma_trials, seed ^ 0x5eedULL);
  return rep;
}

inline nlohmann::json to_json(const VerificationReport& rep) {
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& t : rep.trials) {
    trials.push_back({
        {"seed", t.seed},
        {"layers", t.config.layers},
        {"heads", t.config.heads},
        {"dim", t.config.dim},
        {"head_dim", t.config.head_dim},
        {"activation", to_string(t.config.activation)},
        {"tokens", t.tokens},
        {"w_sink", t.w_sink},
        {"w_recent", t.w_recent},
        {"lazy_layers", std::vector<std::size_t>(t.lazy.begin(), t.lazy.end())},
        {"constants",
         {{"B", t.constants.B},
          {"H", t.constants.H},
          {"L", t.constants.L},
          {"L_lip", t.constants.L_lip},
          {"c_step", t.constants.c_step()},
          {"c_amp", t.constants.c_amp()},
          {"c_new", t.constants.c_new()},
          {"c_logit_const", t.constants.c_logit_const()},
          {"c_logit_mass", t.constants.c_logit_mass()}}},
        {"e_x", t.trace.e_x},
        {"s", t.trace.s},
        {"s_modified", t.trace.s_modified},
        {"logit_error", t.trace.logit_error},
        {"recursive_margins", t.recursive.margins},
        {"logit_margin", t.logit.margin},
        {"pass", t.pass()},
    });
  }
  nlohmann::json lemmas = nlohmann::json::array();
  for (const auto& l : rep.lemmas) {
    lemmas.push_back({{"name", l.name}, {"trials", l.trials}, {"violations", l.violations}, {"worst_excess", l.worst_excess}});
  }
  return {
      {"trials", trials},
      {"lemmas", lemmas},
      {"min_recursive_margin", std::isfinite(rep.min_recursive_margin) ? nlohmann::json(rep.min_recursive_margin) : nlohmann::json()},
      {"min_logit_margin", std::isfinite(rep.min_logit_margin) ? nlohmann::json(rep.min_logit_margin) : nlohmann::json()},
      {"violations", rep.violations},
      {"pass", rep.pass()},
  };
}

}  // namespace lazykv::theory
