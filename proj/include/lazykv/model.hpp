#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lazykv/errors.hpp"
#include "lazykv/numerics.hpp"

namespace lazykv {

enum class Activation { ReLU, GELU, Sigmoid };
enum class LnMode { ClipNorm, RMS };
enum class LogitScaling { None, InvSqrtDk };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::ReLU: return "relu";
    case Activation::GELU: return "gelu";
    case Activation::Sigmoid: return "sigmoid";
  }
  return "?";
}
inline const char* to_string(LnMode m) { return m == LnMode::ClipNorm ? "clip" : "rms"; }
inline const char* to_string(LogitScaling s) { return s == LogitScaling::None ? "none" : "inv_sqrt_dk"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::ReLU;
  if (s == "gelu") return Activation::GELU;
  if (s == "sigmoid") return Activation::Sigmoid;
  throw InputError("unknown activation '" + s + "'");
}
inline LnMode ln_mode_from_string(const std::string& s) {
  if (s == "clip") return LnMode::ClipNorm;
  if (s == "rms") return LnMode::RMS;
  throw InputError("unknown ln mode '" + s + "'");
}
inline LogitScaling logit_scaling_from_string(const std::string& s) {
  if (s == "none") return LogitScaling::None;
  if (s == "inv_sqrt_dk") return LogitScaling::InvSqrtDk;
  throw InputError("unknown logit scaling '" + s + "'");
}

// Lipschitz constant of the activation. GELU's is attained at x = sqrt(2),
// where its derivative Phi(x) + x*phi(x) peaks.
inline double lipschitz_constant(Activation a) {
  switch (a) {
    case Activation::ReLU: return 1.0;
    case Activation::Sigmoid: return 0.25;
    case Activation::GELU: {
      const double x = std::numbers::sqrt2;
      const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
      const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
      return cdf + x * pdf;
    }
  }
  return 1.0;
}

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::ReLU: return x > 0.0 ? x : 0.0;
    case Activation::Sigmoid: return 1.0 / (1.0 + std::exp(-x));
    case Activation::GELU: return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
  }
  return x;
}

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t dim = 8;
  std::size_t head_dim = 4;  // d_k
  std::size_t vocab = 32;
  Activation activation = Activation::ReLU;
  LnMode ln_mode = LnMode::RMS;
  LogitScaling logit_scaling = LogitScaling::InvSqrtDk;

  // ClipNorm + unscaled logits is the form the error bounds are stated for.
  bool theory_exact() const {
    return ln_mode == LnMode::ClipNorm && logit_scaling == LogitScaling::None;
  }

  double logit_scale() const {
    return logit_scaling == LogitScaling::None ? 1.0 : 1.0 / std::sqrt(static_cast<double>(head_dim));
  }

  void validate() const {
    // layers == 0 is accepted: embedding straight into the unembedding.
    require_input(heads >= 1 && dim >= 1 && head_dim >= 1 && vocab >= 1,
                  "model config: heads, dim, head_dim and vocab must be >= 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct HeadWeights {
  Matrix w_q;  // dim x head_dim
  Matrix w_k;  // dim x head_dim
  Matrix w_v;  // dim x dim, output projection folded in

  friend bool operator==(const HeadWeights&, const HeadWeights&) = default;
};

struct LayerWeights {
  std::vector<HeadWeights> heads;
  Matrix w_a1;  // dim x dim
  Matrix w_a2;  // dim x dim

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct Weights {
  ModelConfig config;
  Matrix embedding;  // vocab x dim
  std::vector<LayerWeights> layers;
  Matrix w_unemb;  // dim x vocab

  friend bool operator==(const Weights&, const Weights&) = default;

  // Visits every matrix in serialization order: embedding, per layer
  // (per head W_Q, W_K, W_V), W_A1, W_A2, then W_unemb.
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn&& fn) {
    fn(self.embedding);
    for (auto& layer : self.layers) {
      for (auto& head : layer.heads) {
        fn(head.w_q);
        fn(head.w_k);
        fn(head.w_v);
      }
      fn(layer.w_a1);
      fn(layer.w_a2);
    }
    fn(self.w_unemb);
  }
  template <typename Fn>
  void for_each_matrix(Fn&& fn) { visit(*this, fn); }
  template <typename Fn>
  void for_each_matrix(Fn&& fn) const { visit(*this, fn); }
};

// Zero-filled weights with the shapes implied by `config`.
inline Weights zero_weights(const ModelConfig& config) {
  config.validate();
  Weights w;
  w.config = config;
  w.embedding = Matrix(config.vocab, config.dim);
  w.layers.resize(config.layers);
  for (auto& layer : w.layers) {
    layer.heads.resize(config.heads);
    for (auto& head : layer.heads) {
      head.w_q = Matrix(config.dim, config.head_dim);
      head.w_k = Matrix(config.dim, config.head_dim);
      head.w_v = Matrix(config.dim, config.dim);
    }
    layer.w_a1 = Matrix(config.dim, config.dim);
    layer.w_a2 = Matrix(config.dim, config.dim);
  }
  w.w_unemb = Matrix(config.dim, config.vocab);
  return w;
}

// Uniform in [-scale, scale], drawn from a 64-bit Mersenne Twister in the
// serialization order. The 53-bit mantissa construction keeps the stream
// identical across standard libraries.
inline Weights random_init(const ModelConfig& config, std::uint64_t seed, double scale) {
  require_input(scale >= 0.0 && std::isfinite(scale), "random_init: scale must be finite and >= 0");
  Weights w = zero_weights(config);
  std::mt19937_64 rng(seed);
  w.for_each_matrix([&](Matrix& m) {
    for (double& v : m.data()) {
      const double u = static_cast<double>(rng() >> 11) * 0x1p-53;
      v = scale * (2.0 * u - 1.0) + 0.0;  // + 0.0 turns -0.0 into +0.0
    }
  });
  return w;
}

// B: largest Frobenius norm over the bounded parameter set (attention,
// feed-forward and unembedding matrices; the embedding table is input, not
// a transformer parameter).
inline double param_norm_bound(const Weights& w) {
  double best = frobenius_norm(w.w_unemb);
  for (const auto& layer : w.layers) {
    for (const auto& head : layer.heads) {
      best = std::max({best, frobenius_norm(head.w_q), frobenius_norm(head.w_k), frobenius_norm(head.w_v)});
    }
    best = std::max({best, frobenius_norm(layer.w_a1), frobenius_norm(layer.w_a2)});
  }
  return best;
}

inline void ln(std::span<const double> x, LnMode mode, std::span<double> out) {
  require(x.size() == out.size(), "ln: width mismatch");
  if (mode == LnMode::ClipNorm) {
    const double n = l2_norm(x);
    const double s = n <= 1.0 ? 1.0 : 1.0 / n;
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * s;
    return;
  }
  const double ms = dot(x, x) / static_cast<double>(x.size());
  const double s = 1.0 / std::sqrt(ms + 1e-6);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * s;
}

inline std::vector<double> ln(std::span<const double> x, LnMode mode) {
  std::vector<double> out(x.size());
  ln(x, mode, out);
  return out;
}

inline Matrix ln_rows(const Matrix& x, LnMode mode) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) ln(x.row(i), mode, out.row(i));
  return out;
}

struct HeadProjections {
  Matrix q, k, v;
};

inline HeadProjections project_head(const Matrix& x_normed, const HeadWeights& head) {
  return {matmul(x_normed, head.w_q), matmul(x_normed, head.w_k), matmul(x_normed, head.w_v)};
}

// Multi-head attention with the per-head projections and log-sum-exp values
// kept around; the engine needs both for caching and lazy-ratio scoring.
struct MhaPass {
  Matrix out;
  std::vector<HeadProjections> heads;
  std::vector<std::vector<double>> lse;  // [head][row]
};

inline MhaPass mha_pass(const Matrix& x_normed, const LayerWeights& layer, const MaskSpec& mask,
                        const ModelConfig& config) {
  require(x_normed.cols() == config.dim, "mha_forward: input width must equal model dim");
  require(layer.heads.size() == config.heads, "mha_forward: head count mismatch");
  const std::size_t n = x_normed.rows();
  mask.validate(n, n);
  const double scale = config.logit_scale();

  MhaPass pass;
  pass.out = Matrix(n, config.dim);
  pass.lse.assign(config.heads, std::vector<double>(n));
  std::vector<double> head_out(config.dim);
  std::vector<double> scratch;
  for (std::size_t h = 0; h < config.heads; ++h) {
    HeadProjections proj = project_head(x_normed, layer.heads[h]);
    for (std::size_t i = 0; i < n; ++i) {
      double lse;
      if (mask.kind == MaskSpec::Kind::Causal) {
        lse = attend_row(proj.q.row(i), proj.k, proj.v, std::views::iota(std::size_t{0}, i + 1), scale,
                         head_out, scratch);
      } else {
        lse = attend_row(proj.q.row(i), proj.k, proj.v, mask.allowed[i], scale, head_out, scratch);
      }
      pass.lse[h][i] = lse;
      auto dst = pass.out.row(i);
      for (std::size_t c = 0; c < config.dim; ++c) dst[c] += head_out[c];
    }
    pass.heads.push_back(std::move(proj));
  }
  return pass;
}

inline Matrix mha_forward(const Matrix& x_normed, const LayerWeights& layer, const MaskSpec& mask,
                          const ModelConfig& config) {
  return mha_pass(x_normed, layer, mask, config).out;
}

// Materialized N x N attention probabilities of one head. Only for small N.
inline Matrix attention_weights(const Matrix& x_normed, const HeadWeights& head, const MaskSpec& mask,
                                const ModelConfig& config) {
  const Matrix q = matmul(x_normed, head.w_q);
  const Matrix k = matmul(x_normed, head.w_k);
  Matrix scores = scaled(matmul(q, transpose(k)), config.logit_scale());
  return masked_row_softmax(scores, mask);
}

inline Matrix ffn_forward(const Matrix& y_normed, const LayerWeights& layer, Activation act) {
  Matrix hidden = matmul(y_normed, layer.w_a1);
  for (double& v : hidden.data()) v = activate(act, v);
  return matmul(hidden, layer.w_a2);
}

struct BlockOutput {
  Matrix y;
  Matrix x;
};

inline BlockOutput block_forward(const Matrix& x_prev, std::size_t layer_index, const Weights& w,
                                 const MaskSpec& mask) {
  require(layer_index < w.layers.size(), "block_forward: layer index out of range");
  const auto& cfg = w.config;
  const auto& layer = w.layers[layer_index];
  BlockOutput b;
  b.y = add(x_prev, mha_forward(ln_rows(x_prev, cfg.ln_mode), layer, mask, cfg));
  b.x = add(b.y, ffn_forward(ln_rows(b.y, cfg.ln_mode), layer, cfg.activation));
  return b;
}

inline Matrix embed(std::span<const std::int64_t> tokens, const Weights& w) {
  Matrix x(tokens.size(), w.config.dim);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto t = tokens[i];
    require_input(t >= 0 && static_cast<std::size_t>(t) < w.config.vocab,
                  "token id " + std::to_string(t) + " outside vocabulary of size " +
                      std::to_string(w.config.vocab));
    auto src = w.embedding.row(static_cast<std::size_t>(t));
    std::copy(src.begin(), src.end(), x.row(i).begin());
  }
  return x;
}

struct HiddenTrace {
  std::vector<Matrix> x;  // x[0] = embeddings, x[i] = output of block i
  std::vector<Matrix> y;  // y[i-1] = post-attention state of block i
  Matrix logits;
};

// Forward pass with an optional per-layer mask override; layers without an
// override use the causal mask.
inline HiddenTrace forward_masked(const Matrix& x0, const Weights& w,
                                  std::span<const std::optional<MaskSpec>> layer_masks) {
  require(layer_masks.empty() || layer_masks.size() == w.layers.size(),
          "forward_masked: need one mask slot per layer");
  HiddenTrace trace;
  trace.x.push_back(x0);
  const MaskSpec causal = MaskSpec::causal();
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const MaskSpec& mask = (!layer_masks.empty() && layer_masks[i]) ? *layer_masks[i] : causal;
    BlockOutput b = block_forward(trace.x.back(), i, w, mask);
    trace.y.push_back(std::move(b.y));
    trace.x.push_back(std::move(b.x));
  }
  trace.logits = matmul(trace.x.back(), w.w_unemb);
  return trace;
}

inline HiddenTrace forward_full(std::span<const std::int64_t> tokens, const Weights& w) {
  return forward_masked(embed(tokens, w), w, {});
}

}  // namespace lazykv
