#pragma once

// A model whose lazy layer is known by construction. Every token embedding
// carries a constant bias coordinate; marker tokens also set a flag
// coordinate. Non-lazy layers score keys by the flag with a large weight, so
// their last queries put almost all mass on markers placed mid-sequence
// (outside sinks and recent windows). The lazy layer has W_Q = W_K = 0 and
// attends uniformly, leaving (w_sink + w_recent)/N of its mass on the kept
// set: the largest ratio of all layers. W_V and the FFN are zero, so the
// hidden state never changes between layers.

#include <random>
#include <vector>

#include "lazykv/offline.hpp"

namespace engineered {

inline constexpr std::int64_t kMarker = 0;

inline lazykv::Weights model(std::size_t layers, std::size_t lazy_layer, std::uint64_t seed) {
  lazykv::ModelConfig c;
  c.layers = layers;
  c.heads = 2;
  c.dim = 4;
  c.head_dim = 2;
  c.vocab = 12;
  c.ln_mode = lazykv::LnMode::ClipNorm;
  c.logit_scaling = lazykv::LogitScaling::None;
  lazykv::Weights w = lazykv::zero_weights(c);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  for (std::size_t t = 0; t < c.vocab; ++t) {
    w.embedding(t, 0) = 0.5;
    w.embedding(t, 1) = t == std::size_t(kMarker) ? 0.5 : 0.0;
    w.embedding(t, 2) = u(rng);
    w.embedding(t, 3) = u(rng);
  }
  for (std::size_t l = 0; l < layers; ++l) {
    if (l == lazy_layer) continue;
    for (auto& h : w.layers[l].heads) {
      h.w_q(0, 0) = 40.0;  // query = 20 on every row
      h.w_k(1, 0) = 2.0;   // key = 1 on markers, 0 elsewhere
    }
  }
  for (double& v : w.w_unemb.data()) v = u(rng);
  return w;
}

// Samples of length 40..60 with markers in the middle third.
inline std::vector<lazykv::CorpusSample> corpus(std::size_t samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<lazykv::CorpusSample> out;
  for (std::size_t i = 0; i < samples; ++i) {
    const std::size_t n = 40 + rng() % 21;
    std::vector<std::int64_t> toks(n);
    for (auto& t : toks) t = 1 + static_cast<std::int64_t>(rng() % 11);
    for (std::size_t k = 0; k < 3; ++k) toks[n / 3 + rng() % (n / 3)] = kMarker;
    const std::size_t split = 1 + rng() % (n - 1);
    out.push_back({{toks.begin(), toks.begin() + long(split)}, {toks.begin() + long(split), toks.end()}});
  }
  return out;
}

inline lazykv::DetectParams params(std::size_t p_layers) {
  lazykv::DetectParams p;
  p.p_layers = p_layers;
  p.w_sink = 2;
  p.w_recent = 4;
  p.w_last = 4;
  return p;
}

}  // namespace engineered
