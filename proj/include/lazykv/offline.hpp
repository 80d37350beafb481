#pragma once

// Frequency-based pre-selection of lazy layers over a (question, answer)
// corpus. Each sample goes through the engine's online prefill path; layers
// picked as lazy most often across samples form the static policy.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lazykv/engine.hpp"
#include "lazykv/errors.hpp"
#include "lazykv/model.hpp"
#include "lazykv/parallel.hpp"

namespace lazykv {

struct CorpusSample {
  std::vector<std::int64_t> question;
  std::vector<std::int64_t> answer;

  std::vector<std::int64_t> combined() const {
    std::vector<std::int64_t> all = question;
    all.insert(all.end(), answer.begin(), answer.end());
    return all;
  }
};

struct FrequencyTable {
  std::vector<std::size_t> counts;  // per layer
  std::size_t samples = 0;

  friend bool operator==(const FrequencyTable&, const FrequencyTable&) = default;
};

inline nlohmann::json to_json(const FrequencyTable& t) {
  return {{"counts", t.counts}, {"samples", t.samples}};
}

// JSON lines: {"question": [ints], "answer": [ints]} per non-blank line.
inline std::vector<CorpusSample> parse_corpus(const std::string& text) {
  std::vector<CorpusSample> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      CorpusSample s;
      s.question = j.at("question").get<std::vector<std::int64_t>>();
      s.answer = j.at("answer").get<std::vector<std::int64_t>>();
      require_input(!s.question.empty() || !s.answer.empty(),
                    "corpus line " + std::to_string(line_no) + ": empty sample");
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw InputError("corpus line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

struct PreselectResult {
  FrequencyTable table;
  PolicyFile policy;
  std::vector<std::string> warnings;
};

// Lazy set = the L - P layers with the highest counts; equal counts prefer
// the deeper layer, as in the online queue.
inline std::vector<std::size_t> select_by_frequency(const FrequencyTable& t, std::size_t p_layers) {
  const std::size_t layers = t.counts.size();
  require_input(p_layers <= layers, "preselect: P must not exceed the layer count");
  std::vector<std::size_t> order(layers);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (t.counts[a] != t.counts[b]) return t.counts[a] > t.counts[b];
    return a > b;
  });
  std::vector<std::size_t> lazy(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(layers - p_layers));
  std::sort(lazy.begin(), lazy.end());
  return lazy;
}

inline PreselectResult preselect(const Weights& w, std::span<const CorpusSample> corpus, const DetectParams& params,
                                 const std::string& fingerprint = {}) {
  require_input(!corpus.empty(), "preselect: empty corpus");
  const std::size_t layers = w.config.layers;
  require_input(params.p_layers <= layers, "preselect: P must not exceed the layer count");

  std::vector<std::vector<std::size_t>> lazy_sets(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t i) {
    EngineParams ep;
    ep.detect = params;
    Session s(w, ep);
    const auto tokens = corpus[i].combined();
    s.prefill(tokens);
    lazy_sets[i].assign(s.lazy_layers().begin(), s.lazy_layers().end());
  });

  PreselectResult res;
  res.table.counts.assign(layers, 0);
  res.table.samples = corpus.size();
  for (const auto& set : lazy_sets)
    for (std::size_t l : set) ++res.table.counts[l];

  std::size_t short_samples = 0;
  for (const auto& s : corpus)
    if (s.question.size() + s.answer.size() <= params.w_sink + params.w_recent) ++short_samples;
  if (short_samples > 0) {
    res.warnings.push_back(std::to_string(short_samples) + " of " + std::to_string(corpus.size()) +
                           " samples fit inside w_sink + w_recent; their lazy ratios are all 1 and the "
                           "selection for them falls back to the tie-break");
  }

  res.policy.fingerprint = fingerprint;
  res.policy.lazy_layers = select_by_frequency(res.table, params.p_layers);
  res.policy.w_sink = params.w_sink;
  res.policy.w_recent = params.w_recent;
  res.policy.provenance = Provenance::Preselect;
  return res;
}

}  // namespace lazykv
