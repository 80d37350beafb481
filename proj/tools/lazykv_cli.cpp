// lazykv: command-line front end.
//
//   lazykv gen-model     --layers 4 --heads 2 --dim 8 --dk 4 --vocab 64 --seed 1 --scale 0.5 --out m.bin
//   lazykv run           --model m.bin --tokens 1,2,3 --max-new 16 --report run.json
//   lazykv bench         --model m.bin --lengths 1024,2048 --w-recent 60
//   lazykv verify-theory --trials 100 --seed 1
//   lazykv analyze       --model m.bin --random-prompt 512 --w-last-sweep 8,16,32,64
//   lazykv preselect     --model m.bin --corpus corpus.jsonl --p-layers 2 --out policy.json
//   lazykv make-policy   --strategy random --layers 8 --p-layers 4 --seed 3 --out policy.json
//
// Exit codes: 0 success, 1 input error, 2 verification failure.

#include <CLI11.hpp>

#include <cmath>
#include <cstdint>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lazykv/bench.hpp"
#include "lazykv/engine.hpp"
#include "lazykv/model_io.hpp"
#include "lazykv/offline.hpp"
#include "lazykv/theory.hpp"

namespace {

using lazykv::InputError;
using nlohmann::json;

constexpr int kExitInput = 1;
constexpr int kExitVerification = 2;

std::vector<std::int64_t> parse_int_list(const std::string& text) {
  std::vector<std::int64_t> out;
  std::string cleaned = text;
  for (char& ch : cleaned)
    if (ch == ',' || ch == '\n' || ch == '\t' || ch == '[' || ch == ']') ch = ' ';
  std::istringstream in(cleaned);
  std::string item;
  while (in >> item) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoll(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw InputError("not an integer: '" + item + "'");
    }
  }
  return out;
}

std::vector<std::size_t> parse_size_list(const std::string& text) {
  std::vector<std::size_t> out;
  for (auto v : parse_int_list(text)) {
    if (v < 0) throw InputError("negative value in list: " + std::to_string(v));
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

void emit(const json& j, const std::string& path) {
  const std::string text = j.dump(2) + "\n";
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    lazykv::write_file(path, text);
  }
}

struct ModelOpts {
  std::string path;
};

struct PromptOpts {
  std::string tokens;
  std::string tokens_file;
  std::size_t random_len = 0;
  std::uint64_t prompt_seed = 0;

  void add(CLI::App* cmd) {
    cmd->add_option("--tokens", tokens, "Prompt token ids, comma separated");
    cmd->add_option("--tokens-file", tokens_file, "File of whitespace/comma separated token ids");
    cmd->add_option("--random-prompt", random_len, "Use a random prompt of this length");
    cmd->add_option("--prompt-seed", prompt_seed, "Seed for --random-prompt");
  }

  std::vector<std::int64_t> resolve(std::size_t vocab) const {
    std::vector<std::int64_t> t;
    if (!tokens.empty()) t = parse_int_list(tokens);
    else if (!tokens_file.empty()) t = parse_int_list(lazykv::read_file(tokens_file));
    else if (random_len > 0) t = lazykv::random_prompt(random_len, vocab, prompt_seed);
    if (t.empty()) throw InputError("no prompt: pass --tokens, --tokens-file or --random-prompt");
    return t;
  }
};

struct WindowOpts {
  std::size_t w_sink = 4;
  std::size_t w_recent = 1020;
  std::size_t w_last = 32;
  std::optional<std::size_t> p_layers;

  void add(CLI::App* cmd, bool with_last = true) {
    cmd->add_option("--w-sink", w_sink, "Sink tokens kept by streaming layers")->capture_default_str();
    cmd->add_option("--w-recent", w_recent, "Recent window of streaming layers")->capture_default_str();
    if (with_last) cmd->add_option("--w-last", w_last, "Query rows scored for the lazy ratio")->capture_default_str();
    cmd->add_option("--p-layers", p_layers, "Layers kept on full attention (default ceil(L/2))");
  }

  lazykv::DetectParams params(std::size_t layers) const {
    lazykv::DetectParams p;
    p.w_sink = w_sink;
    p.w_recent = w_recent;
    p.w_last = w_last;
    p.p_layers = p_layers.value_or((layers + 1) / 2);
    if (p.w_recent < 1) throw InputError("--w-recent must be >= 1");
    if (p.w_last < 1) throw InputError("--w-last must be >= 1");
    if (p.p_layers > layers) throw InputError("--p-layers exceeds the model's layer count");
    return p;
  }
};

json ratios_json(const lazykv::LazyRatioReport& r) { return r.ratios; }

// ---------------------------------------------------------------------------

int cmd_gen_model(const lazykv::ModelConfig& cfg, std::uint64_t seed, double scale, const std::string& out) {
  if (!(scale >= 0.0)) throw InputError("--scale must be >= 0");
  const auto w = lazykv::random_init(cfg, seed, scale);
  lazykv::save_model(out, w, seed, scale);
  const auto bytes = lazykv::read_file(out);
  emit({{"model", out}, {"fingerprint", lazykv::fingerprint(bytes)}, {"parameters", lazykv::parameter_count(cfg)}}, "");
  return 0;
}

int cmd_run(const ModelOpts& mo, const PromptOpts& po, const WindowOpts& wo, const std::string& policy_path,
            std::size_t max_new, const std::string& report_path, const std::string& emit_policy) {
  const auto bytes = lazykv::read_file(mo.path);
  const auto model = lazykv::deserialize_model(bytes);
  const auto fp = lazykv::fingerprint(bytes);
  const auto& w = model.weights;
  const auto prompt = po.resolve(w.config.vocab);

  lazykv::EngineParams ep;
  ep.detect = wo.params(w.config.layers);
  if (!policy_path.empty()) {
    auto policy = lazykv::policy_from_json(json::parse(lazykv::read_file(policy_path)));
    if (policy.fingerprint != fp) {
      throw InputError("policy fingerprint " + policy.fingerprint + " does not match model " + fp);
    }
    ep.policy = std::move(policy);
  }
  lazykv::Session session(w, ep);
  const auto gen = lazykv::generate_greedy(session, prompt, max_new);

  json report = {
      {"mode", session.online() ? "online" : "static"},
      {"fingerprint", fp},
      {"prompt_length", prompt.size()},
      {"p_layers", ep.detect.p_layers},
      {"w_sink", ep.policy ? ep.policy->w_sink : ep.detect.w_sink},
      {"w_recent", ep.policy ? ep.policy->w_recent : ep.detect.w_recent},
      {"w_last", ep.detect.w_last},
      {"lazy_layers", std::vector<std::size_t>(session.lazy_layers().begin(), session.lazy_layers().end())},
      {"per_layer_ratios", ratios_json(gen.prefill.report)},
      {"peak_rows", session.meter().stats().peak_rows},
      {"rows_now", session.meter().stats().layer_rows},
      {"peak_full_caches", session.peak_full_caches()},
      {"decode_ms_per_step", [&] {
         std::vector<double> ms;
         for (double s : gen.decode_seconds) ms.push_back(s * 1e3);
         return ms;
       }()},
      {"tokens", gen.tokens},
      {"prefill_logits", gen.prefill.logits},
  };
  if (!emit_policy.empty()) emit(lazykv::to_json(session.emitted_policy(fp)), emit_policy);
  emit(report, report_path);
  return 0;
}

int cmd_bench(const ModelOpts& mo, const WindowOpts& wo, const std::string& lengths_text, std::size_t repeats,
              std::size_t steps, std::uint64_t seed, const std::string& report_path) {
  const auto bytes = lazykv::read_file(mo.path);
  const auto model = lazykv::deserialize_model(bytes);
  const auto& w = model.weights;
  const auto dp = wo.params(w.config.layers);
  const auto lengths = parse_size_list(lengths_text);
  if (lengths.empty()) throw InputError("--lengths is empty");
  if (repeats < 1) throw InputError("--repeats must be >= 1");
  const std::size_t layers = w.config.layers;

  json rows = json::array();
  for (std::size_t n : lengths) {
    if (n < 1) throw InputError("lengths must be >= 1");
    const auto prompt = lazykv::random_prompt(n, w.config.vocab, seed + n);

    lazykv::EngineParams base_ep;
    base_ep.detect = dp;
    base_ep.policy = lazykv::PolicyFile{};
    lazykv::Session baseline(w, base_ep);
    const auto first = lazykv::argmax_token(baseline.prefill(prompt).logits);
    const auto base_t = lazykv::time_decode(baseline, first, steps, repeats);

    lazykv::EngineParams hyb_ep;
    hyb_ep.detect = dp;
    lazykv::Session hybrid(w, hyb_ep);
    hybrid.prefill(prompt);
    const auto hyb_t = lazykv::time_decode(hybrid, first, steps, repeats);

    lazykv::Session streaming = baseline;
    for (std::size_t l = 0; l < layers; ++l) streaming.transfer_layer(l, dp.w_sink, dp.w_recent);
    const auto str_t = lazykv::time_decode(streaming, first, steps, repeats);

    const auto overhead = lazykv::identification_overhead(w, prompt, dp, repeats);
    const std::size_t analytic = lazykv::analytic_rows(layers, dp.p_layers, n, dp.w_sink, dp.w_recent);

    rows.push_back({
        {"length", n},
        {"baseline",
         {{"decode_tokens_per_sec", base_t.tokens_per_sec},
          {"median_step_ms", base_t.median_step_ms},
          {"rows_after_prefill", base_t.rows_after_prefill},
          {"peak_rows", base_t.peak_rows}}},
        {"hybrid",
         {{"decode_tokens_per_sec", hyb_t.tokens_per_sec},
          {"median_step_ms", hyb_t.median_step_ms},
          {"rows_after_prefill", hyb_t.rows_after_prefill},
          {"peak_rows", hyb_t.peak_rows},
          {"lazy_layers", std::vector<std::size_t>(hybrid.lazy_layers().begin(), hybrid.lazy_layers().end())}}},
        {"streaming",
         {{"decode_tokens_per_sec", str_t.tokens_per_sec},
          {"median_step_ms", str_t.median_step_ms},
          {"rows_after_prefill", str_t.rows_after_prefill}}},
        {"throughput_ratio", hyb_t.tokens_per_sec / base_t.tokens_per_sec},
        {"row_ratio", static_cast<double>(hyb_t.rows_after_prefill) / static_cast<double>(base_t.rows_after_prefill)},
        {"row_ratio_analytic", static_cast<double>(analytic) / static_cast<double>(layers * n)},
        {"identification_overhead",
         {{"baseline_prefill_ms", overhead.baseline_ms},
          {"detect_prefill_ms", overhead.detect_ms},
          {"ratio", overhead.ratio},
          {"detection_share", overhead.detection_share}}},
    });
  }
  emit({{"fingerprint", lazykv::fingerprint(bytes)},
        {"p_layers", dp.p_layers},
        {"w_sink", dp.w_sink},
        {"w_recent", dp.w_recent},
        {"decode_steps", steps},
        {"repeats", repeats},
        {"results", rows}},
       report_path);
  return 0;
}

int cmd_verify_theory(std::size_t trials, const lazykv::theory::TrialLimits& lim, std::size_t lemma_trials,
                      std::uint64_t seed, const std::string& report_path) {
  const auto rep = lazykv::theory::verify_theory(trials, lim, seed, lemma_trials);
  emit(lazykv::theory::to_json(rep), report_path);
  if (!rep.pass()) {
    std::cerr << "verify-theory: " << rep.violations << " trial(s) violated a bound\n";
    return kExitVerification;
  }
  return 0;
}

int cmd_analyze(const ModelOpts& mo, const PromptOpts& po, const WindowOpts& wo, const std::string& sweep_text,
                std::size_t decode_steps, const std::string& report_path) {
  const auto bytes = lazykv::read_file(mo.path);
  const auto model = lazykv::deserialize_model(bytes);
  const auto& w = model.weights;
  const auto prompt = po.resolve(w.config.vocab);
  const auto base = wo.params(w.config.layers);
  const std::size_t layers = w.config.layers;

  json sweep = json::array();
  for (std::size_t wl : parse_size_list(sweep_text.empty() ? std::to_string(base.w_last) : sweep_text)) {
    if (wl < 1) throw InputError("--w-last-sweep values must be >= 1");
    lazykv::EngineParams ep;
    ep.detect = base;
    ep.detect.w_last = wl;
    lazykv::Session s(w, ep);
    const auto res = s.prefill(prompt);
    sweep.push_back({{"w_last", wl},
                     {"per_layer_ratios", res.report.ratios},
                     {"lazy_layers", std::vector<std::size_t>(s.lazy_layers().begin(), s.lazy_layers().end())}});
  }

  // Per-decode-step ratios with every layer on full attention, and the lazy
  // set the same queue rule would pick from each step's ratios.
  lazykv::EngineParams full_ep;
  full_ep.detect = base;
  full_ep.detect.p_layers = layers;
  lazykv::Session full(w, full_ep);
  full.track_decode_ratios(true);
  lazykv::generate_greedy(full, prompt, decode_steps + 1);
  json steps = json::array();
  for (const auto& row : full.decode_ratios()) {
    lazykv::IdentifierState q(base.p_layers, layers);
    json ratios = json::array();
    for (std::size_t l = 0; l < layers; ++l) {
      const double r = row[l].value_or(1.0);
      ratios.push_back(r);
      q.push(l, r);
    }
    steps.push_back({{"per_layer_ratios", ratios}, {"lazy_layers", q.finalize().lazy}});
  }
  emit({{"fingerprint", lazykv::fingerprint(bytes)},
        {"prompt_length", prompt.size()},
        {"p_layers", base.p_layers},
        {"w_sink", base.w_sink},
        {"w_recent", base.w_recent},
        {"w_last_sweep", sweep},
        {"decode_consistency", steps}},
       report_path);
  return 0;
}

int cmd_preselect(const ModelOpts& mo, const std::string& corpus_path, const WindowOpts& wo,
                  const std::string& out, const std::string& table_out) {
  const auto bytes = lazykv::read_file(mo.path);
  const auto model = lazykv::deserialize_model(bytes);
  const auto corpus = lazykv::parse_corpus(lazykv::read_file(corpus_path));
  const auto res = lazykv::preselect(model.weights, corpus, wo.params(model.weights.config.layers),
                                     lazykv::fingerprint(bytes));
  for (const auto& warn : res.warnings) std::cerr << "warning: " << warn << "\n";
  if (!table_out.empty()) emit(lazykv::to_json(res.table), table_out);
  emit(lazykv::to_json(res.policy), out);
  return 0;
}

int cmd_make_policy(const std::string& strategy, const std::string& model_path, std::size_t layers_flag,
                    const WindowOpts& wo, std::size_t mean_window, const std::string& range,
                    const std::string& manual, std::uint64_t seed, const std::string& out) {
  std::string fp;
  std::size_t layers = layers_flag;
  if (!model_path.empty()) {
    const auto bytes = lazykv::read_file(model_path);
    layers = lazykv::deserialize_model(bytes).weights.config.layers;
    fp = lazykv::fingerprint(bytes);
  }
  if (layers == 0) throw InputError("pass --model or --layers");
  lazykv::PolicyStrategy st;
  if (strategy == "pyramid") {
    st.kind = lazykv::PolicyStrategy::Kind::Pyramid;
    st.mean_window = mean_window == 0 ? wo.w_recent : mean_window;
  } else if (strategy == "random") {
    st.kind = lazykv::PolicyStrategy::Kind::Random;
    if (!range.empty()) {
      const auto r = parse_size_list(range);
      if (r.size() != 2) throw InputError("--range expects 'begin,end'");
      st.range_begin = r[0];
      st.range_end = r[1];
    }
  } else if (strategy == "manual") {
    st.kind = lazykv::PolicyStrategy::Kind::Manual;
    st.manual = parse_size_list(manual);
  } else {
    throw InputError("unknown strategy '" + strategy + "'");
  }
  auto p = lazykv::make_policy(st, layers, wo.params(layers), seed);
  p.fingerprint = fp;
  emit(lazykv::to_json(p), out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid full/streaming attention inference engine"};
  app.require_subcommand(1);

  // gen-model
  lazykv::ModelConfig cfg;
  std::uint64_t gen_seed = 0;
  double gen_scale = 0.5;
  std::string gen_out, act = "relu", ln_mode = "rms", scaling = "inv_sqrt_dk";
  auto* gen = app.add_subcommand("gen-model", "Write a random model file");
  gen->add_option("--layers", cfg.layers)->capture_default_str();
  gen->add_option("--heads", cfg.heads)->capture_default_str();
  gen->add_option("--dim", cfg.dim)->capture_default_str();
  gen->add_option("--dk", cfg.head_dim)->capture_default_str();
  gen->add_option("--vocab", cfg.vocab)->capture_default_str();
  gen->add_option("--seed", gen_seed)->capture_default_str();
  gen->add_option("--scale", gen_scale, "Weights drawn uniform in [-scale, scale]")->capture_default_str();
  gen->add_option("--activation", act, "relu|gelu|sigmoid")->capture_default_str();
  gen->add_option("--ln", ln_mode, "rms|clip")->capture_default_str();
  gen->add_option("--logit-scaling", scaling, "inv_sqrt_dk|none")->capture_default_str();
  gen->add_option("--out", gen_out)->required();

  // run
  ModelOpts run_model;
  PromptOpts run_prompt;
  WindowOpts run_win;
  std::string run_policy, run_report, run_emit_policy;
  std::size_t run_max_new = 16;
  auto* run = app.add_subcommand("run", "Greedy generation with online or static lazy layers");
  run->add_option("--model", run_model.path)->required();
  run_prompt.add(run);
  run_win.add(run);
  run->add_option("--policy", run_policy, "Static policy file (skips online identification)");
  run->add_option("--max-new", run_max_new)->capture_default_str();
  run->add_option("--report", run_report, "Report path (stdout if omitted)");
  run->add_option("--emit-policy", run_emit_policy, "Write the resulting policy file here");

  // bench
  ModelOpts bench_model;
  WindowOpts bench_win;
  std::string bench_lengths = "1024,2048,4096,8192", bench_report;
  std::size_t bench_repeats = 3, bench_steps = 32;
  std::uint64_t bench_seed = 1;
  auto* bench = app.add_subcommand("bench", "Decode throughput, cached rows and identification overhead");
  bench->add_option("--model", bench_model.path)->required();
  bench->add_option("--lengths", bench_lengths)->capture_default_str();
  bench_win.add(bench);
  bench->add_option("--repeats", bench_repeats)->capture_default_str();
  bench->add_option("--decode-steps", bench_steps)->capture_default_str();
  bench->add_option("--seed", bench_seed)->capture_default_str();
  bench->add_option("--report", bench_report);

  // verify-theory
  std::size_t vt_trials = 100, vt_lemma_trials = 500;
  lazykv::theory::TrialLimits vt_lim;
  std::uint64_t vt_seed = 1;
  std::string vt_report;
  auto* vt = app.add_subcommand("verify-theory", "Randomized checks of the error bounds and lemmas");
  vt->add_option("--trials", vt_trials)->capture_default_str();
  vt->add_option("--max-layers", vt_lim.max_layers)->capture_default_str();
  vt->add_option("--max-heads", vt_lim.max_heads)->capture_default_str();
  vt->add_option("--max-dim", vt_lim.max_dim)->capture_default_str();
  vt->add_option("--max-tokens", vt_lim.max_tokens)->capture_default_str();
  vt->add_option("--max-b", vt_lim.max_b)->capture_default_str();
  vt->add_option("--lemma-trials", vt_lemma_trials)->capture_default_str();
  vt->add_option("--seed", vt_seed)->capture_default_str();
  vt->add_option("--report", vt_report);

  // analyze
  ModelOpts an_model;
  PromptOpts an_prompt;
  WindowOpts an_win;
  std::string an_sweep = "8,16,32,64", an_report;
  std::size_t an_steps = 16;
  auto* an = app.add_subcommand("analyze", "Lazy ratios across w_last values and decode steps");
  an->add_option("--model", an_model.path)->required();
  an_prompt.add(an);
  an_win.add(an);
  an->add_option("--w-last-sweep", an_sweep)->capture_default_str();
  an->add_option("--decode-steps", an_steps)->capture_default_str();
  an->add_option("--report", an_report);

  // preselect
  ModelOpts ps_model;
  WindowOpts ps_win;
  std::string ps_corpus, ps_out, ps_table;
  auto* ps = app.add_subcommand("preselect", "Frequency-based lazy-layer selection over a corpus");
  ps->add_option("--model", ps_model.path)->required();
  ps->add_option("--corpus", ps_corpus, "JSON lines of {question, answer}")->required();
  ps_win.add(ps);
  ps->add_option("--out", ps_out, "Policy file path (stdout if omitted)");
  ps->add_option("--table", ps_table, "Frequency table path");

  // make-policy
  std::string mp_strategy, mp_model, mp_range, mp_manual, mp_out;
  std::size_t mp_layers = 0, mp_mean = 0;
  std::uint64_t mp_seed = 0;
  WindowOpts mp_win;
  auto* mp = app.add_subcommand("make-policy", "Pyramid, random or manual ablation policies");
  mp->add_option("--strategy", mp_strategy, "pyramid|random|manual")->required();
  mp->add_option("--model", mp_model, "Model file (sets layer count and fingerprint)");
  mp->add_option("--layers", mp_layers, "Layer count when no model is given");
  mp_win.add(mp, false);
  mp->add_option("--mean-window", mp_mean, "Pyramid: average window (default --w-recent)");
  mp->add_option("--range", mp_range, "Random: 'begin,end' layer range");
  mp->add_option("--lazy", mp_manual, "Manual: comma separated lazy layers");
  mp->add_option("--seed", mp_seed)->capture_default_str();
  mp->add_option("--out", mp_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitInput;
  }

  try {
    if (*gen) {
      cfg.activation = lazykv::activation_from_string(act);
      cfg.ln_mode = lazykv::ln_mode_from_string(ln_mode);
      cfg.logit_scaling = lazykv::logit_scaling_from_string(scaling);
      return cmd_gen_model(cfg, gen_seed, gen_scale, gen_out);
    }
    if (*run) return cmd_run(run_model, run_prompt, run_win, run_policy, run_max_new, run_report, run_emit_policy);
    if (*bench) return cmd_bench(bench_model, bench_win, bench_lengths, bench_repeats, bench_steps, bench_seed, bench_report);
    if (*vt) return cmd_verify_theory(vt_trials, vt_lim, vt_lemma_trials, vt_seed, vt_report);
    if (*an) return cmd_analyze(an_model, an_prompt, an_win, an_sweep, an_steps, an_report);
    if (*ps) return cmd_preselect(ps_model, ps_corpus, ps_win, ps_out, ps_table);
    if (*mp) return cmd_make_policy(mp_strategy, mp_model, mp_layers, mp_win, mp_mean, mp_range, mp_manual, mp_seed, mp_out);
  } catch (const lazykv::InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: bad JSON: " << e.what() << "\n";
    return kExitInput;
  } catch (const lazykv::ContractViolation& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return 0;
}
