// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

// Policy evaluations: passkey retrieval, simulated-decode perplexity and
// per-token decode latency.

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "chunkllm/corpus/corpus.hpp"
#include "chunkllm/engine/engine.hpp"

namespace chunkllm {

// ---------------------------------------------------------------- passkey

struct PasskeyResult {
  std::string policy;
  std::vector<std::size_t> correct = std::vector<std::size_t>(10, 0);  // per depth decile
  std::vector<std::size_t> total = std::vector<std::size_t>(10, 0);
  double retention_sum = 0;
  std::size_t retention_steps = 0;

  std::size_t n() const {
    std::size_t s = 0;
    for (auto t : total) s += t;
    return s;
  }
  double accuracy() const {
    std::size_t c = 0;
    for (auto x : correct) c += x;
    return n() ? static_cast<double>(c) / static_cast<double>(n()) : 0.0;
  }
  double decile_accuracy(std::size_t d) const {
    return total[d] ? static_cast<double>(correct[d]) / static_cast<double>(total[d]) : 0.0;
  }
  double mean_retention() const { return retention_steps ? retention_sum / static_cast<double>(retention_steps) : 1.0; }
};

inline std::size_t depth_decile(double depth) {
  return std::min<std::size_t>(9, static_cast<std::size_t>(std::max(0.0, depth) * 10.0));
}

// Exact match of the greedy answer. The gold digit is fed after each
// prediction; any wrong argmax already fails the match, so this equals
// free-running greedy decoding while giving every policy the same number
// of decode steps. One full-attention prefill is shared by all engines.
template <class T>
std::vector<PasskeyResult> eval_passkey(const std::vector<const Engine<T>*>& engines,
                                        const std::vector<corpus::PasskeySample>& samples) {
  if (engines.empty()) throw InputError("eval_passkey: no engines");
  std::vector<PasskeyResult> res(engines.size());
  for (std::size_t e = 0; e < engines.size(); ++e) res[e].policy = to_string(engines[e]->config().policy);
  for (const auto& s : samples) {
    const auto prompt = s.prompt();
    if (prompt.size() + s.answer.size() > engines.front()->model_config().max_context) {
      throw InputError("eval_passkey: sample exceeds max_context");
    }
    const ForwardTrace<T> tr = engines.front()->prefill_trace(prompt);
    const std::size_t dec = depth_decile(s.depth);
    for (std::size_t e = 0; e < engines.size(); ++e) {
      DecodeState<T> st = engines[e]->prefill(prompt, tr);
      bool ok = true;
      for (std::size_t j = 0; j < s.answer.size(); ++j) {
        const auto am = std::max_element(st.logits.begin(), st.logits.end()) - st.logits.begin();
        ok = ok && am == s.answer[j];
        if (j + 1 < s.answer.size()) engines[e]->feed(st, s.answer[j]);
      }
      for (std::size_t r = 1; r < st.log.size(); ++r) {
        res[e].retention_sum += st.log[r].retention;
        ++res[e].retention_steps;
      }
      res[e].correct[dec] += ok;
      ++res[e].total[dec];
    }
  }
  return res;
}

inline void write_passkey_csv(const std::string& path, const std::vector<PasskeyResult>& rs) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "policy,decile,n,accuracy\n";
  for (const auto& r : rs) {
    for (std::size_t d = 0; d < 10; ++d) f << r.policy << ',' << d << ',' << r.total[d] << ',' << r.decile_accuracy(d) << '\n';
    f << r.policy << ",all," << r.n() << ',' << r.accuracy() << '\n';
  }
  if (!f) throw IoError("failed writing " + path);
}

// ---------------------------------------------------------------- perplexity

struct PplResult {
  double ppl = 0;
  double mean_nll = 0;
  std::size_t tokens = 0;
  double mean_retention = 1;
};

template <class T>
double nll_of(std::span<const T> logits, int target) {
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : logits) mx = std::max(mx, static_cast<double>(v));
  double z = 0;
  for (T v : logits) z += std::exp(static_cast<double>(v) - mx);
  return mx + std::log(z) - static_cast<double>(logits[static_cast<std::size_t>(target)]);
}

// Teacher-forced NLL where position i+1 is predicted from the policy's active
// set at position i. The first token is the prompt; every later token is fed
// through the engine as in decoding.
template <class T>
PplResult eval_ppl(const Engine<T>& eng, const std::vector<corpus::LabeledDoc>& docs) {
  double nll = 0, ret = 0;
  std::size_t n = 0, steps = 0;
  for (const auto& d : docs) {
    if (d.tokens.size() < 2) continue;
    if (d.tokens.size() > eng.model_config().max_context) throw InputError("eval_ppl: document exceeds max_context");
    DecodeState<T> st = eng.prefill(std::span<const int>(d.tokens.data(), 1));
    st.cache.reserve(d.tokens.size());
    for (std::size_t i = 1; i < d.tokens.size(); ++i) {
      nll += nll_of(std::span<const T>(st.logits), d.tokens[i]);
      ++n;
      if (i + 1 < d.tokens.size()) eng.feed(st, d.tokens[i]);
    }
    for (std::size_t r = 1; r < st.log.size(); ++r) {
      ret += st.log[r].retention;
      ++steps;
    }
  }
  if (n == 0) throw InputError("eval_ppl: no predictable tokens");
  PplResult r;
  r.tokens = n;
  r.mean_nll = nll / static_cast<double>(n);
  r.ppl = std::exp(r.mean_nll);
  r.mean_retention = steps ? ret / static_cast<double>(steps) : 1.0;
  return r;
}

// Same quantity from one full-attention forward pass.
inline PplResult vanilla_ppl(const BackboneWeights<float>& w, const std::vector<corpus::LabeledDoc>& docs) {
  double nll = 0;
  std::size_t n = 0;
  for (const auto& d : docs) {
    if (d.tokens.size() < 2) continue;
    ForwardOptions o;
    o.capture_qkv = false;
    const auto tr = forward_full(w, d.tokens, o);
    const std::size_t V = w.config.vocab_size;
    for (std::size_t i = 0; i + 1 < d.tokens.size(); ++i) {
      nll += nll_of(std::span<const float>(tr.logits.data() + i * V, V), d.tokens[i + 1]);
      ++n;
    }
  }
  if (n == 0) throw InputError("vanilla_ppl: no predictable tokens");
  return {std::exp(nll / static_cast<double>(n)), nll / static_cast<double>(n), n, 1.0};
}

// ---------------------------------------------------------------- latency

struct BenchRow {
  std::string policy;
  std::size_t length = 0;
  double ms_per_token = 0;  // median over repetitions of the mean decode step
  double retention = 1;     // mean over measured steps
};

struct BenchConfig {
  std::size_t new_tokens = 32;
  std::size_t warmup_tokens = 4;
  std::size_t reps = 5;
  std::uint64_t seed = 0;
};

// Synthetic prompt of exactly `length` tokens.
inline std::vector<int> bench_prompt(std::uint64_t seed, std::size_t length) {
  Rng rng(seed, "bench");
  std::vector<int> out;
  while (out.size() < length) {
    auto d = corpus::gen_doc(rng, {std::min<std::size_t>(length, 4096), std::min<std::size_t>(length, 4096)});
    if (!out.empty()) out.push_back(' ');
    out.insert(out.end(), d.tokens.begin(), d.tokens.end());
  }
  out.resize(length);
  return out;
}

template <class T>
std::vector<BenchRow> bench_latency(const std::vector<const Engine<T>*>& engines, const std::vector<std::size_t>& lengths,
                                    const BenchConfig& cfg) {
  if (engines.empty()) throw InputError("bench_latency: no engines");
  if (cfg.reps == 0 || cfg.new_tokens == 0) throw ConfigError("bench_latency: reps and new_tokens must be positive");
  const ModelConfig& mc = engines.front()->model_config();
  for (std::size_t L : lengths) {
    if (L == 0 || L + cfg.warmup_tokens + cfg.new_tokens > mc.max_context) {
      throw ConfigError("bench length " + std::to_string(L) + " does not fit max_context " + std::to_string(mc.max_context));
    }
  }
  std::vector<BenchRow> rows;
  for (std::size_t L : lengths) {
    const auto prompt = bench_prompt(cfg.seed, L);
    const ForwardTrace<T> tr = engines.front()->prefill_trace(prompt);
    for (const auto* eng : engines) {
      std::vector<double> per_rep;
      double ret = 0;
      std::size_t ret_n = 0;
      for (std::size_t rep = 0; rep < cfg.reps; ++rep) {
        DecodeState<T> st = eng->prefill(prompt, tr);
        TokenSampler pick(Sampler::greedy());
        for (std::size_t i = 0; i < cfg.warmup_tokens; ++i) eng->decode_step(st, pick);
        const std::size_t first = st.log.size();
        for (std::size_t i = 0; i < cfg.new_tokens; ++i) eng->decode_step(st, pick);
        double ms = 0;
        for (std::size_t r = first; r < st.log.size(); ++r) {
          ms += st.log[r].ms;
          ret += st.log[r].retention;
          ++ret_n;
        }
        per_rep.push_back(ms / static_cast<double>(cfg.new_tokens));
      }
      std::sort(per_rep.begin(), per_rep.end());
      const std::size_t m = per_rep.size();
      const double median = m % 2 ? per_rep[m / 2] : 0.5 * (per_rep[m / 2 - 1] + per_rep[m / 2]);
      rows.push_back({to_string(eng->config().policy), L, median, ret / static_cast<double>(ret_n)});
    }
  }
  return rows;
}

inline void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "policy,length,ms_per_token,retention\n";
  for (const auto& r : rows) f << r.policy << ',' << r.length << ',' << r.ms_per_token << ',' << r.retention << '\n';
  if (!f) throw IoError("failed writing " + path);
}

// One JSON object per line: {"step","ctx","active","retention","resel","ms"}.
inline void write_step_log_jsonl(const std::string& path, const std::vector<MetricsRecord>& log) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.precision(10);
  for (const auto& r : log) {
    f << "{\"step\":" << r.step << ",\"ctx\":" << r.context_len << ",\"active\":" << r.active_tokens
      << ",\"retention\":" << r.retention << ",\"resel\":" << (r.reselected ? "true" : "false") << ",\"ms\":" << r.ms
      << "}\n";
  }
  if (!f) throw IoError("failed writing " + path);
}

}  // namespace chunkllm
