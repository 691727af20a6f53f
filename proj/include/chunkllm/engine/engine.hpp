// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

// Chunk-sparse decoding over a two-tier KV store.
//
// The cold store keeps every token's K/V; attention for a decoded token runs
// over the active set only:
//   chunked policies:  sink chunks ∪ S ∪ last m completed chunks ∪ open tail
//   full:              every past token
//   streaming:         first s tokens ∪ last w tokens
// S is the global top-k chunk set. Under ICAC it changes only when the token
// just decoded closes a chunk; otherwise the active set grows by the tail
// alone. Positions are absolute and never renumbered.

#pragma once

#include <chrono>
#include <optional>
#include <span>
#include <vector>

#include "chunkllm/backbone/decode.hpp"
#include "chunkllm/backbone/forward.hpp"
#include "chunkllm/chunkattn/chunkattn.hpp"
#include "chunkllm/chunkattn/select.hpp"
#include "chunkllm/chunker/chunk_map.hpp"
#include "chunkllm/chunker/chunker.hpp"
#include "chunkllm/engine/policy.hpp"

namespace chunkllm {

struct MetricsRecord {
  std::size_t step = 0;           // 0 is the prefill
  std::size_t context_len = 0;    // tokens in the cold store after this step
  std::size_t active_tokens = 0;  // tokens attended by this step's query
  double retention = 1;           // active_tokens / context_len
  double ms = 0;                  // wall time of the step
  bool reselected = false;
};

template <class T>
struct DecodeState {
  KvCache<T> cache;                        // cold store
  ChunkMap chunks;                         // completed chunks + open tail
  std::vector<std::vector<T>> kbar;        // per layer: [c x d_a], row-major
  std::vector<std::size_t> selected;       // S, ascending
  std::vector<std::size_t> active_chunks;  // sink ∪ S ∪ local, ascending
  std::vector<TokenRange> chunk_ranges;    // token ranges of active_chunks, merged
  std::vector<T> logits;                   // prediction for the next token
  std::size_t step = 0;
  std::vector<MetricsRecord> log;

  std::size_t context() const { return cache.tokens(); }
};

// Read-only view of the frozen networks an engine decodes with.
template <class T>
struct EngineModel {
  const BackboneWeights<T>* backbone = nullptr;
  const ChunkAdapterParams<T>* chunker = nullptr;  // chunkllm policy only
  const QKAdapterParams<T>* adapters = nullptr;    // chunked policies only
};

template <class T>
class Engine {
 public:
  Engine(EngineModel<T> model, PolicyConfig cfg) : m_(model), cfg_(cfg) {
    if (!m_.backbone) throw ConfigError("engine: no backbone");
    cfg_.validate();
    if (cfg_.chunked()) {
      if (!m_.adapters) throw ConfigError("engine: policy " + to_string(cfg_.policy) + " needs QK adapters");
      if (m_.adapters->layers.size() != m_.backbone->config.n_layers) {
        throw ConfigError("engine: adapter layer count differs from the backbone");
      }
    }
    if (cfg_.policy == Policy::chunkllm) {
      if (!m_.chunker) throw ConfigError("engine: chunkllm policy needs a chunk adapter");
      if (m_.chunker->d_model() != m_.backbone->config.d_model) {
        throw ConfigError("engine: chunk adapter width differs from d_model");
      }
    }
  }

  const PolicyConfig& config() const { return cfg_; }
  const ModelConfig& model_config() const { return m_.backbone->config; }

  // Forward pass whose trace can seed prefill() for any policy.
  ForwardTrace<T> prefill_trace(std::span<const int> prompt) const {
    check_prompt(prompt);
    ForwardOptions o;
    o.capture_qkv = true;
    o.compute_logits = true;
    return forward_full(*m_.backbone, prompt, o);
  }

  DecodeState<T> prefill(std::span<const int> prompt) const { return prefill(prompt, prefill_trace(prompt)); }

  // Full-attention prefill: loads the cold store, labels every prompt token,
  // computes boundary-key features and selects once at the last token.
  DecodeState<T> prefill(std::span<const int> prompt, const ForwardTrace<T>& tr) const {
    const auto t0 = std::chrono::steady_clock::now();
    check_prompt(prompt);
    if (tr.n_tokens != prompt.size() || tr.k.size() != m_.backbone->config.n_layers || tr.logits.rank() != 2) {
      throw ContractError("prefill: trace does not match the prompt");
    }
    const ModelConfig& c = m_.backbone->config;
    const std::size_t n = prompt.size();
    DecodeState<T> st;
    st.cache = make_cache<T>(c, n + 256);
    fill_cache(st.cache, tr);
    st.logits.assign(tr.logits.data() + (n - 1) * c.vocab_size, tr.logits.data() + n * c.vocab_size);

    bool resel = false;
    if (cfg_.chunked()) {
      if (cfg_.policy == Policy::chunkllm) {
        st.chunks = build_chunk_map(predict_boundaries(tr.hidden_l1, *m_.chunker, cfg_.alpha));
      } else {
        st.chunks = fixed_chunk_map(n, cfg_.fixed_chunk_len);
      }
      st.kbar.resize(c.n_layers);
      for (std::size_t l = 0; l < c.n_layers; ++l)
        for (std::size_t b : st.chunks.boundaries()) append_kbar(st, l, tr.k[l].data() + b * c.d_model);
      std::vector<std::vector<T>> q(c.n_layers);
      for (std::size_t l = 0; l < c.n_layers; ++l)
        q[l].assign(tr.q[l].data() + (n - 1) * c.d_model, tr.q[l].data() + n * c.d_model);
      reselect(st, q);
      resel = true;
    }
    MetricsRecord r;
    r.context_len = r.active_tokens = n;
    r.retention = 1.0;
    r.reselected = resel;
    r.ms = ms_since(t0);
    st.log.push_back(r);
    return st;
  }

  // Appends `token` at the next position, attending over the active set, and
  // leaves the logits for the following position in st.logits.
  void feed(DecodeState<T>& st, int token) const {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t pos = st.context();
    const auto ranges = attention_ranges(st, pos);
    std::size_t active = 1;
    for (const auto& r : ranges) active += r.size();
    StepOutput<T> out;
    decode_token(*m_.backbone, st.cache, token, pos, std::span<const TokenRange>(ranges), out);
    st.logits = std::move(out.logits);

    bool resel = false;
    if (cfg_.chunked()) {
      const bool boundary = cfg_.policy == Policy::chunkllm
                                ? static_cast<double>(kernels::sigmoid(chunk_logit(std::span<const T>(out.hidden_l1), *m_.chunker))) > cfg_.alpha
                                : (pos + 1) % cfg_.fixed_chunk_len == 0;
      st.chunks.push(boundary);
      if (boundary) {
        for (std::size_t l = 0; l < st.kbar.size(); ++l) append_kbar(st, l, st.cache.k_row(l, pos).data());
      }
      if (boundary || !cfg_.icac) {
        reselect(st, out.q);
        resel = true;
      }
    }
    ++st.step;
    MetricsRecord r;
    r.step = st.step;
    r.context_len = pos + 1;
    r.active_tokens = active;
    r.retention = static_cast<double>(active) / static_cast<double>(pos + 1);
    r.reselected = resel;
    r.ms = ms_since(t0);
    st.log.push_back(r);
  }

  // Samples from the current logits, feeds the sample and returns it.
  int decode_step(DecodeState<T>& st, TokenSampler& pick) const {
    const int tok = pick(std::span<const T>(st.logits));
    feed(st, tok);
    return tok;
  }

  // Global chunk set for per-layer queries q[l] (concatenated post-RoPE).
  std::vector<std::size_t> select_chunks(const DecodeState<T>& st, const std::vector<std::vector<T>>& q) const {
    const std::size_t c = st.chunks.chunks();
    if (c == 0) return {};
    const std::size_t k = cfg_.k.resolve(c);
    const std::vector<std::vector<T>> scores = chunk_scores(st, q);
    if (cfg_.vote) {
      std::vector<std::span<const T>> spans(scores.begin(), scores.end());
      return vote_topk(spans, k);
    }
    auto s = topk_indices(std::span<const T>(scores.front()), k);
    std::sort(s.begin(), s.end());
    return s;
  }

  // Student scores q̄·k̄_j/sqrt(d_a) over all completed chunks, per layer.
  std::vector<std::vector<T>> chunk_scores(const DecodeState<T>& st, const std::vector<std::vector<T>>& q) const {
    const QKAdapterParams<T>& p = *m_.adapters;
    const std::size_t c = st.chunks.chunks(), da = p.d_a, d = m_.backbone->config.d_model;
    const double scale = 1.0 / std::sqrt(static_cast<double>(da));
    std::vector<std::vector<T>> out(p.layers.size(), std::vector<T>(c));
    std::vector<double> qbar(da);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      const auto& L = p.layers[l];
      for (std::size_t a = 0; a < da; ++a) {
        double s = L.bq[a];
        for (std::size_t e = 0; e < d; ++e) s += static_cast<double>(q[l][e]) * L.wq[e * da + a];
        qbar[a] = s;
      }
      for (std::size_t j = 0; j < c; ++j) {
        const T* kb = st.kbar[l].data() + j * da;
        double s = 0;
        for (std::size_t a = 0; a < da; ++a) s += qbar[a] * static_cast<double>(kb[a]);
        out[l][j] = static_cast<T>(s * scale);
      }
    }
    return out;
  }

  // Past-token ranges the next query attends to (excluding itself).
  std::vector<TokenRange> attention_ranges(const DecodeState<T>& st, std::size_t pos) const {
    switch (cfg_.policy) {
      case Policy::full:
        return pos ? std::vector<TokenRange>{{0, pos}} : std::vector<TokenRange>{};
      case Policy::streaming: {
        // Active: [0, s) ∪ [ctx - w, ctx) with ctx = pos + 1 including the query.
        const std::size_t ctx = pos + 1;
        const std::size_t s = std::min(cfg_.stream_sink_tokens, pos);
        const std::size_t w0 = ctx > cfg_.stream_window_tokens ? ctx - cfg_.stream_window_tokens : 0;
        std::vector<TokenRange> r;
        if (w0 <= s) {
          if (pos) r.push_back({0, pos});
        } else {
          if (s) r.push_back({0, s});
          if (w0 < pos) r.push_back({w0, pos});
        }
        return r;
      }
      case Policy::chunkllm:
      case Policy::fixed_chunk: {
        std::vector<TokenRange> r = st.chunk_ranges;
        const std::size_t tail0 = st.chunks.tail().begin;
        if (tail0 < pos) merge_push(r, {tail0, pos});
        return r;
      }
    }
    return {};
  }

 private:
  void check_prompt(std::span<const int> prompt) const {
    if (prompt.empty()) throw InputError("prefill: empty prompt");
    if (prompt.size() > m_.backbone->config.max_context) {
      throw InputError("prefill: prompt of " + std::to_string(prompt.size()) + " tokens exceeds max_context");
    }
  }

  static double ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }

  static void merge_push(std::vector<TokenRange>& r, TokenRange x) {
    if (!r.empty() && r.back().end == x.begin) {
      r.back().end = x.end;
    } else {
      r.push_back(x);
    }
  }

  void append_kbar(DecodeState<T>& st, std::size_t l, const T* key) const {
    const auto& L = m_.adapters->layers[l];
    const std::size_t da = m_.adapters->d_a, d = m_.backbone->config.d_model;
    for (std::size_t a = 0; a < da; ++a) {
      double s = L.bk[a];
      for (std::size_t e = 0; e < d; ++e) s += static_cast<double>(key[e]) * L.wk[e * da + a];
      st.kbar[l].push_back(static_cast<T>(s));
    }
  }

  void reselect(DecodeState<T>& st, const std::vector<std::vector<T>>& q) const {
    const std::size_t c = st.chunks.chunks();
    st.selected = select_chunks(st, q);
    std::vector<std::uint8_t> on(c, 0);
    for (std::size_t j = 0; j < std::min(cfg_.sink_chunks, c); ++j) on[j] = 1;
    for (std::size_t j : st.selected) on[j] = 1;
    for (std::size_t j = c > cfg_.local_chunks ? c - cfg_.local_chunks : 0; j < c; ++j) on[j] = 1;
    st.active_chunks.clear();
    st.chunk_ranges.clear();
    for (std::size_t j = 0; j < c; ++j) {
      if (!on[j]) continue;
      st.active_chunks.push_back(j);
      merge_push(st.chunk_ranges, st.chunks.chunk(j));
    }
  }

  EngineModel<T> m_;
  PolicyConfig cfg_;
};

template <class T>
struct GenerateResult {
  std::vector<int> tokens;
  std::vector<std::vector<T>> step_logits;  // logits that produced each token
  std::vector<MetricsRecord> log;           // prefill record first
};

template <class T>
GenerateResult<T> generate(const Engine<T>& eng, std::span<const int> prompt, std::size_t n_new,
                           const Sampler& sampler = {}) {
  if (prompt.size() + n_new > eng.model_config().max_context) throw InputError("generate: context overflow");
  GenerateResult<T> res;
  DecodeState<T> st = eng.prefill(prompt);
  TokenSampler pick(sampler);
  for (std::size_t i = 0; i < n_new; ++i) {
    res.step_logits.push_back(st.logits);
    const int tok = pick(std::span<const T>(st.logits));
    res.tokens.push_back(tok);
    if (i + 1 < n_new) eng.feed(st, tok);
  }
  res.log = std::move(st.log);
  return res;
}

}  // namespace chunkllm
