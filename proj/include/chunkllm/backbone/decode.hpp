// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "chunkllm/backbone/forward.hpp"
#include "chunkllm/numerics/kernels.hpp"
#include "chunkllm/numerics/random.hpp"

namespace chunkllm {

// Half-open token interval [begin, end).
struct TokenRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const TokenRange&) const = default;
};

// Per-layer key/value rows for every processed token, in concatenated head
// layout. Rows are never rewritten once appended.
template <class T>
class KvCache {
 public:
  KvCache() = default;
  KvCache(std::size_t layers, std::size_t width) : width_(width), k_(layers), v_(layers) {}

  std::size_t layers() const { return k_.size(); }
  std::size_t width() const { return width_; }
  std::size_t tokens() const { return tokens_; }

  void reserve(std::size_t n) {
    for (auto& k : k_) k.reserve(n * width_);
    for (auto& v : v_) v.reserve(n * width_);
  }

  const T* k(std::size_t layer) const { return k_[layer].data(); }
  const T* v(std::size_t layer) const { return v_[layer].data(); }
  std::span<const T> k_row(std::size_t layer, std::size_t t) const { return {k_[layer].data() + t * width_, width_}; }
  std::span<const T> v_row(std::size_t layer, std::size_t t) const { return {v_[layer].data() + t * width_, width_}; }

  // Bulk-loads rows computed by a full forward pass.
  void append_rows(std::size_t layer, const Tensor<T>& k, const Tensor<T>& v) {
    k_[layer].insert(k_[layer].end(), k.storage().begin(), k.storage().end());
    v_[layer].insert(v_[layer].end(), v.storage().begin(), v.storage().end());
  }
  void append_row(std::size_t layer, std::span<const T> k, std::span<const T> v) {
    k_[layer].insert(k_[layer].end(), k.begin(), k.end());
    v_[layer].insert(v_[layer].end(), v.begin(), v.end());
  }
  void set_tokens(std::size_t n) { tokens_ = n; }

 private:
  std::size_t width_ = 0;
  std::size_t tokens_ = 0;
  std::vector<std::vector<T>> k_, v_;
};

template <class T>
KvCache<T> make_cache(const ModelConfig& c, std::size_t reserve = 0) {
  KvCache<T> cache(c.n_layers, c.d_model);
  if (reserve) cache.reserve(reserve);
  return cache;
}

// Loads a ForwardTrace's keys and values into an empty cache.
template <class T>
void fill_cache(KvCache<T>& cache, const ForwardTrace<T>& tr) {
  if (cache.tokens() != 0) throw ContractError("fill_cache: cache is not empty");
  for (std::size_t l = 0; l < cache.layers(); ++l) cache.append_rows(l, tr.k[l], tr.v[l]);
  cache.set_tokens(tr.n_tokens);
}

template <class T>
struct StepOutput {
  std::vector<T> logits;             // [V]
  std::vector<T> hidden_l1;          // [d]
  std::vector<std::vector<T>> q;     // post-RoPE query per layer, [d]
};

// Processes one token at absolute position `pos` (== cache.tokens()). Its key
// and value are appended to the cache; attention runs over the cached rows in
// `active` plus the token itself. `active` must be sorted, disjoint and
// within [0, pos).
template <class T>
void decode_token(const BackboneWeights<T>& w, KvCache<T>& cache, int token, std::size_t pos,
                  std::span<const TokenRange> active, StepOutput<T>& out) {
  using Vec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
  using RowMat = kernels::RowMatrix<T>;
  using CMap = Eigen::Map<const RowMat>;
  const ModelConfig& c = w.config;
  if (pos != cache.tokens()) throw ContractError("decode_token: position does not follow the cache");
  if (pos >= c.max_context) throw InputError("decode_token: context overflow at position " + std::to_string(pos));
  if (token < 0 || static_cast<std::uint32_t>(token) >= c.vocab_size) throw IndexError("decode_token: token id");
  const std::size_t d = c.d_model, dh = c.d_head, heads = c.n_heads;
  const auto ed = static_cast<Eigen::Index>(d);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  std::size_t n_active = 1;
  for (const auto& r : active) {
    if (r.end > pos || r.begin > r.end) throw ContractError("decode_token: active range outside the past");
    n_active += r.size();
  }

  const Tensor<T>& embed = w.get(names::kEmbed);
  Tensor<T> x({1, d});
  std::copy_n(embed.data() + static_cast<std::size_t>(token) * d, d, x.data());

  out.q.resize(c.n_layers);
  std::vector<T> scores(n_active);
  Tensor<T> attn({1, d});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    Tensor<T> h = kernels::rmsnorm(x, w.layer(l, "attn_norm"));
    Vec q = h.mat() * w.layer(l, "wq").mat();
    Vec k = h.mat() * w.layer(l, "wk").mat();
    Vec v = h.mat() * w.layer(l, "wv").mat();
    for (std::size_t hh = 0; hh < heads; ++hh) {
      kernels::rope_rotate(q.data() + hh * dh, dh, pos, c.rope_base);
      kernels::rope_rotate(k.data() + hh * dh, dh, pos, c.rope_base);
    }
    cache.append_row(l, std::span<const T>(k.data(), d), std::span<const T>(v.data(), d));
    out.q[l].assign(q.data(), q.data() + d);

    const T* kall = cache.k(l);
    const T* vall = cache.v(l);
    for (std::size_t hh = 0; hh < heads; ++hh) {
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> qh(q.data() + hh * dh, static_cast<Eigen::Index>(dh));
      std::size_t off = 0;
      auto score_range = [&](std::size_t b, std::size_t e) {
        const auto len = static_cast<Eigen::Index>(e - b);
        Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> kb(kall + b * d + hh * dh, len,
                                                              static_cast<Eigen::Index>(dh), Eigen::OuterStride<>(ed));
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> sb(scores.data() + off, len);
        sb.noalias() = kb * qh;
        off += e - b;
      };
      for (const auto& r : active) score_range(r.begin, r.end);
      score_range(pos, pos + 1);
      T mx = -std::numeric_limits<T>::infinity();
      for (auto& s : scores) {
        s *= scale;
        mx = std::max(mx, s);
      }
      T sum = 0;
      for (auto& s : scores) {
        s = std::exp(s - mx);
        sum += s;
      }
      const T inv = T{1} / sum;
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> oh(attn.data() + hh * dh, static_cast<Eigen::Index>(dh));
      oh.setZero();
      off = 0;
      auto mix_range = [&](std::size_t b, std::size_t e) {
        const auto len = static_cast<Eigen::Index>(e - b);
        Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> vb(vall + b * d + hh * dh, len,
                                                              static_cast<Eigen::Index>(dh), Eigen::OuterStride<>(ed));
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> pb(scores.data() + off, len);
        oh.noalias() += vb.transpose() * pb;
        off += e - b;
      };
      for (const auto& r : active) mix_range(r.begin, r.end);
      mix_range(pos, pos + 1);
      oh *= inv;
    }
    x.mat().noalias() += attn.mat() * w.layer(l, "wo").mat();
    Tensor<T> h2 = kernels::rmsnorm(x, w.layer(l, "mlp_norm"));
    Vec u = h2.mat() * w.layer(l, "w1").mat();
    for (Eigen::Index i = 0; i < u.size(); ++i) u[i] = kernels::gelu(u[i]);
    x.mat().noalias() += u * w.layer(l, "w2").mat();
    if (l == 0) out.hidden_l1.assign(x.data(), x.data() + d);
  }
  cache.set_tokens(pos + 1);
  Tensor<T> hf = kernels::rmsnorm(x, w.get(names::kFinalNorm));
  out.logits.resize(c.vocab_size);
  Eigen::Map<Vec> lg(out.logits.data(), static_cast<Eigen::Index>(c.vocab_size));
  lg.noalias() = hf.mat() * embed.mat().transpose();
  for (T vlog : out.logits) {
    if (!std::isfinite(vlog)) throw DomainError("decode_token: non-finite logits");
  }
}

struct Sampler {
  enum class Kind { greedy, temperature };
  Kind kind = Kind::greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  static Sampler greedy() { return {}; }
  static Sampler with_temperature(double t, std::uint64_t seed) { return {Kind::temperature, t, seed}; }
};

// Stateful sampling; greedy ties resolve to the lowest token id.
class TokenSampler {
 public:
  explicit TokenSampler(const Sampler& s) : cfg_(s), rng_(s.seed, "sample") {}

  template <class T>
  int operator()(std::span<const T> logits) {
    if (cfg_.kind == Sampler::Kind::greedy || cfg_.temperature <= 0) {
      return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }
    double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double sum = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = std::exp((logits[i] - mx) / cfg_.temperature);
      sum += p[i];
    }
    double u = rng_.uniform() * sum;
    for (std::size_t i = 0; i < p.size(); ++i) {
      u -= p[i];
      if (u <= 0) return static_cast<int>(i);
    }
    return static_cast<int>(p.size() - 1);
  }

 private:
  Sampler cfg_;
  Rng rng_;
};

template <class T>
struct VanillaResult {
  std::vector<int> tokens;
  std::vector<std::vector<T>> step_logits;  // logits that produced each new token
};

// Full-attention incremental decoding with an uncompressed KV cache. The
// prompt is processed token by token through the same decode kernel.
template <class T>
VanillaResult<T> generate_vanilla(const BackboneWeights<T>& w, std::span<const int> prompt, std::size_t n_new,
                                  const Sampler& sampler = {}) {
  if (prompt.empty()) throw InputError("generate_vanilla: empty prompt");
  if (prompt.size() + n_new > w.config.max_context) throw InputError("generate_vanilla: context overflow");
  VanillaResult<T> res;
  if (n_new == 0) return res;
  KvCache<T> cache = make_cache<T>(w.config, prompt.size() + n_new);
  StepOutput<T> step;
  std::vector<TokenRange> all(1);
  TokenSampler pick(sampler);
  int next = prompt[0];
  for (std::size_t pos = 0; pos + 1 < prompt.size() + n_new; ++pos) {
    const int tok = pos < prompt.size() ? prompt[pos] : next;
    all[0] = {0, pos};
    decode_token(w, cache, tok, pos, std::span<const TokenRange>(all.data(), pos ? 1 : 0), step);
    if (pos + 1 >= prompt.size()) {
      next = pick(std::span<const T>(step.logits));
      res.tokens.push_back(next);
      res.step_logits.push_back(step.logits);
    }
  }
  return res;
}

}  // namespace chunkllm
