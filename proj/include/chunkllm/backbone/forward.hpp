// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

// Full-sequence forward passes of the backbone: a graph-recording version for
// training and a plain version that returns a ForwardTrace. Both evaluate the
// same kernels in the same order, so their outputs agree bit for bit.
//
// Block l (pre-norm):
//   h = rmsnorm(x, attn_norm); q,k,v = h W{q,k,v}; rope(q), rope(k)
//   x = x + attention(q, k, v) wo
//   x = x + gelu(rmsnorm(x, mlp_norm) w1) w2
// logits = rmsnorm(x, final_norm) tok_embed^T

#pragma once

#include <numeric>
#include <span>
#include <vector>

#include "chunkllm/backbone/model.hpp"
#include "chunkllm/numerics/graph.hpp"
#include "chunkllm/numerics/kernels.hpp"

namespace chunkllm {

// Per-layer tensors use the concatenated layout [n x n_heads*d_head]; head h
// occupies columns [h*d_head, (h+1)*d_head). head_view() converts to
// [heads x n x d_head].
template <class T>
struct ForwardTrace {
  std::size_t n_tokens = 0;
  std::vector<Tensor<T>> q;          // post-RoPE queries per layer
  std::vector<Tensor<T>> k;          // post-RoPE keys per layer
  std::vector<Tensor<T>> v;          // values per layer
  std::vector<Tensor<T>> attention;  // [heads x n x n] per layer, when captured
  Tensor<T> hidden_l1;               // output of the bottommost block, [n x d]
  Tensor<T> logits;                  // [n x V]
};

template <class T>
Tensor<T> head_view(const Tensor<T>& concat, std::size_t heads) {
  const std::size_t n = concat.dim(0), width = concat.dim(1), dh = width / heads;
  Tensor<T> out({heads, n, dh});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(concat.data() + i * width + h * dh, dh, out.data() + (h * n + i) * dh);
  return out;
}

struct ForwardOptions {
  bool capture_attention = false;
  bool capture_qkv = true;
  bool compute_logits = true;
  std::size_t max_layers = 0;  // > 0 stops after that many blocks (no logits)
};

inline std::vector<std::size_t> iota_positions(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  return p;
}

inline void check_tokens(const ModelConfig& c, std::span<const int> tokens) {
  if (tokens.size() > c.max_context) {
    throw InputError("input of " + std::to_string(tokens.size()) + " tokens exceeds max_context " +
                     std::to_string(c.max_context));
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::uint32_t>(t) >= c.vocab_size) throw IndexError("token id out of vocabulary");
  }
}

template <class T>
ForwardTrace<T> forward_full(const BackboneWeights<T>& w, std::span<const int> tokens, const ForwardOptions& opt = {}) {
  const ModelConfig& c = w.config;
  check_tokens(c, tokens);
  const std::size_t n = tokens.size(), d = c.d_model;
  ForwardTrace<T> tr;
  tr.n_tokens = n;
  if (n == 0) return tr;
  const auto pos = iota_positions(n);

  const Tensor<T>& embed = w.get(names::kEmbed);
  Tensor<T> x({n, d});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(embed.data() + static_cast<std::size_t>(tokens[i]) * d, d, x.data() + i * d);

  const std::size_t layers = opt.max_layers ? std::min<std::size_t>(opt.max_layers, c.n_layers) : c.n_layers;
  for (std::size_t l = 0; l < layers; ++l) {
    Tensor<T> h = kernels::rmsnorm(x, w.layer(l, "attn_norm"));
    Tensor<T> q = kernels::rope_rows(kernels::matmul(h, w.layer(l, "wq")), pos, c.n_heads, c.rope_base);
    Tensor<T> k = kernels::rope_rows(kernels::matmul(h, w.layer(l, "wk")), pos, c.n_heads, c.rope_base);
    Tensor<T> v = kernels::matmul(h, w.layer(l, "wv"));
    Tensor<T> probs;
    Tensor<T> a = kernels::causal_attention(q, k, v, c.n_heads, nullptr, opt.capture_attention ? &probs : nullptr);
    Tensor<T> o = kernels::matmul(a, w.layer(l, "wo"));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += o[i];
    Tensor<T> h2 = kernels::rmsnorm(x, w.layer(l, "mlp_norm"));
    Tensor<T> u = kernels::matmul(h2, w.layer(l, "w1"));
    for (auto& e : u.storage()) e = kernels::gelu(e);
    Tensor<T> m = kernels::matmul(u, w.layer(l, "w2"));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += m[i];

    if (opt.capture_qkv) {
      tr.q.push_back(std::move(q));
      tr.k.push_back(std::move(k));
      tr.v.push_back(std::move(v));
    }
    if (opt.capture_attention) tr.attention.push_back(std::move(probs));
    if (l == 0) tr.hidden_l1 = x;
  }
  if (opt.compute_logits && layers == c.n_layers) {
    tr.logits = kernels::matmul_nt(kernels::rmsnorm(x, w.get(names::kFinalNorm)), embed);
    require_finite(tr.logits, "forward_full logits");
  }
  return tr;
}

// Node ids of a recorded forward pass.
struct LmNodes {
  NodeId logits = 0;
  NodeId hidden_l1 = 0;
  std::vector<NodeId> q, k;
};

// Records the forward pass on g. Backbone tensors are bound as parameters
// named as in the weights, trainable only if `trainable` is set.
template <class T>
LmNodes record_forward(Graph<T>& g, const BackboneWeights<T>& w, std::span<const int> tokens, bool trainable,
                       std::vector<Tensor<T>>* attention_out = nullptr) {
  const ModelConfig& c = w.config;
  check_tokens(c, tokens);
  const std::size_t n = tokens.size();
  if (n == 0) throw InputError("record_forward: empty input");
  const auto pos = iota_positions(n);
  auto bind = [&](const std::string& name) { return g.parameter(name, w.get(name), trainable); };

  LmNodes out;
  const NodeId embed = bind(names::kEmbed);
  NodeId x = ops::embedding(g, embed, std::vector<int>(tokens.begin(), tokens.end()));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    NodeId h = ops::rmsnorm(g, x, bind(names::layer(l, "attn_norm")));
    NodeId q = ops::rope(g, ops::matmul(g, h, bind(names::layer(l, "wq"))), pos, c.n_heads, c.rope_base);
    NodeId k = ops::rope(g, ops::matmul(g, h, bind(names::layer(l, "wk"))), pos, c.n_heads, c.rope_base);
    NodeId v = ops::matmul(g, h, bind(names::layer(l, "wv")));
    Tensor<T> probs;
    NodeId a = ops::attention(g, q, k, v, c.n_heads, attention_out ? &probs : nullptr);
    if (attention_out) attention_out->push_back(std::move(probs));
    x = ops::add(g, x, ops::matmul(g, a, bind(names::layer(l, "wo"))));
    NodeId h2 = ops::rmsnorm(g, x, bind(names::layer(l, "mlp_norm")));
    NodeId u = ops::gelu(g, ops::matmul(g, h2, bind(names::layer(l, "w1"))));
    x = ops::add(g, x, ops::matmul(g, u, bind(names::layer(l, "w2"))));
    out.q.push_back(q);
    out.k.push_back(k);
    if (l == 0) out.hidden_l1 = x;
  }
  NodeId hf = ops::rmsnorm(g, x, bind(names::kFinalNorm));
  out.logits = ops::matmul_nt(g, hf, embed);
  return out;
}

// Next-token cross-entropy of a sequence, optionally weighted per position.
template <class T>
NodeId record_lm_loss(Graph<T>& g, const BackboneWeights<T>& w, std::span<const int> inputs,
                      std::vector<int> targets, std::vector<T> weights = {}) {
  LmNodes nodes = record_forward(g, w, inputs, true);
  return ops::cross_entropy(g, nodes.logits, std::move(targets), std::move(weights));
}

}  // namespace chunkllm
