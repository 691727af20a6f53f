// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

// Chunk Adapter: a single affine unit over the bottommost block's output,
// sigmoid(H W + b) > alpha, trained with class-weighted BCE while the
// backbone stays frozen.

#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "chunkllm/backbone/forward.hpp"
#include "chunkllm/backbone/pretrain.hpp"
#include "chunkllm/chunker/chunk_map.hpp"
#include "chunkllm/corpus/corpus.hpp"
#include "chunkllm/numerics/adam.hpp"
#include "chunkllm/numerics/graph.hpp"

namespace chunkllm {

namespace names {
inline constexpr const char* kChunkWeight = "chunk_adapter.weight";
inline constexpr const char* kChunkBias = "chunk_adapter.bias";
}  // namespace names

inline constexpr double kDefaultAlpha = 0.5;

template <class T>
struct ChunkAdapterParams {
  Tensor<T> weight;  // [d_model x 1]
  Tensor<T> bias;    // [1]

  static ChunkAdapterParams zeros(std::size_t d_model) { return {Tensor<T>({d_model, 1}), Tensor<T>({1})}; }

  std::size_t d_model() const { return weight.dim(0); }

  void store(ParamMap<T>& tensors) const {
    tensors[names::kChunkWeight] = weight;
    tensors[names::kChunkBias] = bias;
  }
  static ChunkAdapterParams load(const ParamMap<T>& tensors) {
    auto w = tensors.find(names::kChunkWeight);
    auto b = tensors.find(names::kChunkBias);
    if (w == tensors.end() || b == tensors.end()) throw FormatError("checkpoint lacks chunk adapter tensors");
    if (w->second.rank() != 2 || w->second.dim(1) != 1 || b->second.size() != 1) {
      throw FormatError("chunk adapter tensors have unexpected shapes");
    }
    return {w->second, b->second};
  }
};

// Boundary logit of a single hidden state row.
template <class T>
T chunk_logit(std::span<const T> h, const ChunkAdapterParams<T>& p) {
  if (h.size() != p.d_model()) throw DimensionError("chunk adapter: hidden width differs from d_model");
  double z = p.bias[0];
  for (std::size_t j = 0; j < h.size(); ++j) z += static_cast<double>(h[j]) * p.weight[j];
  return static_cast<T>(z);
}

template <class T>
std::vector<T> chunk_probs(const Tensor<T>& h, const ChunkAdapterParams<T>& p) {
  require_rank(h, 2, "chunk adapter input");
  if (h.dim(1) != p.d_model()) throw DimensionError("chunk adapter: hidden width differs from d_model");
  std::vector<T> out(h.dim(0));
  for (std::size_t i = 0; i < h.dim(0); ++i) {
    out[i] = kernels::sigmoid(chunk_logit(std::span<const T>(h.data() + i * h.dim(1), h.dim(1)), p));
  }
  return out;
}

inline void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("alpha must lie in (0, 1)");
}

// y_i = 1 iff sigmoid(H_i W + b) > alpha (strict).
template <class T>
std::vector<std::uint8_t> predict_boundaries(const Tensor<T>& h, const ChunkAdapterParams<T>& p,
                                             double alpha = kDefaultAlpha) {
  check_alpha(alpha);
  std::vector<std::uint8_t> y;
  for (T prob : chunk_probs(h, p)) y.push_back(static_cast<double>(prob) > alpha ? 1 : 0);
  return y;
}

// Output of the bottommost block for a token sequence.
template <class T>
Tensor<T> hidden_l1(const BackboneWeights<T>& w, std::span<const int> tokens) {
  ForwardOptions opt;
  opt.capture_qkv = false;
  opt.compute_logits = false;
  opt.max_layers = 1;
  return forward_full(w, tokens, opt).hidden_l1;
}

struct BoundaryMetrics {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  std::size_t tp = 0, fp = 0, fn = 0;
};

// Token-level P/R/F1 over the positive class. Empty denominators give 0.
inline BoundaryMetrics eval_boundary_metrics(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gold) {
  if (pred.size() != gold.size()) throw InputError("eval_boundary_metrics: length mismatch");
  BoundaryMetrics m;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    m.tp += pred[i] && gold[i];
    m.fp += pred[i] && !gold[i];
    m.fn += !pred[i] && gold[i];
  }
  m.precision = m.tp + m.fp ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp) : 0.0;
  m.recall = m.tp + m.fn ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 0.0;
  m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

// Baseline: every '.' is a boundary.
inline std::vector<std::uint8_t> naive_period_rule(std::span<const int> tokens) {
  std::vector<std::uint8_t> y(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) y[i] = tokens[i] == '.';
  return y;
}

struct ChunkerTrainConfig {
  std::size_t steps = 600;
  std::size_t batch = 4;      // sequences per step
  double lr = 1e-2;
  std::size_t warmup = 20;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.99;
};

struct ChunkerExample {
  Tensor<float> hidden;  // [n x d]
  Tensor<float> labels;  // [n x 1]
};

struct ChunkerTrainResult {
  ChunkAdapterParams<float> params;
  std::vector<LossPoint> curve;
  double pos_weight = 1;
};

// Layer-1 features and rule labels for each sequence. The backbone is only
// read.
inline std::vector<ChunkerExample> chunker_features(const BackboneWeights<float>& w,
                                                    const std::vector<corpus::LabeledDoc>& docs) {
  std::vector<ChunkerExample> out;
  out.reserve(docs.size());
  for (const auto& d : docs) {
    ChunkerExample ex;
    ex.hidden = hidden_l1(w, d.tokens);
    ex.labels = Tensor<float>({d.labels.size(), 1});
    for (std::size_t i = 0; i < d.labels.size(); ++i) ex.labels[i] = d.labels[i];
    out.push_back(std::move(ex));
  }
  return out;
}

// negatives / positives over the whole training set.
inline double positive_class_weight(const std::vector<ChunkerExample>& data) {
  double pos = 0, total = 0;
  for (const auto& ex : data) {
    for (float y : ex.labels.storage()) pos += y;
    total += static_cast<double>(ex.labels.size());
  }
  if (pos == 0) throw InputError("chunker training data has no boundaries");
  return (total - pos) / pos;
}

// Adam on the adapter only; features are constants, so no gradient reaches
// the backbone. Step s uses examples [s*batch, (s+1)*batch) mod |data|.
inline ChunkerTrainResult train_chunker(const std::vector<ChunkerExample>& data, std::size_t d_model,
                                        const ChunkerTrainConfig& cfg, const StepCallback& on_step = {}) {
  if (data.empty()) throw InputError("train_chunker: no training data");
  ChunkerTrainResult res;
  res.params = ChunkAdapterParams<float>::zeros(d_model);
  res.pos_weight = positive_class_weight(data);
  AdamState<float> state(AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    ParamMap<float> grads;
    double loss = 0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const ChunkerExample& ex = data[(step * cfg.batch + b) % data.size()];
      Graph<float> g;
      const NodeId wn = g.parameter(names::kChunkWeight, res.params.weight);
      const NodeId bn = g.parameter(names::kChunkBias, res.params.bias);
      const NodeId z = ops::add_bias(g, ops::matmul(g, g.constant(ex.hidden), wn), bn);
      const NodeId l = ops::bce_with_logits(g, z, ex.labels, static_cast<float>(res.pos_weight));
      g.backward(l);
      loss += g.value(l)[0];
      accumulate_grads(grads, g.parameter_grads());
    }
    scale_grads(grads, 1.0f / static_cast<float>(cfg.batch));
    clip_grad_norm(grads, cfg.clip_norm);
    ParamMap<float> params{{names::kChunkWeight, res.params.weight}, {names::kChunkBias, res.params.bias}};
    adam_step(params, grads, state, cosine_lr(cfg.lr, step, cfg.steps, cfg.warmup));
    res.params.weight = params.at(names::kChunkWeight);
    res.params.bias = params.at(names::kChunkBias);
    LossPoint p{step, loss / static_cast<double>(cfg.batch)};
    res.curve.push_back(p);
    if (on_step) on_step(p);
  }
  return res;
}

// Predicted vs rule labels pooled over documents; also returns the mean
// unweighted BCE of the adapter probabilities.
struct BoundaryEval {
  BoundaryMetrics metrics;
  BoundaryMetrics naive;
  double bce = 0;
};

inline BoundaryEval evaluate_chunker(const BackboneWeights<float>& w, const ChunkAdapterParams<float>& p,
                                     const std::vector<corpus::LabeledDoc>& docs, double alpha = kDefaultAlpha) {
  std::vector<std::uint8_t> pred, gold, naive;
  double bce_sum = 0;
  std::size_t n = 0;
  for (const auto& d : docs) {
    const Tensor<float> h = hidden_l1(w, d.tokens);
    const auto y = predict_boundaries(h, p, alpha);
    pred.insert(pred.end(), y.begin(), y.end());
    gold.insert(gold.end(), d.labels.begin(), d.labels.end());
    const auto nv = naive_period_rule(d.tokens);
    naive.insert(naive.end(), nv.begin(), nv.end());
    const auto probs = chunk_probs(h, p);
    Tensor<double> pt({probs.size()}), yt({probs.size()});
    for (std::size_t i = 0; i < probs.size(); ++i) {
      pt[i] = probs[i];
      yt[i] = d.labels[i];
    }
    bce_sum += kernels::bce_loss(pt, yt) * static_cast<double>(probs.size());
    n += probs.size();
  }
  BoundaryEval e;
  e.metrics = eval_boundary_metrics(pred, gold);
  e.naive = eval_boundary_metrics(naive, gold);
  e.bce = n ? bce_sum / static_cast<double>(n) : 0.0;
  return e;
}

}  // namespace chunkllm
