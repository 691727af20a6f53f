// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

// QK adapters and chunk-attention distillation.
//
// For layer l the student scores token i against completed chunk j as
//   (q_i Wq + bq) . (k_{b_j} Wk + bk) / sqrt(d_a)
// where q_i is token i's concatenated post-RoPE query and k_{b_j} is the
// concatenated post-RoPE key of chunk j's boundary token. The teacher is the
// backbone's own attention, averaged over heads and summed within chunks.
//
// Chunk j is visible to row i iff b_j <= i. A row is valid iff at least two
// chunks are visible. Teacher mass on the open tail is dropped and the row
// renormalized, so both sides are distributions over the same support.

#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "chunkllm/backbone/forward.hpp"
#include "chunkllm/backbone/pretrain.hpp"
#include "chunkllm/chunkattn/select.hpp"
#include "chunkllm/chunker/chunk_map.hpp"
#include "chunkllm/corpus/corpus.hpp"
#include "chunkllm/numerics/adam.hpp"
#include "chunkllm/numerics/graph.hpp"

namespace chunkllm {

namespace names {
// Adapter layers are numbered from 1.
inline std::string qk(std::size_t layer, const char* leaf) {
  return "qk_adapter.L" + std::to_string(layer + 1) + "." + leaf;
}
}  // namespace names

template <class T>
struct QKAdapterParams {
  struct Layer {
    Tensor<T> wq, bq, wk, bk;  // [d x d_a], [d_a], [d x d_a], [d_a]
  };
  std::size_t d_a = 0;
  std::vector<Layer> layers;

  // Weights ~ N(0, 1/d_model), biases zero.
  static QKAdapterParams init(const ModelConfig& c, std::size_t d_a, std::uint64_t seed) {
    if (d_a == 0) throw ConfigError("adapter width must be positive");
    QKAdapterParams p;
    p.d_a = d_a;
    Rng rng(seed, "qk_adapter");
    const double sd = 1.0 / std::sqrt(static_cast<double>(c.d_model));
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      Layer L;
      L.wq = rng.normal_tensor<T>({c.d_model, d_a}, sd);
      L.bq = Tensor<T>({d_a});
      L.wk = rng.normal_tensor<T>({c.d_model, d_a}, sd);
      L.bk = Tensor<T>({d_a});
      p.layers.push_back(std::move(L));
    }
    return p;
  }

  void store(ParamMap<T>& out) const {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      out[names::qk(l, "wq")] = layers[l].wq;
      out[names::qk(l, "bq")] = layers[l].bq;
      out[names::qk(l, "wk")] = layers[l].wk;
      out[names::qk(l, "bk")] = layers[l].bk;
    }
  }
  ParamMap<T> to_map() const {
    ParamMap<T> m;
    store(m);
    return m;
  }

  static QKAdapterParams load(const ParamMap<T>& in, const ModelConfig& c) {
    QKAdapterParams p;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      auto get = [&](const char* leaf) -> const Tensor<T>& {
        auto it = in.find(names::qk(l, leaf));
        if (it == in.end()) throw FormatError("checkpoint lacks " + names::qk(l, leaf));
        return it->second;
      };
      Layer L{get("wq"), get("bq"), get("wk"), get("bk")};
      if (L.wq.rank() != 2 || L.wq.dim(0) != c.d_model || L.wk.shape() != L.wq.shape() ||
          L.bq.shape() != Shape{L.wq.dim(1)} || L.bk.shape() != Shape{L.wq.dim(1)}) {
        throw FormatError("qk adapter tensors for layer " + std::to_string(l + 1) + " have inconsistent shapes");
      }
      if (l == 0) p.d_a = L.wq.dim(1);
      if (L.wq.dim(1) != p.d_a) throw FormatError("qk adapter width differs across layers");
      p.layers.push_back(std::move(L));
    }
    return p;
  }

  template <class U>
  QKAdapterParams<U> cast() const {
    QKAdapterParams<U> o;
    o.d_a = d_a;
    for (const auto& L : layers) {
      o.layers.push_back({L.wq.template cast<U>(), L.bq.template cast<U>(), L.wk.template cast<U>(),
                          L.bk.template cast<U>()});
    }
    return o;
  }
};

template <class T>
bool has_qk_adapters(const ParamMap<T>& m) {
  return m.count(names::qk(0, "wq")) != 0;
}

// ---------------------------------------------------------------- compress

template <class T>
Tensor<T> affine_rows(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  Tensor<T> y = kernels::matmul(x, w);
  const std::size_t n = y.dim(0), m = y.dim(1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) y[i * m + j] += b[j];
  return y;
}

template <class T>
Tensor<T> gather_boundary_rows(const Tensor<T>& x, const ChunkMap& cm) {
  const std::size_t d = x.dim(1);
  Tensor<T> out({cm.chunks(), d});
  for (std::size_t j = 0; j < cm.chunks(); ++j) std::copy_n(x.data() + cm.boundary(j) * d, d, out.data() + j * d);
  return out;
}

template <class T>
struct Compressed {
  Tensor<T> qbar;  // [n x d_a]
  Tensor<T> kbar;  // [c x d_a]
};

template <class T>
Compressed<T> compress_inputs(const ForwardTrace<T>& tr, const ChunkMap& cm, const QKAdapterParams<T>& p,
                              std::size_t layer) {
  if (layer >= tr.q.size() || layer >= p.layers.size()) throw IndexError("compress_inputs: layer out of range");
  if (cm.n_tokens() != tr.n_tokens) throw DimensionError("compress_inputs: chunk map covers a different length");
  const auto& L = p.layers[layer];
  return {affine_rows(tr.q[layer], L.wq, L.bq), affine_rows(gather_boundary_rows(tr.k[layer], cm), L.wk, L.bk)};
}

// ---------------------------------------------------------------- chunk attention

template <class T>
struct ChunkAttention {
  Tensor<T> probs;                  // [n x c]; invalid rows and invisible chunks are 0
  std::vector<std::uint8_t> valid;  // per row
};

inline std::vector<std::uint8_t> valid_rows(const ChunkMap& cm) {
  std::vector<std::uint8_t> v(cm.n_tokens(), 0);
  for (std::size_t i = 0; i < cm.n_tokens(); ++i) v[i] = cm.visible(i) >= 2;
  return v;
}

// Rows that are valid form the suffix starting here (n if none).
inline std::size_t first_valid_row(const ChunkMap& cm) { return cm.chunks() >= 2 ? cm.boundary(1) : cm.n_tokens(); }

template <class T>
ChunkAttention<T> student_attention(const Tensor<T>& qbar, const Tensor<T>& kbar, const ChunkMap& cm) {
  const std::size_t n = cm.n_tokens(), c = cm.chunks();
  if (qbar.dim(0) != n || kbar.dim(0) != c) throw DimensionError("student_attention: shapes disagree with chunk map");
  if (c > 0 && qbar.dim(1) != kbar.dim(1)) throw DimensionError("student_attention: adapter widths differ");
  ChunkAttention<T> out{Tensor<T>({n, c}), valid_rows(cm)};
  if (c == 0) return out;
  const Tensor<T> logits = kernels::matmul_nt(qbar, kbar);
  const double scale = 1.0 / std::sqrt(static_cast<double>(qbar.dim(1)));
  for (std::size_t i = first_valid_row(cm); i < n; ++i) {
    const std::size_t vis = cm.visible(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < vis; ++j) mx = std::max(mx, scale * logits.at(i, j));
    double z = 0;
    for (std::size_t j = 0; j < vis; ++j) z += std::exp(scale * logits.at(i, j) - mx);
    for (std::size_t j = 0; j < vis; ++j) out.probs.at(i, j) = static_cast<T>(std::exp(scale * logits.at(i, j) - mx) / z);
  }
  return out;
}

// Head-averaged attention of row i summed within each visible chunk, plus
// the remaining (open-tail) mass, before renormalization.
template <class T>
struct TeacherMass {
  Tensor<double> chunk;      // [n x c]
  std::vector<double> tail;  // [n]
};

template <class T>
TeacherMass<T> aggregate_teacher_mass(const Tensor<T>& a, const ChunkMap& cm) {
  require_rank(a, 3, "aggregate_teacher");
  const std::size_t h = a.dim(0), n = a.dim(1), c = cm.chunks();
  if (a.dim(2) != n || n != cm.n_tokens()) throw DimensionError("aggregate_teacher: attention does not match chunk map");
  TeacherMass<T> m{Tensor<double>({n, c}), std::vector<double>(n, 0.0)};
  std::vector<double> avg(n);
  const double inv_h = 1.0 / static_cast<double>(h);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill_n(avg.begin(), i + 1, 0.0);
    for (std::size_t hh = 0; hh < h; ++hh) {
      const T* row = a.data() + (hh * n + i) * n;
      for (std::size_t t = 0; t <= i; ++t) avg[t] += static_cast<double>(row[t]);
    }
    const std::size_t vis = cm.visible(i);
    std::size_t t = 0;
    for (std::size_t j = 0; j < vis; ++j) {
      double s = 0;
      for (const std::size_t end = cm.boundary(j); t <= end; ++t) s += avg[t];
      m.chunk.at(i, j) = s * inv_h;
    }
    double tail = 0;
    for (; t <= i; ++t) tail += avg[t];
    m.tail[i] = tail * inv_h;
  }
  return m;
}

template <class T>
ChunkAttention<T> aggregate_teacher(const Tensor<T>& a, const ChunkMap& cm) {
  const TeacherMass<T> m = aggregate_teacher_mass(a, cm);
  const std::size_t n = cm.n_tokens(), c = cm.chunks();
  ChunkAttention<T> out{Tensor<T>({n, c}), valid_rows(cm)};
  for (std::size_t i = first_valid_row(cm); i < n; ++i) {
    const std::size_t vis = cm.visible(i);
    double s = 0;
    for (std::size_t j = 0; j < vis; ++j) s += m.chunk.at(i, j);
    if (!(s > 0)) throw DomainError("aggregate_teacher: no attention mass on completed chunks");
    for (std::size_t j = 0; j < vis; ++j) out.probs.at(i, j) = static_cast<T>(m.chunk.at(i, j) / s);
  }
  return out;
}

// Per layer: mean KL(teacher || student) over valid rows; total: mean over
// layers that have valid rows.
template <class T>
T distill_loss(const std::vector<ChunkAttention<T>>& teacher, const std::vector<ChunkAttention<T>>& student) {
  if (teacher.size() != student.size()) throw DimensionError("distill_loss: layer counts differ");
  double total = 0;
  std::size_t layers = 0;
  for (std::size_t l = 0; l < teacher.size(); ++l) {
    if (teacher[l].valid != student[l].valid) throw ContractError("distill_loss: validity masks differ");
    if (kernels::count_rows<T>(teacher[l].valid) == 0) continue;
    total += kernels::kl_div_rows(teacher[l].probs, student[l].probs, teacher[l].valid);
    ++layers;
  }
  if (layers == 0) throw DomainError("distill_loss: no valid rows in any layer");
  return static_cast<T>(total / static_cast<double>(layers));
}

// Teacher and student chunk attention for every layer of a trace. The trace
// must carry attention for the teacher.
template <class T>
std::vector<ChunkAttention<T>> teacher_layers(const ForwardTrace<T>& tr, const ChunkMap& cm) {
  if (tr.attention.size() != tr.q.size()) throw ContractError("teacher_layers: trace lacks attention");
  std::vector<ChunkAttention<T>> out;
  for (const auto& a : tr.attention) out.push_back(aggregate_teacher(a, cm));
  return out;
}

template <class T>
std::vector<ChunkAttention<T>> student_layers(const ForwardTrace<T>& tr, const ChunkMap& cm,
                                              const QKAdapterParams<T>& p) {
  std::vector<ChunkAttention<T>> out;
  for (std::size_t l = 0; l < tr.q.size(); ++l) {
    const auto x = compress_inputs(tr, cm, p, l);
    out.push_back(student_attention(x.qbar, x.kbar, cm));
  }
  return out;
}

// ---------------------------------------------------------------- training graph

// Constant inputs of the distillation loss for one sequence, restricted to
// valid rows.
template <class T>
struct DistillExample {
  struct Layer {
    Tensor<T> q;        // [m x d] queries of valid rows
    Tensor<T> k;        // [c x d] boundary keys
    Tensor<T> teacher;  // [m x c]
  };
  std::vector<Layer> layers;
  std::shared_ptr<const kernels::Mask> mask;  // [m x c] visibility
  std::size_t rows() const { return layers.empty() ? 0 : layers.front().q.dim(0); }
};

template <class T>
DistillExample<T> make_distill_example(const ForwardTrace<T>& tr, const ChunkMap& cm) {
  DistillExample<T> ex;
  const std::size_t n = cm.n_tokens(), c = cm.chunks(), first = first_valid_row(cm);
  if (first >= n) return ex;
  const std::size_t m = n - first;
  auto mask = std::make_shared<kernels::Mask>(m, c, 0);
  for (std::size_t r = 0; r < m; ++r) std::fill_n(mask->keep.begin() + static_cast<std::ptrdiff_t>(r * c), cm.visible(first + r), 1);
  ex.mask = mask;
  const auto teachers = teacher_layers(tr, cm);
  for (std::size_t l = 0; l < tr.q.size(); ++l) {
    typename DistillExample<T>::Layer L;
    const std::size_t d = tr.q[l].dim(1);
    L.q = Tensor<T>({m, d});
    std::copy_n(tr.q[l].data() + first * d, m * d, L.q.data());
    L.k = gather_boundary_rows(tr.k[l], cm);
    L.teacher = Tensor<T>({m, c});
    std::copy_n(teachers[l].probs.data() + first * c, m * c, L.teacher.data());
    ex.layers.push_back(std::move(L));
  }
  return ex;
}

// Records the distillation loss with the adapter tensors in `params` bound
// as trainable parameters.
template <class T>
NodeId record_distill_loss(Graph<T>& g, const DistillExample<T>& ex, const ParamMap<T>& params) {
  if (ex.rows() == 0) throw DomainError("distill loss: example has no valid rows");
  std::vector<NodeId> per_layer;
  for (std::size_t l = 0; l < ex.layers.size(); ++l) {
    const auto& L = ex.layers[l];
    auto bind = [&](const char* leaf) { return g.parameter(names::qk(l, leaf), params.at(names::qk(l, leaf))); };
    const NodeId wq = bind("wq"), bq = bind("bq"), wk = bind("wk"), bk = bind("bk");
    const std::size_t d_a = g.value(wq).dim(1);
    const NodeId qbar = ops::add_bias(g, ops::matmul(g, g.constant(L.q), wq), bq);
    const NodeId kbar = ops::add_bias(g, ops::matmul(g, g.constant(L.k), wk), bk);
    const NodeId logits = ops::scale(g, ops::matmul_nt(g, qbar, kbar), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d_a))));
    const NodeId student = ops::softmax_rows(g, logits, ex.mask);
    per_layer.push_back(ops::kl_div_rows(g, g.constant(L.teacher), student, std::vector<std::uint8_t>(ex.rows(), 1)));
  }
  NodeId total = per_layer.front();
  for (std::size_t l = 1; l < per_layer.size(); ++l) total = ops::add(g, total, per_layer[l]);
  return ops::scale(g, total, static_cast<T>(1.0 / static_cast<double>(per_layer.size())));
}

struct AdapterTrainConfig {
  std::size_t steps = 3000;
  std::size_t batch = 1;
  double lr = 3e-4;
  std::size_t warmup = 100;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.99;
};

using DocSource = std::function<std::vector<corpus::LabeledDoc>(std::size_t step)>;

struct AdapterTrainResult {
  QKAdapterParams<float> params;
  std::vector<LossPoint> curve;
};

inline ForwardOptions teacher_forward_options() {
  ForwardOptions o;
  o.capture_attention = true;
  o.capture_qkv = true;
  o.compute_logits = false;
  return o;
}

// Adam on L_AD over the QK adapters only. Chunk maps come from the docs'
// rule labels; teacher tensors are constants.
inline AdapterTrainResult train_adapters(const BackboneWeights<float>& w, QKAdapterParams<float> init,
                                         const DocSource& source, const AdapterTrainConfig& cfg,
                                         const StepCallback& on_step = {}) {
  AdapterTrainResult res;
  ParamMap<float> params = init.to_map();
  AdamState<float> state(AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto docs = source(step);
    ParamMap<float> grads;
    double loss = 0;
    std::size_t used = 0;
    for (const auto& d : docs) {
      const auto tr = forward_full(w, d.tokens, teacher_forward_options());
      const auto ex = make_distill_example(tr, build_chunk_map(d.labels));
      if (ex.rows() == 0) continue;
      Graph<float> g;
      const NodeId l = record_distill_loss(g, ex, params);
      g.backward(l);
      loss += g.value(l)[0];
      accumulate_grads(grads, g.parameter_grads());
      ++used;
    }
    if (used == 0) throw InputError("train_adapters: batch has no sequence with two or more chunks");
    scale_grads(grads, 1.0f / static_cast<float>(used));
    clip_grad_norm(grads, cfg.clip_norm);
    adam_step(params, grads, state, cosine_lr(cfg.lr, step, cfg.steps, cfg.warmup));
    LossPoint p{step, loss / static_cast<double>(used)};
    res.curve.push_back(p);
    if (on_step) on_step(p);
  }
  ModelConfig shape = w.config;
  res.params = QKAdapterParams<float>::load(params, shape);
  return res;
}

// ---------------------------------------------------------------- recall

struct RecallResult {
  std::vector<double> per_layer;  // mean over rows of |topk(s) & topk(t)| / k
  double voted = 0;               // same for the vote-aggregated sets
  double baseline = 0;            // mean k / c: expected recall of a random choice
  std::size_t rows = 0;
};

// Recall over valid rows; k resolves per row from that row's visible chunk
// count.
template <class T>
RecallResult chunk_recall(const std::vector<ChunkAttention<T>>& student, const std::vector<ChunkAttention<T>>& teacher,
                          const ChunkMap& cm, const KSpec& kspec) {
  const std::size_t L = student.size();
  if (teacher.size() != L || L == 0) throw DimensionError("chunk_recall: layer counts differ");
  RecallResult r;
  r.per_layer.assign(L, 0.0);
  const std::size_t c = cm.chunks();
  auto overlap = [](std::vector<std::size_t> a, std::vector<std::size_t> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<std::size_t> both;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
    return both.size();
  };
  for (std::size_t i = first_valid_row(cm); i < cm.n_tokens(); ++i) {
    const std::size_t vis = cm.visible(i);
    const std::size_t k = kspec.resolve(vis);
    std::vector<std::span<const T>> ss, ts;
    for (std::size_t l = 0; l < L; ++l) {
      std::span<const T> s(student[l].probs.data() + i * c, vis), t(teacher[l].probs.data() + i * c, vis);
      ss.push_back(s);
      ts.push_back(t);
      r.per_layer[l] += static_cast<double>(overlap(topk_indices(s, k), topk_indices(t, k))) / static_cast<double>(k);
    }
    r.voted += static_cast<double>(overlap(vote_topk(ss, k), vote_topk(ts, k))) / static_cast<double>(k);
    r.baseline += static_cast<double>(k) / static_cast<double>(vis);
    ++r.rows;
  }
  if (r.rows) {
    for (auto& v : r.per_layer) v /= static_cast<double>(r.rows);
    r.voted /= static_cast<double>(r.rows);
    r.baseline /= static_cast<double>(r.rows);
  }
  return r;
}

// Document-averaged recall of the adapters against the teacher.
inline RecallResult evaluate_recall(const BackboneWeights<float>& w, const QKAdapterParams<float>& p,
                                    const std::vector<corpus::LabeledDoc>& docs, const KSpec& kspec) {
  RecallResult acc;
  acc.per_layer.assign(w.config.n_layers, 0.0);
  std::size_t used = 0;
  for (const auto& d : docs) {
    const auto tr = forward_full(w, d.tokens, teacher_forward_options());
    const ChunkMap cm = build_chunk_map(d.labels);
    const auto r = chunk_recall(student_layers(tr, cm, p), teacher_layers(tr, cm), cm, kspec);
    if (r.rows == 0) continue;
    for (std::size_t l = 0; l < acc.per_layer.size(); ++l) acc.per_layer[l] += r.per_layer[l];
    acc.voted += r.voted;
    acc.baseline += r.baseline;
    acc.rows += r.rows;
    ++used;
  }
  if (used) {
    for (auto& v : acc.per_layer) v /= static_cast<double>(used);
    acc.voted /= static_cast<double>(used);
    acc.baseline /= static_cast<double>(used);
  }
  return acc;
}

struct RecallRow {
  std::size_t layer = 0;  // 1-based
  std::size_t k = 0;
  double recall = 0;
};

// Per-layer recall for each absolute k (clipped to the visible chunks).
inline std::vector<RecallRow> recall_report(const BackboneWeights<float>& w, const QKAdapterParams<float>& p,
                                            const std::vector<corpus::LabeledDoc>& docs,
                                            const std::vector<std::size_t>& ks) {
  const std::size_t L = w.config.n_layers;
  std::vector<std::vector<double>> sum(ks.size(), std::vector<double>(L, 0.0));
  std::size_t used = 0;
  for (const auto& d : docs) {
    const auto tr = forward_full(w, d.tokens, teacher_forward_options());
    const ChunkMap cm = build_chunk_map(d.labels);
    const auto st = student_layers(tr, cm, p);
    const auto te = teacher_layers(tr, cm);
    bool any = false;
    for (std::size_t ki = 0; ki < ks.size(); ++ki) {
      const auto r = chunk_recall(st, te, cm, KSpec::absolute(ks[ki]));
      if (r.rows == 0) continue;
      any = true;
      for (std::size_t l = 0; l < L; ++l) sum[ki][l] += r.per_layer[l];
    }
    used += any;
  }
  std::vector<RecallRow> rows;
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t ki = 0; ki < ks.size(); ++ki)
      rows.push_back({l + 1, ks[ki], used ? sum[ki][l] / static_cast<double>(used) : 0.0});
  return rows;
}

inline void write_recall_csv(const std::string& path, const std::vector<RecallRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "layer,k,recall\n";
  f.precision(6);
  for (const auto& r : rows) f << r.layer << ',' << r.k << ',' << r.recall << '\n';
  if (!f) throw IoError("failed writing " + path);
}

}  // namespace chunkllm
