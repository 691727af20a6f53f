// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "chunkllm/numerics/kernels.hpp"
#include "chunkllm/numerics/tensor.hpp"

namespace chunkllm {

enum class OpKind {
  leaf,
  matmul,
  matmul_nt,
  add,
  add_bias,
  scale,
  mul,
  gelu,
  sigmoid,
  rmsnorm,
  embedding,
  gather_rows,
  rope,
  attention,
  softmax_rows,
  kl_div_rows,
  bce,
  bce_logits,
  cross_entropy,
  sum,
};

using NodeId = std::size_t;

// Tape of operation records for reverse-mode differentiation. Nodes are
// appended in evaluation order, so ids are a topological order and backward
// is a single reverse sweep. The graph is single-writer.
template <class T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<NodeId> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    bool trainable = false;
    std::string name;
    BackwardFn backward;
  };

  NodeId constant(Tensor<T> value) { return push_leaf(std::move(value), "", false); }

  // Leaf bound to a named parameter. Only trainable leaves receive
  // gradients; frozen parameters behave as constants.
  NodeId parameter(std::string name, Tensor<T> value, bool trainable = true) {
    return push_leaf(std::move(value), std::move(name), trainable);
  }

  NodeId push(OpKind kind, Tensor<T> value, std::vector<NodeId> inputs, BackwardFn backward) {
    for (NodeId in : inputs) {
      if (in >= nodes_.size()) throw ContractError("graph: input node does not precede its consumer");
    }
    require_finite(value, op_name(kind));
    Node node;
    node.kind = kind;
    node.value = std::move(value);
    for (NodeId in : inputs) node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
    node.inputs = std::move(inputs);
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
  }

  const Tensor<T>& value(NodeId id) const { return nodes_.at(id).value; }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }

  // Gradient accumulator of a node, zero-initialized on first use.
  Tensor<T>& grad(NodeId id) {
    Node& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }
  const Tensor<T>& grad_value(NodeId id) const { return nodes_.at(id).grad; }

  void accumulate(NodeId id, const Tensor<T>& g) {
    Tensor<T>& acc = grad(id);
    require_same_shape(acc, g, "gradient accumulation");
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
  }

  void backward(NodeId loss) {
    if (nodes_.at(loss).value.size() != 1) {
      throw ContractError("backward: loss node must be scalar, got " +
                          shape_str(nodes_[loss].value.shape()));
    }
    grad(loss)[0] = T{1};
    for (NodeId id = loss + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || !n.has_grad || !n.backward) continue;
      n.backward(*this, id);
    }
    for (Node& n : nodes_) {
      if (n.trainable && !n.has_grad) {
        n.grad = Tensor<T>(n.value.shape());
        n.has_grad = true;
      }
    }
  }

  // Trainable-leaf gradients keyed by parameter name. A parameter bound more
  // than once has its gradients summed in node-id order.
  std::map<std::string, Tensor<T>> parameter_grads() const {
    std::map<std::string, Tensor<T>> out;
    for (const Node& n : nodes_) {
      if (!n.trainable) continue;
      auto it = out.find(n.name);
      if (it == out.end()) {
        out.emplace(n.name, n.has_grad ? n.grad : Tensor<T>(n.value.shape()));
      } else if (n.has_grad) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) it->second[i] += n.grad[i];
      }
    }
    return out;
  }

  static const char* op_name(OpKind k) {
    switch (k) {
      case OpKind::leaf: return "leaf";
      case OpKind::matmul: return "matmul";
      case OpKind::matmul_nt: return "matmul_nt";
      case OpKind::add: return "add";
      case OpKind::add_bias: return "add_bias";
      case OpKind::scale: return "scale";
      case OpKind::mul: return "mul";
      case OpKind::gelu: return "gelu";
      case OpKind::sigmoid: return "sigmoid";
      case OpKind::rmsnorm: return "rmsnorm";
      case OpKind::embedding: return "embedding";
      case OpKind::gather_rows: return "gather_rows";
      case OpKind::rope: return "rope";
      case OpKind::attention: return "attention";
      case OpKind::softmax_rows: return "softmax_rows";
      case OpKind::kl_div_rows: return "kl_div_rows";
      case OpKind::bce: return "bce_loss";
      case OpKind::bce_logits: return "bce_with_logits";
      case OpKind::cross_entropy: return "cross_entropy_loss";
      case OpKind::sum: return "sum";
    }
    return "?";
  }

 private:
  NodeId push_leaf(Tensor<T> value, std::string name, bool trainable) {
    require_finite(value, "leaf");
    Node node;
    node.value = std::move(value);
    node.name = std::move(name);
    node.trainable = trainable;
    node.requires_grad = trainable;
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
  }

  std::vector<Node> nodes_;
};

// Differentiable operations recorded on a Graph.
namespace ops {

template <class T>
NodeId matmul(Graph<T>& g, NodeId a, NodeId b) {
  return g.push(OpKind::matmul, kernels::matmul(g.value(a), g.value(b)), {a, b}, [a, b](Graph<T>& gr, NodeId self) {
    const Tensor<T>& dc = gr.grad_value(self);
    if (gr.requires_grad(a)) gr.accumulate(a, kernels::matmul_nt(dc, gr.value(b)));
    if (gr.requires_grad(b)) gr.accumulate(b, kernels::matmul_tn(gr.value(a), dc));
  });
}

// a times b^T.
template <class T>
NodeId matmul_nt(Graph<T>& g, NodeId a, NodeId b) {
  return g.push(OpKind::matmul_nt, kernels::matmul_nt(g.value(a), g.value(b)), {a, b},
                [a, b](Graph<T>& gr, NodeId self) {
                  const Tensor<T>& dc = gr.grad_value(self);
                  if (gr.requires_grad(a)) gr.accumulate(a, kernels::matmul(dc, gr.value(b)));
                  if (gr.requires_grad(b)) gr.accumulate(b, kernels::matmul_tn(dc, gr.value(a)));
                });
}

template <class T>
NodeId add(Graph<T>& g, NodeId a, NodeId b) {
  require_same_shape(g.value(a), g.value(b), "add");
  Tensor<T> out = g.value(a);
  const Tensor<T>& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return g.push(OpKind::add, std::move(out), {a, b}, [a, b](Graph<T>& gr, NodeId self) {
    const Tensor<T> dc = gr.grad_value(self);
    if (gr.requires_grad(a)) gr.accumulate(a, dc);
    if (gr.requires_grad(b)) gr.accumulate(b, dc);
  });
}

// x [n x d] plus bias [d] broadcast over rows.
template <class T>
NodeId add_bias(Graph<T>& g, NodeId x, NodeId bias) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& bv = g.value(bias);
  require_rank(xv, 2, "add_bias");
  const std::size_t n = xv.dim(0), d = xv.dim(1);
  if (bv.size() != d) throw DimensionError("add_bias: bias length differs from row width");
  Tensor<T> out = xv;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += bv[j];
  return g.push(OpKind::add_bias, std::move(out), {x, bias}, [x, bias, n, d](Graph<T>& gr, NodeId self) {
    const Tensor<T> dc = gr.grad_value(self);
    if (gr.requires_grad(x)) gr.accumulate(x, dc);
    if (gr.requires_grad(bias)) {
      Tensor<T>& db = gr.grad(bias);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) db[j] += dc[i * d + j];
    }
  });
}

template <class T>
NodeId scale(Graph<T>& g, NodeId x, T s) {
  Tensor<T> out = g.value(x);
  for (auto& v : out.storage()) v *= s;
  return g.push(OpKind::scale, std::move(out), {x}, [x, s](Graph<T>& gr, NodeId self) {
    Tensor<T> d = gr.grad_value(self);
    for (auto& v : d.storage()) v *= s;
    gr.accumulate(x, d);
  });
}

template <class T>
NodeId mul(Graph<T>& g, NodeId a, NodeId b) {
  require_same_shape(g.value(a), g.value(b), "mul");
  Tensor<T> out = g.value(a);
  const Tensor<T>& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return g.push(OpKind::mul, std::move(out), {a, b}, [a, b](Graph<T>& gr, NodeId self) {
    const Tensor<T>& dc = gr.grad_value(self);
    if (gr.requires_grad(a)) {
      Tensor<T> d = gr.value(b);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= dc[i];
      gr.accumulate(a, d);
    }
    if (gr.requires_grad(b)) {
      Tensor<T> d = gr.value(a);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= dc[i];
      gr.accumulate(b, d);
    }
  });
}

template <class T>
NodeId gelu(Graph<T>& g, NodeId x) {
  Tensor<T> out = g.value(x);
  for (auto& v : out.storage()) v = kernels::gelu(v);
  return g.push(OpKind::gelu, std::move(out), {x}, [x](Graph<T>& gr, NodeId self) {
    const Tensor<T>& dc = gr.grad_value(self);
    const Tensor<T>& xv = gr.value(x);
    Tensor<T>& dx = gr.grad(x);
    for (std::size_t i = 0; i < xv.size(); ++i) dx[i] += dc[i] * kernels::gelu_grad(xv[i]);
  });
}

template <class T>
NodeId sigmoid(Graph<T>& g, NodeId x) {
  Tensor<T> out = g.value(x);
  for (auto& v : out.storage()) v = kernels::sigmoid(v);
  return g.push(OpKind::sigmoid, std::move(out), {x}, [x](Graph<T>& gr, NodeId self) {
    const Tensor<T>& dc = gr.grad_value(self);
    const Tensor<T>& y = gr.value(self);
    Tensor<T>& dx = gr.grad(x);
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] += dc[i] * y[i] * (T{1} - y[i]);
  });
}

template <class T>
NodeId rmsnorm(Graph<T>& g, NodeId x, NodeId gain) {
  return g.push(OpKind::rmsnorm, kernels::rmsnorm(g.value(x), g.value(gain)), {x, gain},
                [x, gain](Graph<T>& gr, NodeId self) {
                  const Tensor<T> dc = gr.grad_value(self);
                  Tensor<T>* dx = gr.requires_grad(x) ? &gr.grad(x) : nullptr;
                  Tensor<T>* dg = gr.requires_grad(gain) ? &gr.grad(gain) : nullptr;
                  kernels::rmsnorm_backward(gr.value(x), gr.value(gain), dc, dx, dg);
                });
}

// Rows of table selected by token ids.
template <class T>
NodeId embedding(Graph<T>& g, NodeId table, std::vector<int> tokens) {
  const Tensor<T>& tv = g.value(table);
  require_rank(tv, 2, "embedding");
  const std::size_t v = tv.dim(0), d = tv.dim(1);
  Tensor<T> out({tokens.size(), d});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= v) {
      throw IndexError("embedding: token id " + std::to_string(tokens[i]) + " out of range");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(tokens[i]) * d, d, out.data() + i * d);
  }
  return g.push(OpKind::embedding, std::move(out), {table},
                [table, tokens = std::move(tokens), d](Graph<T>& gr, NodeId self) {
                  const Tensor<T>& dc = gr.grad_value(self);
                  Tensor<T>& dt = gr.grad(table);
                  for (std::size_t i = 0; i < tokens.size(); ++i) {
                    T* dst = dt.data() + static_cast<std::size_t>(tokens[i]) * d;
                    const T* src = dc.data() + i * d;
                    for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                  }
                });
}

template <class T>
NodeId gather_rows(Graph<T>& g, NodeId x, std::vector<std::size_t> rows) {
  const Tensor<T>& xv = g.value(x);
  require_rank(xv, 2, "gather_rows");
  const std::size_t n = xv.dim(0), d = xv.dim(1);
  Tensor<T> out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw IndexError("gather_rows: row index out of range");
    std::copy_n(xv.data() + rows[i] * d, d, out.data() + i * d);
  }
  return g.push(OpKind::gather_rows, std::move(out), {x}, [x, rows = std::move(rows), d](Graph<T>& gr, NodeId self) {
    const Tensor<T>& dc = gr.grad_value(self);
    Tensor<T>& dx = gr.grad(x);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) dx[rows[i] * d + j] += dc[i * d + j];
  });
}

template <class T>
NodeId rope(Graph<T>& g, NodeId x, std::vector<std::size_t> positions, std::size_t heads, double base) {
  Tensor<T> out = kernels::rope_rows(g.value(x), positions, heads, base);
  return g.push(OpKind::rope, std::move(out), {x},
                [x, positions = std::move(positions), heads, base](Graph<T>& gr, NodeId self) {
                  gr.accumulate(x, kernels::rope_rows(gr.grad_value(self), positions, heads, base, -1.0));
                });
}

// Causal multi-head attention; q, k, v are [n x heads*d_head] with RoPE
// already applied. probs, when given, receives the [heads x n x n] matrices.
template <class T>
NodeId attention(Graph<T>& g, NodeId q, NodeId k, NodeId v, std::size_t heads, Tensor<T>* probs = nullptr) {
  auto lse = std::make_shared<Tensor<T>>();
  Tensor<T> out = kernels::causal_attention(g.value(q), g.value(k), g.value(v), heads, lse.get(), probs);
  return g.push(OpKind::attention, std::move(out), {q, k, v}, [q, k, v, heads, lse](Graph<T>& gr, NodeId self) {
    Tensor<T>* dq = gr.requires_grad(q) ? &gr.grad(q) : nullptr;
    Tensor<T>* dk = gr.requires_grad(k) ? &gr.grad(k) : nullptr;
    Tensor<T>* dv = gr.requires_grad(v) ? &gr.grad(v) : nullptr;
    kernels::causal_attention_backward(gr.value(q), gr.value(k), gr.value(v), heads, gr.value(self), *lse,
                                       gr.grad_value(self), dq, dk, dv);
  });
}

template <class T>
NodeId softmax_rows(Graph<T>& g, NodeId x, std::shared_ptr<const kernels::Mask> mask = nullptr) {
  return g.push(OpKind::softmax_rows, kernels::softmax_rows(g.value(x), mask.get()), {x},
                [x](Graph<T>& gr, NodeId self) {
                  gr.accumulate(x, kernels::softmax_rows_backward(gr.value(self), gr.grad_value(self)));
                });
}

template <class T>
NodeId kl_div_rows(Graph<T>& g, NodeId p, NodeId q, std::vector<std::uint8_t> row_mask) {
  const T loss = kernels::kl_div_rows(g.value(p), g.value(q), std::span<const std::uint8_t>(row_mask));
  return g.push(OpKind::kl_div_rows, Tensor<T>::scalar(loss), {p, q},
                [p, q, row_mask = std::move(row_mask)](Graph<T>& gr, NodeId self) {
                  Tensor<T>* dp = gr.requires_grad(p) ? &gr.grad(p) : nullptr;
                  Tensor<T>* dq = gr.requires_grad(q) ? &gr.grad(q) : nullptr;
                  kernels::kl_div_rows_backward(gr.value(p), gr.value(q), std::span<const std::uint8_t>(row_mask),
                                                gr.grad_value(self)[0], dp, dq);
                });
}

template <class T>
NodeId bce_loss(Graph<T>& g, NodeId probs, Tensor<T> labels, T pos_weight = T{1}) {
  const T loss = kernels::bce_loss(g.value(probs), labels, pos_weight);
  return g.push(OpKind::bce, Tensor<T>::scalar(loss), {probs},
                [probs, labels = std::move(labels), pos_weight](Graph<T>& gr, NodeId self) {
                  const Tensor<T>& pv = gr.value(probs);
                  Tensor<T>& dp = gr.grad(probs);
                  const T up = gr.grad_value(self)[0] / static_cast<T>(pv.size());
                  const T lo = static_cast<T>(kernels::kBceClamp);
                  for (std::size_t i = 0; i < pv.size(); ++i) {
                    const T p = pv[i];
                    if (p < lo || p > T{1} - lo) continue;
                    const T y = labels[i];
                    dp[i] += -up * (pos_weight * y / p - (T{1} - y) / (T{1} - p));
                  }
                });
}

template <class T>
NodeId bce_with_logits(Graph<T>& g, NodeId logits, Tensor<T> labels, T pos_weight = T{1}) {
  const T loss = kernels::bce_with_logits(g.value(logits), labels, pos_weight);
  return g.push(OpKind::bce_logits, Tensor<T>::scalar(loss), {logits},
                [logits, labels = std::move(labels), pos_weight](Graph<T>& gr, NodeId self) {
                  const Tensor<T>& z = gr.value(logits);
                  Tensor<T>& dz = gr.grad(logits);
                  const T up = gr.grad_value(self)[0] / static_cast<T>(z.size());
                  for (std::size_t i = 0; i < z.size(); ++i) {
                    const T s = kernels::sigmoid(z[i]);
                    const T y = labels[i];
                    dz[i] += up * (pos_weight * y * (s - T{1}) + (T{1} - y) * s);
                  }
                });
}

template <class T>
NodeId cross_entropy(Graph<T>& g, NodeId logits, std::vector<int> targets, std::vector<T> weights = {}) {
  const T loss = kernels::cross_entropy(g.value(logits), std::span<const int>(targets), std::span<const T>(weights));
  return g.push(OpKind::cross_entropy, Tensor<T>::scalar(loss), {logits},
                [logits, targets = std::move(targets), weights = std::move(weights)](Graph<T>& gr, NodeId self) {
                  gr.accumulate(logits, kernels::cross_entropy_backward(gr.value(logits), std::span<const int>(targets),
                                                                        std::span<const T>(weights),
                                                                        gr.grad_value(self)[0]));
                });
}

template <class T>
NodeId sum(Graph<T>& g, NodeId x) {
  T s = 0;
  for (T v : g.value(x).storage()) s += v;
  return g.push(OpKind::sum, Tensor<T>::scalar(s), {x}, [x](Graph<T>& gr, NodeId self) {
    Tensor<T>& dx = gr.grad(x);
    const T up = gr.grad_value(self)[0];
    for (auto& v : dx.storage()) v += up;
  });
}

}  // namespace ops
}  // namespace chunkllm
