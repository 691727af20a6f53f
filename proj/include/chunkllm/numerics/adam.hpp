// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "chunkllm/numerics/tensor.hpp"

namespace chunkllm {

template <class T>
using ParamMap = std::map<std::string, Tensor<T>>;

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  ParamMap<T> m;
  ParamMap<T> v;

  explicit AdamState(AdamConfig c = {}) : config(c) {}
};

// One bias-corrected Adam update of every parameter that has a gradient.
// lr_override (> 0) replaces config.lr for this step, for schedules.
template <class T>
void adam_step(ParamMap<T>& params, const ParamMap<T>& grads, AdamState<T>& state, double lr_override = -1.0) {
  const AdamConfig& c = state.config;
  const double lr = lr_override > 0 ? lr_override : c.lr;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    auto pit = params.find(name);
    if (pit == params.end()) throw ContractError("adam_step: gradient for unknown parameter " + name);
    Tensor<T>& p = pit->second;
    require_same_shape(p, g, "adam_step");
    auto [mit, m_new] = state.m.try_emplace(name, Tensor<T>(p.shape()));
    auto [vit, v_new] = state.v.try_emplace(name, Tensor<T>(p.shape()));
    Tensor<T>& m = mit->second;
    Tensor<T>& v = vit->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      p[i] = static_cast<T>(p[i] - lr * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
}

// Scales gradients in place so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
template <class T>
double clip_grad_norm(ParamMap<T>& grads, double max_norm) {
  double ss = 0;
  for (const auto& [_, g] : grads)
    for (T v : g.storage()) ss += static_cast<double>(v) * v;
  const double norm = std::sqrt(ss);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& [_, g] : grads)
      for (auto& v : g.storage()) v *= s;
  }
  return norm;
}

// Cosine decay from lr to lr*floor after a linear warmup.
inline double cosine_lr(double lr, std::uint64_t step, std::uint64_t total, std::uint64_t warmup,
                        double floor = 0.1) {
  if (warmup > 0 && step < warmup) return lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup) return lr;
  const double t = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  const double cosv = 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(1.0, t)));
  return lr * (floor + (1.0 - floor) * cosv);
}

}  // namespace chunkllm
