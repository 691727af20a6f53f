// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "chunkllm/backbone/forward.hpp"
#include "chunkllm/numerics/adam.hpp"

namespace chunkllm {

struct TrainExample {
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<float> weights;  // per-position loss weights; empty = uniform
};

// Supplies the batch for a given step.
using ExampleSource = std::function<std::vector<TrainExample>(std::size_t step)>;

struct TrainConfig {
  std::size_t steps = 0;
  double lr = 3e-4;
  std::size_t warmup = 50;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.99;
};

struct LossPoint {
  std::size_t step = 0;
  double loss = 0;
};

using StepCallback = std::function<void(const LossPoint&)>;

inline void write_loss_csv(const std::string& path, const std::vector<LossPoint>& curve) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "step,loss\n";
  f.precision(9);
  for (const auto& p : curve) f << p.step << ',' << p.loss << '\n';
}

// Sums per-example gradients in batch order, then divides by the batch
// size.
template <class T>
void accumulate_grads(ParamMap<T>& acc, const ParamMap<T>& g) {
  for (const auto& [name, t] : g) {
    auto [it, fresh] = acc.try_emplace(name, t);
    if (!fresh) {
      for (std::size_t i = 0; i < t.size(); ++i) it->second[i] += t[i];
    }
  }
}

template <class T>
void scale_grads(ParamMap<T>& g, T s) {
  for (auto& [_, t] : g)
    for (auto& v : t.storage()) v *= s;
}

// Next-token cross-entropy training of every backbone tensor with Adam.
template <class T>
std::vector<LossPoint> pretrain(BackboneWeights<T>& w, const ExampleSource& source, const TrainConfig& cfg,
                                const StepCallback& on_step = {}) {
  AdamState<T> state(AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
  std::vector<LossPoint> curve;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const std::vector<TrainExample> batch = source(step);
    if (batch.empty()) throw InputError("pretrain: empty batch");
    ParamMap<T> grads;
    double loss = 0;
    for (const TrainExample& ex : batch) {
      Graph<T> g;
      std::vector<T> wts(ex.weights.begin(), ex.weights.end());
      const NodeId l = record_lm_loss(g, w, ex.inputs, ex.targets, std::move(wts));
      g.backward(l);
      loss += g.value(l)[0];
      accumulate_grads(grads, g.parameter_grads());
    }
    scale_grads(grads, static_cast<T>(1.0 / batch.size()));
    clip_grad_norm(grads, cfg.clip_norm);
    adam_step(w.params, grads, state, cosine_lr(cfg.lr, step, cfg.steps, cfg.warmup));
    LossPoint p{step, loss / static_cast<double>(batch.size())};
    curve.push_back(p);
    if (on_step) on_step(p);
  }
  return curve;
}

}  // namespace chunkllm
