// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "chunkllm/numerics/adam.hpp"
#include "chunkllm/numerics/graph.hpp"
#include "chunkllm/numerics/random.hpp"

namespace chunkllm {

// Builds a loss graph from a parameter map and returns the scalar loss node.
// Parameters bound with ops trainable=true are the ones checked.
using LossBuilder = std::function<NodeId(Graph<double>&, const ParamMap<double>&)>;

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t coordinates = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
};

// Central-difference stencils. The 3-point error is O(h^2) and the 5-point
// error O(h^4), so the latter tolerates a larger h and with it far less
// rounding noise (about eps * |loss| / h) on near-zero gradients.
enum class Stencil { three_point, five_point };

// Compares autodiff gradients with central differences at `samples`
// randomly chosen coordinates of the trainable parameters. The relative
// error at a coordinate is |ad - fd| / max(1e-8, |ad| + |fd|).
inline GradCheckResult finite_diff_check(const LossBuilder& build, ParamMap<double> params,
                                         std::size_t samples, double h = 1e-5, std::uint64_t seed = 0,
                                         Stencil stencil = Stencil::three_point) {
  Graph<double> g;
  const NodeId loss = build(g, params);
  g.backward(loss);
  const ParamMap<double> grads = g.parameter_grads();
  if (grads.empty()) throw ContractError("finite_diff_check: graph has no trainable parameters");

  std::vector<const std::string*> names;
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& [name, gr] : grads) {
    names.push_back(&name);
    offsets.push_back(total);
    total += gr.size();
  }

  auto eval = [&](const ParamMap<double>& p) {
    Graph<double> ge;
    return ge.value(build(ge, p))[0];
  };

  Rng rng(seed, "gradcheck");
  GradCheckResult res;
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t flat = rng.index(total);
    const auto it = std::upper_bound(offsets.begin(), offsets.end(), flat);
    const std::size_t which = static_cast<std::size_t>(it - offsets.begin()) - 1;
    const std::string& name = *names[which];
    const std::size_t idx = flat - offsets[which];

    double& x = params.at(name)[idx];
    const double orig = x;
    const auto at = [&](double dx) {
      x = orig + dx;
      return eval(params);
    };
    double fd = 0;
    if (stencil == Stencil::three_point) {
      fd = (at(h) - at(-h)) / (2.0 * h);
    } else {
      fd = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
    }
    x = orig;

    const double ad = grads.at(name)[idx];
    const double rel = std::abs(ad - fd) / std::max(1e-8, std::abs(ad) + std::abs(fd));
    if (rel > res.max_rel_error || res.coordinates == 0) {
      res.max_rel_error = std::max(res.max_rel_error, rel);
      res.worst_param = name;
      res.worst_index = idx;
    }
    ++res.coordinates;
  }
  return res;
}

}  // namespace chunkllm
