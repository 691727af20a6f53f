// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

// Top-k and cross-layer voting over chunk scores.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "chunkllm/errors.hpp"

namespace chunkllm {

enum class KMode { ratio, absolute };

struct KSpec {
  KMode mode = KMode::ratio;
  double value = 0.45;

  static KSpec ratio(double r) { return {KMode::ratio, r}; }
  static KSpec absolute(std::size_t k) { return {KMode::absolute, static_cast<double>(k)}; }

  void validate() const {
    if (mode == KMode::ratio && !(value > 0.0 && value <= 1.0)) throw ConfigError("top-k ratio must lie in (0, 1]");
    if (mode == KMode::absolute && !(value >= 1.0)) throw ConfigError("absolute top-k must be at least 1");
  }

  // ratio: max(1, ceil(r c)); absolute: min(k, c). Zero chunks give 0.
  std::size_t resolve(std::size_t c) const {
    if (c == 0) return 0;
    if (mode == KMode::absolute) return std::min(static_cast<std::size_t>(value), c);
    // The epsilon keeps products such as 0.45 * 20 from rounding up.
    const double k = std::ceil(value * static_cast<double>(c) - 1e-9);
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(k, 1.0)), 1, c);
  }
};

// Indices of the k largest scores in rank order; ties go to the lower index.
template <class T>
std::vector<std::size_t> topk_indices(std::span<const T> scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  idx.resize(k);
  return idx;
}

// Global top-k by cross-layer voting. Each layer nominates its top-k; chunks
// rank by nomination count (desc), then summed score across layers (desc),
// then index (asc). Returned ascending.
template <class T>
std::vector<std::size_t> vote_topk(const std::vector<std::span<const T>>& layer_scores, std::size_t k) {
  if (layer_scores.empty()) throw InputError("vote_topk: no layers");
  const std::size_t c = layer_scores.front().size();
  std::vector<std::size_t> count(c, 0);
  std::vector<double> total(c, 0.0);
  for (const auto& s : layer_scores) {
    if (s.size() != c) throw DimensionError("vote_topk: layers disagree on chunk count");
    for (std::size_t j : topk_indices(s, k)) ++count[j];
    for (std::size_t j = 0; j < c; ++j) total[j] += static_cast<double>(s[j]);
  }
  std::vector<std::size_t> idx(c);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, c);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), [&](std::size_t a, std::size_t b) {
    if (count[a] != count[b]) return count[a] > count[b];
    if (total[a] != total[b]) return total[a] > total[b];
    return a < b;
  });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace chunkllm
