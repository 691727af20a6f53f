// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "chunkllm/backbone/decode.hpp"
#include "chunkllm/errors.hpp"

namespace chunkllm {

// Partition of a token prefix into completed chunks plus an open tail.
// Chunk j spans (boundary[j-1], boundary[j]] with boundary[-1] = -1; tokens
// after the last boundary form the tail.
class ChunkMap {
 public:
  ChunkMap() = default;
  ChunkMap(std::vector<std::size_t> boundaries, std::size_t n_tokens)
      : boundaries_(std::move(boundaries)), n_tokens_(n_tokens) {
    for (std::size_t j = 0; j < boundaries_.size(); ++j) {
      if (boundaries_[j] >= n_tokens_ || (j && boundaries_[j] <= boundaries_[j - 1])) {
        throw ContractError("ChunkMap: boundaries must be strictly increasing and below n_tokens");
      }
    }
  }

  std::size_t n_tokens() const { return n_tokens_; }
  std::size_t chunks() const { return boundaries_.size(); }
  const std::vector<std::size_t>& boundaries() const { return boundaries_; }
  std::size_t boundary(std::size_t j) const { return boundaries_.at(j); }

  TokenRange chunk(std::size_t j) const {
    return {j == 0 ? 0 : boundaries_.at(j - 1) + 1, boundaries_.at(j) + 1};
  }
  TokenRange tail() const { return {boundaries_.empty() ? 0 : boundaries_.back() + 1, n_tokens_}; }

  // Completed chunks whose boundary is at or before token i.
  std::size_t visible(std::size_t i) const {
    return static_cast<std::size_t>(std::upper_bound(boundaries_.begin(), boundaries_.end(), i) - boundaries_.begin());
  }

  // Index of the chunk containing token t, or chunks() if t is in the tail.
  std::size_t chunk_of(std::size_t t) const {
    return static_cast<std::size_t>(std::lower_bound(boundaries_.begin(), boundaries_.end(), t) - boundaries_.begin());
  }

  // Extends the prefix by one token; a boundary closes the tail.
  void push(bool is_boundary) {
    if (is_boundary) boundaries_.push_back(n_tokens_);
    ++n_tokens_;
  }

  std::vector<std::uint8_t> labels() const {
    std::vector<std::uint8_t> y(n_tokens_, 0);
    for (std::size_t b : boundaries_) y[b] = 1;
    return y;
  }

  bool operator==(const ChunkMap&) const = default;

 private:
  std::vector<std::size_t> boundaries_;
  std::size_t n_tokens_ = 0;
};

inline ChunkMap build_chunk_map(std::span<const std::uint8_t> labels) {
  std::vector<std::size_t> b;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i]) b.push_back(i);
  return ChunkMap(std::move(b), labels.size());
}

// Fixed-length segmentation: a boundary every `len` tokens.
inline ChunkMap fixed_chunk_map(std::size_t n_tokens, std::size_t len) {
  if (len == 0) throw ConfigError("fixed chunk length must be positive");
  std::vector<std::size_t> b;
  for (std::size_t e = len; e <= n_tokens; e += len) b.push_back(e - 1);
  return ChunkMap(std::move(b), n_tokens);
}

}  // namespace chunkllm
