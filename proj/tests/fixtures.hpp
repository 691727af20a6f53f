// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

// Small models and scratch paths shared by the test binaries.

#pragma once

#include <unistd.h>

#include <filesystem>
#include <string>
#include <vector>

#include <cmath>

#include "chunkllm/backbone/model.hpp"
#include "chunkllm/chunker/chunk_map.hpp"
#include "chunkllm/numerics/random.hpp"

namespace fixture {

inline chunkllm::ModelConfig tiny_config(std::uint32_t layers = 2, std::uint64_t seed = 3) {
  chunkllm::ModelConfig c;
  c.vocab_size = 256;
  c.d_model = 32;
  c.n_heads = 2;
  c.d_head = 16;
  c.n_layers = layers;
  c.max_context = 1024;
  c.seed = seed;
  return c;
}

inline std::vector<int> random_tokens(chunkllm::Rng& rng, std::size_t n, int vocab = 256) {
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(rng.index(static_cast<std::size_t>(vocab)));
  return t;
}

inline std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("chunkllm_test_" + std::to_string(::getpid()) + "_" + name);
}

// Random causal attention, row-stochastic per head.
inline chunkllm::Tensor<double> random_attention(chunkllm::Rng& rng, std::size_t h, std::size_t n) {
  chunkllm::Tensor<double> a({h, n, n});
  for (std::size_t hh = 0; hh < h; ++hh)
    for (std::size_t i = 0; i < n; ++i) {
      double z = 0;
      for (std::size_t t = 0; t <= i; ++t) z += a[(hh * n + i) * n + t] = std::exp(2.0 * rng.normal());
      for (std::size_t t = 0; t <= i; ++t) a[(hh * n + i) * n + t] /= z;
    }
  return a;
}

inline chunkllm::ChunkMap random_map(chunkllm::Rng& rng, std::size_t n, double p) {
  std::vector<std::uint8_t> y(n);
  for (auto& v : y) v = rng.bernoulli(p);
  return chunkllm::build_chunk_map(y);
}

}  // namespace fixture
