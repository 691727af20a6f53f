// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include "chunkllm/chunkattn/select.hpp"
#include "chunkllm/chunker/chunker.hpp"
#include "chunkllm/errors.hpp"

namespace chunkllm {

enum class Policy { chunkllm, full, streaming, fixed_chunk };

inline std::string to_string(Policy p) {
  switch (p) {
    case Policy::chunkllm: return "chunkllm";
    case Policy::full: return "full";
    case Policy::streaming: return "streaming";
    case Policy::fixed_chunk: return "fixed_chunk";
  }
  return "?";
}

inline Policy parse_policy(const std::string& s) {
  for (Policy p : {Policy::chunkllm, Policy::full, Policy::streaming, Policy::fixed_chunk})
    if (to_string(p) == s) return p;
  throw ConfigError("unknown policy '" + s + "' (expected chunkllm, full, streaming or fixed_chunk)");
}

inline constexpr std::size_t kDefaultAbsoluteK = 256;

struct PolicyConfig {
  Policy policy = Policy::chunkllm;
  KSpec k;                                // ratio 0.45
  std::size_t local_chunks = 15;          // m
  std::size_t sink_chunks = 1;            // s
  bool vote = true;
  bool icac = true;
  std::size_t fixed_chunk_len = 23;       // about one sentence of the synthetic grammar
  std::size_t stream_sink_tokens = 4;
  std::size_t stream_window_tokens = 1024;
  double alpha = kDefaultAlpha;

  bool chunked() const { return policy == Policy::chunkllm || policy == Policy::fixed_chunk; }

  void validate() const {
    k.validate();
    check_alpha(alpha);
    if (policy == Policy::fixed_chunk && fixed_chunk_len == 0) throw ConfigError("fixed_chunk_len must be positive");
    if (policy == Policy::streaming && stream_window_tokens == 0) {
      throw ConfigError("streaming window must hold at least one token");
    }
  }
};

}  // namespace chunkllm
