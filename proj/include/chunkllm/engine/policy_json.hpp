// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

// PolicyConfig <-> JSON. Absent keys keep their defaults; unknown keys and
// ill-typed values are configuration errors.

#pragma once

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "chunkllm/engine/policy.hpp"

namespace chunkllm {

inline nlohmann::json policy_to_json(const PolicyConfig& p) {
  return {{"policy", to_string(p.policy)},
          {"k_mode", p.k.mode == KMode::ratio ? "ratio" : "absolute"},
          {"k_value", p.k.value},
          {"local_chunks", p.local_chunks},
          {"sink_chunks", p.sink_chunks},
          {"vote", p.vote},
          {"icac", p.icac},
          {"fixed_chunk_len", p.fixed_chunk_len},
          {"stream_sink_tokens", p.stream_sink_tokens},
          {"stream_window_tokens", p.stream_window_tokens},
          {"alpha", p.alpha}};
}

inline PolicyConfig policy_from_json(const nlohmann::json& j, PolicyConfig p = {}) {
  if (!j.is_object()) throw ConfigError("policy config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "policy") {
        p.policy = parse_policy(v.get<std::string>());
      } else if (key == "k_mode") {
        const auto m = v.get<std::string>();
        if (m != "ratio" && m != "absolute") throw ConfigError("k_mode must be 'ratio' or 'absolute'");
        p.k.mode = m == "ratio" ? KMode::ratio : KMode::absolute;
      } else if (key == "k_value") {
        p.k.value = v.get<double>();
      } else if (key == "local_chunks") {
        p.local_chunks = v.get<std::size_t>();
      } else if (key == "sink_chunks") {
        p.sink_chunks = v.get<std::size_t>();
      } else if (key == "vote") {
        p.vote = v.get<bool>();
      } else if (key == "icac") {
        p.icac = v.get<bool>();
      } else if (key == "fixed_chunk_len") {
        p.fixed_chunk_len = v.get<std::size_t>();
      } else if (key == "stream_sink_tokens") {
        p.stream_sink_tokens = v.get<std::size_t>();
      } else if (key == "stream_window_tokens") {
        p.stream_window_tokens = v.get<std::size_t>();
      } else if (key == "alpha") {
        p.alpha = v.get<double>();
      } else {
        throw ConfigError("unknown policy config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("policy config: ") + e.what());
  }
  p.validate();
  return p;
}

inline PolicyConfig load_policy_file(const std::string& path, PolicyConfig base = {}) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open policy config " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("policy config " + path + ": " + e.what());
  }
  return policy_from_json(j, base);
}

}  // namespace chunkllm
