// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

// Run settings for the command-line tool. A JSON config file fills these
// first; command-line flags then overwrite individual fields.

#pragma once

#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chunkllm/backbone/model.hpp"
#include "chunkllm/engine/policy_json.hpp"
#include "chunkllm/pipeline/recipes.hpp"

namespace chunkllm::cli {

struct BackboneStage {
  std::size_t steps = 3000;
  std::size_t seqlen = 256;
  std::size_t batch = 1;
  double lr = 1e-3;
  std::size_t warmup = 100;
  std::size_t passkey_steps = 0;
  double passkey_lr = 1e-3;
  recipes::PasskeyMix passkey;
};

struct ChunkerStage {
  std::size_t steps = 600;
  std::size_t batch = 4;
  double lr = 1e-2;
  std::size_t docs = 200;
};

struct AdapterStage {
  std::size_t steps = 3000;
  std::size_t seqlen = 1024;
  double lr = 3e-4;
  std::size_t d_adapter = 0;  // 0 = d_head
};

struct DataSettings {
  std::size_t docs = 100;
  std::size_t min_len = 256;
  std::size_t max_len = 1024;
  std::size_t passkey_samples = 0;
  std::size_t passkey_len = 4096;
};

struct EvalSettings {
  std::size_t docs = 100;
  std::size_t doc_len = 1024;
  std::size_t samples = 200;
  std::size_t passkey_len = 4096;
  std::vector<std::size_t> ks = {1, 2, 4, 8, 15};
  std::vector<std::size_t> lengths = {4096, 8192, 16384};
  std::vector<std::string> policies;  // empty: subcommand default
  std::size_t reps = 5;
  std::size_t new_tokens = 32;
};

struct Settings {
  ModelConfig model;
  PolicyConfig policy;
  BackboneStage backbone;
  ChunkerStage chunker;
  AdapterStage adapters;
  DataSettings data;
  EvalSettings eval;
};

namespace detail {

// Reads declared keys of one JSON object and rejects the rest.
class Section {
 public:
  Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }
  template <class T>
  Section& get(const char* key, T& out) {
    seen_.insert(key);
    if (auto it = j_.find(key); it != j_.end()) {
      try {
        out = it->template get<T>();
      } catch (const nlohmann::json::exception&) {
        throw ConfigError("config " + name_ + "." + key + " has the wrong type");
      }
    }
    return *this;
  }
  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw ConfigError("unknown config key " + name_ + "." + key);
  }

 private:
  const nlohmann::json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline void apply_config(const nlohmann::json& j, Settings& s) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "model") {
      detail::Section(v, key)
          .get("vocab_size", s.model.vocab_size)
          .get("d_model", s.model.d_model)
          .get("n_layers", s.model.n_layers)
          .get("n_heads", s.model.n_heads)
          .get("d_head", s.model.d_head)
          .get("max_context", s.model.max_context)
          .get("rope_base", s.model.rope_base)
          .finish();
    } else if (key == "policy") {
      s.policy = policy_from_json(v, s.policy);
    } else if (key == "backbone") {
      auto& b = s.backbone;
      auto& m = b.passkey;
      detail::Section(v, key)
          .get("steps", b.steps)
          .get("seqlen", b.seqlen)
          .get("batch", b.batch)
          .get("lr", b.lr)
          .get("warmup", b.warmup)
          .get("passkey_steps", b.passkey_steps)
          .get("passkey_lr", b.passkey_lr)
          .get("passkey_sentence_len", m.sentence_len)
          .get("passkey_repeats", m.n_repeat)
          .get("passkey_repeat_len", m.repeat_len)
          .get("passkey_per_step", m.n_passkey)
          .get("passkey_min_len", m.min_len)
          .get("passkey_max_len", m.max_len)
          .get("passkey_long_max_len", m.long_max_len)
          .get("passkey_long_from", m.long_from)
          .get("passkey_answer_weight", m.answer_weight)
          .finish();
    } else if (key == "chunker") {
      detail::Section(v, key)
          .get("steps", s.chunker.steps)
          .get("batch", s.chunker.batch)
          .get("lr", s.chunker.lr)
          .get("docs", s.chunker.docs)
          .finish();
    } else if (key == "adapters") {
      detail::Section(v, key)
          .get("steps", s.adapters.steps)
          .get("seqlen", s.adapters.seqlen)
          .get("lr", s.adapters.lr)
          .get("d_adapter", s.adapters.d_adapter)
          .finish();
    } else if (key == "data") {
      detail::Section(v, key)
          .get("docs", s.data.docs)
          .get("min_len", s.data.min_len)
          .get("max_len", s.data.max_len)
          .get("passkey_samples", s.data.passkey_samples)
          .get("passkey_len", s.data.passkey_len)
          .finish();
    } else if (key == "eval") {
      detail::Section(v, key)
          .get("docs", s.eval.docs)
          .get("doc_len", s.eval.doc_len)
          .get("samples", s.eval.samples)
          .get("passkey_len", s.eval.passkey_len)
          .get("ks", s.eval.ks)
          .get("lengths", s.eval.lengths)
          .get("policies", s.eval.policies)
          .get("reps", s.eval.reps)
          .get("new_tokens", s.eval.new_tokens)
          .finish();
    } else {
      throw ConfigError("unknown config section '" + key + "'");
    }
  }
}

inline void load_config_file(const std::string& path, Settings& s) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  apply_config(j, s);
}

}  // namespace chunkllm::cli
