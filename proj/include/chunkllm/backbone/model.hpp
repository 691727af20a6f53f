// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "chunkllm/numerics/adam.hpp"
#include "chunkllm/numerics/random.hpp"
#include "chunkllm/numerics/tensor.hpp"

namespace chunkllm {

struct ModelConfig {
  std::uint32_t vocab_size = 256;
  std::uint32_t d_model = 128;
  std::uint32_t n_layers = 4;
  std::uint32_t n_heads = 4;
  std::uint32_t d_head = 32;
  std::uint32_t max_context = 32768;
  double rope_base = 10000.0;
  std::uint64_t seed = 0;

  std::size_t d_ff() const { return 4 * static_cast<std::size_t>(d_model); }

  void validate() const {
    if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
    if (n_layers == 0 || n_heads == 0 || d_head == 0) throw ConfigError("layer/head counts must be positive");
    if (d_model != n_heads * d_head) {
      throw ConfigError("d_model (" + std::to_string(d_model) + ") != n_heads * d_head (" +
                        std::to_string(n_heads * d_head) + ")");
    }
    if (d_head % 2 != 0) throw ConfigError("d_head must be even for rotary embeddings");
    if (max_context < 1) throw ConfigError("max_context must be at least 1");
    if (!(rope_base > 1.0)) throw ConfigError("rope_base must exceed 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

namespace names {
inline std::string layer(std::size_t l, const char* leaf) { return "layers." + std::to_string(l) + "." + leaf; }
inline constexpr const char* kEmbed = "tok_embed";
inline constexpr const char* kFinalNorm = "final_norm";
}  // namespace names

// Closed-form parameter count: V*d + L*(12 d^2 + 2 d) + d (tied output).
inline std::size_t backbone_param_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  return static_cast<std::size_t>(c.vocab_size) * d + c.n_layers * (12 * d * d + 2 * d) + d;
}

// Frozen backbone parameters. The output projection is tied to tok_embed.
template <class T>
struct BackboneWeights {
  ModelConfig config;
  ParamMap<T> params;

  const Tensor<T>& get(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw FormatError("backbone weights missing tensor " + name);
    return it->second;
  }
  const Tensor<T>& layer(std::size_t l, const char* leaf) const { return get(names::layer(l, leaf)); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params) n += t.size();
    return n;
  }

  template <class U>
  BackboneWeights<U> cast() const {
    BackboneWeights<U> out;
    out.config = config;
    for (const auto& [k, v] : params) out.params.emplace(k, v.template cast<U>());
    return out;
  }
};

// Name and shape of every backbone tensor for a config.
inline std::vector<std::pair<std::string, Shape>> backbone_layout(const ModelConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff();
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back(names::kEmbed, Shape{c.vocab_size, d});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    out.emplace_back(names::layer(l, "attn_norm"), Shape{d});
    out.emplace_back(names::layer(l, "wq"), Shape{d, d});
    out.emplace_back(names::layer(l, "wk"), Shape{d, d});
    out.emplace_back(names::layer(l, "wv"), Shape{d, d});
    out.emplace_back(names::layer(l, "wo"), Shape{d, d});
    out.emplace_back(names::layer(l, "mlp_norm"), Shape{d});
    out.emplace_back(names::layer(l, "w1"), Shape{d, f});
    out.emplace_back(names::layer(l, "w2"), Shape{f, d});
  }
  out.emplace_back(names::kFinalNorm, Shape{d});
  return out;
}

// Normal(0, 0.02) matrices; wo and w2 (the projections writing into the
// residual stream) are further scaled by 1/sqrt(2 n_layers). Norm gains
// start at one.
template <class T>
BackboneWeights<T> init_weights(const ModelConfig& config) {
  config.validate();
  BackboneWeights<T> w;
  w.config = config;
  Rng rng(config.seed, "init");
  const double out_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
  for (auto& [name, shape] : backbone_layout(config)) {
    if (shape.size() == 1) {
      w.params.emplace(name, Tensor<T>(shape, T{1}));
      continue;
    }
    const bool residual_out = name.ends_with(".wo") || name.ends_with(".w2");
    w.params.emplace(name, rng.normal_tensor<T>(shape, 0.02 * (residual_out ? out_scale : 1.0)));
  }
  return w;
}

}  // namespace chunkllm
