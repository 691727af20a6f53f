// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

// Binary checkpoint, all integers little-endian:
//
//   "CHKL" | u32 version
//   config: u32 vocab_size, d_model, n_layers, n_heads, d_head, max_context
//           f64 rope_base | u64 seed
//   u32 tensor_count
//   per tensor (sorted by name):
//     u32 name_len | name bytes | u32 rank | u64 dims[rank] | f32 payload
//
// Tensors whose names are unknown to this library are carried through
// unchanged.

#pragma once

#include <algorithm>
#include <bit>
#include <iterator>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "chunkllm/backbone/model.hpp"

namespace chunkllm {

inline constexpr char kCheckpointMagic[4] = {'C', 'H', 'K', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointConfigBytes = 6 * 4 + 8 + 8;

struct Checkpoint {
  ModelConfig config;
  ParamMap<float> tensors;

  bool has(const std::string& name) const { return tensors.count(name) != 0; }
};

namespace detail {

template <class U>
void put_le(std::string& buf, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  buf.append(bytes, sizeof(U));
}

class Reader {
 public:
  Reader(const std::string& data, std::string path) : data_(data), path_(std::move(path)) {}

  template <class U>
  U get() {
    need(sizeof(U));
    char bytes[sizeof(U)];
    std::memcpy(bytes, data_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, bytes, sizeof(U));
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void floats(float* out, std::size_t n) {
    need(n * 4);
    for (std::size_t i = 0; i < n; ++i) out[i] = get<float>();
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw FormatError(path_ + ": truncated checkpoint");
  }
  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const ModelConfig& c, const ParamMap<float>& tensors) {
  std::string buf;
  buf.append(kCheckpointMagic, 4);
  detail::put_le(buf, kCheckpointVersion);
  for (std::uint32_t v : {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_head, c.max_context}) {
    detail::put_le(buf, v);
  }
  detail::put_le(buf, c.rope_base);
  detail::put_le(buf, c.seed);
  detail::put_le(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_le(buf, static_cast<std::uint32_t>(name.size()));
    buf.append(name);
    detail::put_le(buf, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t dim : t.shape()) detail::put_le(buf, static_cast<std::uint64_t>(dim));
    if constexpr (std::endian::native == std::endian::little) {
      buf.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
    } else {
      for (float v : t.storage()) detail::put_le(buf, v);
    }
  }
  return buf;
}

// Expected shapes for tensor families this library knows about.
inline void validate_checkpoint_shapes(const ModelConfig& c, const ParamMap<float>& tensors, const std::string& path) {
  std::map<std::string, Shape> expected;
  for (auto& [n, s] : backbone_layout(c)) expected.emplace(n, s);
  for (const auto& [name, t] : tensors) {
    auto it = expected.find(name);
    if (it != expected.end() && it->second != t.shape()) {
      throw FormatError(path + ": tensor " + name + " has shape " + shape_str(t.shape()) + ", config implies " +
                        shape_str(it->second));
    }
    if (name == "chunk_adapter.weight" && t.shape() != Shape{c.d_model, 1}) {
      throw FormatError(path + ": chunk_adapter.weight does not match d_model");
    }
    if (name.starts_with("qk_adapter.") && (name.ends_with(".wq") || name.ends_with(".wk")) &&
        (t.rank() != 2 || t.dim(0) != c.d_model)) {
      throw FormatError(path + ": " + name + " does not match d_model");
    }
  }
}

inline void save_checkpoint(const std::string& path, const ModelConfig& c, const ParamMap<float>& tensors) {
  c.validate();
  validate_checkpoint_shapes(c, tensors, path);
  const std::string buf = serialize_checkpoint(c, tensors);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("failed writing " + path);
}

inline Checkpoint parse_checkpoint(const std::string& data, const std::string& path = "<memory>") {
  detail::Reader r(data, path);
  if (r.bytes(4) != std::string(kCheckpointMagic, 4)) throw FormatError(path + ": bad magic (not a CHKL checkpoint)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError(path + ": unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.config.vocab_size = r.get<std::uint32_t>();
  ck.config.d_model = r.get<std::uint32_t>();
  ck.config.n_layers = r.get<std::uint32_t>();
  ck.config.n_heads = r.get<std::uint32_t>();
  ck.config.d_head = r.get<std::uint32_t>();
  ck.config.max_context = r.get<std::uint32_t>();
  ck.config.rope_base = r.get<double>();
  ck.config.seed = r.get<std::uint64_t>();
  try {
    ck.config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(path + ": invalid stored config: " + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    std::string name = r.bytes(len);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError(path + ": implausible rank for " + name);
    Shape shape(rank);
    for (auto& dim : shape) dim = static_cast<std::size_t>(r.get<std::uint64_t>());
    if (shape_numel(shape) > data.size()) throw FormatError(path + ": truncated checkpoint");
    Tensor<float> t(shape);
    r.floats(t.data(), t.size());
    if (!ck.tensors.emplace(std::move(name), std::move(t)).second) throw FormatError(path + ": duplicate tensor");
  }
  if (!r.done()) throw FormatError(path + ": trailing bytes after tensor table");
  validate_checkpoint_shapes(ck.config, ck.tensors, path);
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(data, path);
}

// Backbone weights from a checkpoint; every backbone tensor must be present.
// When `expected` is given the stored config must equal it.
inline BackboneWeights<float> backbone_from_checkpoint(const Checkpoint& ck, const ModelConfig* expected = nullptr) {
  if (expected && !(*expected == ck.config)) throw FormatError("checkpoint config differs from the expected config");
  BackboneWeights<float> w;
  w.config = ck.config;
  for (auto& [name, shape] : backbone_layout(ck.config)) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw FormatError("checkpoint lacks backbone tensor " + name);
    w.params.emplace(name, it->second);
  }
  return w;
}

}  // namespace chunkllm
