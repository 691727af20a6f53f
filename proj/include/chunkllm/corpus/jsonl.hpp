// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

// JSONL persistence for corpora:
//   labeled docs:    {"text": str, "labels": [0|1, ...]}
//   passkey samples: {"context": str, "needle": str, "depth": float, "answer": str}

#pragma once

#include <nlohmann/json.hpp>

#include <fstream>
#include <string>
#include <vector>

#include "chunkllm/corpus/corpus.hpp"

namespace chunkllm::corpus {

namespace detail {

inline std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  return f;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  return f;
}

inline nlohmann::json parse_line(const std::string& line, const std::string& path, std::size_t lineno) {
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
  }
}

}  // namespace detail

inline void write_docs_jsonl(const std::string& path, const std::vector<LabeledDoc>& docs) {
  auto f = detail::open_out(path);
  for (const auto& d : docs) {
    nlohmann::json j;
    j["text"] = d.text;
    j["labels"] = d.labels;
    f << j.dump() << '\n';
  }
  if (!f) throw IoError("failed writing " + path);
}

inline std::vector<LabeledDoc> read_docs_jsonl(const std::string& path) {
  auto f = detail::open_in(path);
  std::vector<LabeledDoc> docs;
  std::string line;
  for (std::size_t lineno = 1; std::getline(f, line); ++lineno) {
    if (line.empty()) continue;
    const auto j = detail::parse_line(line, path, lineno);
    LabeledDoc d;
    try {
      d.text = j.at("text").get<std::string>();
      d.labels = j.at("labels").get<std::vector<std::uint8_t>>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    d.tokens = tokenize(d.text);
    if (d.labels.size() != d.tokens.size()) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": labels do not align with tokens");
    }
    docs.push_back(std::move(d));
  }
  return docs;
}

inline void write_passkey_jsonl(const std::string& path, const std::vector<PasskeySample>& samples) {
  auto f = detail::open_out(path);
  for (const auto& s : samples) {
    nlohmann::json j;
    j["context"] = detokenize(s.context);
    j["needle"] = needle_sentence(s.needle);
    j["depth"] = s.depth;
    j["answer"] = s.needle;
    f << j.dump() << '\n';
  }
  if (!f) throw IoError("failed writing " + path);
}

inline std::vector<PasskeySample> read_passkey_jsonl(const std::string& path) {
  auto f = detail::open_in(path);
  std::vector<PasskeySample> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(f, line); ++lineno) {
    if (line.empty()) continue;
    const auto j = detail::parse_line(line, path, lineno);
    PasskeySample s;
    std::string context, needle;
    try {
      context = j.at("context").get<std::string>();
      needle = j.at("needle").get<std::string>();
      s.depth = j.at("depth").get<double>();
      s.needle = j.at("answer").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    const auto at = context.find(needle);
    if (at == std::string::npos) throw FormatError(path + ":" + std::to_string(lineno) + ": needle not in context");
    s.needle_offset = at;
    s.context = tokenize(context);
    s.question = tokenize(kQuestion);
    s.answer = tokenize(s.needle);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace chunkllm::corpus
