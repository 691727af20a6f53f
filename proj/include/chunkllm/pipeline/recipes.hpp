// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

// Training mixtures shared by the command-line tool and the acceptance suite.
// Every source is a pure function of (seed, step).

#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "chunkllm/backbone/pretrain.hpp"
#include "chunkllm/chunkattn/chunkattn.hpp"
#include "chunkllm/chunker/chunker.hpp"
#include "chunkllm/corpus/corpus.hpp"

namespace chunkllm::recipes {

// Sentence-corpus language modelling: `batch` windows of `seqlen` tokens per
// step, each cut from a fresh document.
struct PretrainMix {
  std::size_t seqlen = 256;
  std::size_t batch = 1;
};

// Passkey fine-tuning. Each step carries one sentence window, `n_repeat`
// repeated-span sequences and `n_passkey` passkey samples whose context length
// is drawn from [min_len, max_len]; after `long_from` of the run the upper
// bound becomes `long_max_len`.
struct PasskeyMix {
  std::size_t sentence_len = 256;
  std::size_t n_repeat = 1;
  std::size_t repeat_len = 256;
  std::size_t n_passkey = 8;
  std::size_t min_len = 64;
  std::size_t max_len = 256;
  std::size_t long_max_len = 0;  // 0 keeps max_len throughout
  double long_from = 0.8;
  float answer_weight = 20.0f;
};

namespace detail {

inline Rng step_rng(std::uint64_t seed, const char* stream, std::size_t step) {
  return Rng(splitmix64(seed ^ (0x9e3779b97f4a7c15ULL * (step + 1))), stream);
}

// A document of at least n+1 tokens.
inline corpus::LabeledDoc doc_at_least(Rng& rng, std::size_t n) {
  for (;;) {
    auto d = corpus::gen_doc(rng, {n + 1 + 200, n + 1 + 400});
    if (d.tokens.size() > n) return d;
  }
}

}  // namespace detail

inline TrainExample window_example(const std::vector<int>& tokens, std::size_t n) {
  TrainExample ex;
  ex.inputs.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(n));
  ex.targets.assign(tokens.begin() + 1, tokens.begin() + static_cast<std::ptrdiff_t>(n) + 1);
  return ex;
}

// Prompt followed by the answer; answer predictions carry `answer_weight`.
inline TrainExample passkey_example(const corpus::PasskeySample& s, float answer_weight) {
  std::vector<int> seq = s.prompt();
  const std::size_t first = seq.size() - 1;
  seq.insert(seq.end(), s.answer.begin(), s.answer.end());
  TrainExample ex = window_example(seq, seq.size() - 1);
  ex.weights.assign(ex.inputs.size(), 1.0f);
  for (std::size_t i = first; i < ex.inputs.size(); ++i) ex.weights[i] = answer_weight;
  return ex;
}

// `len` tokens of sentences, a space, then the same tokens again: every token
// of the copy is predictable only by looking back.
inline TrainExample repeated_span_example(Rng& rng, std::size_t len) {
  const auto d = detail::doc_at_least(rng, len);
  std::vector<int> seq(d.tokens.begin(), d.tokens.begin() + static_cast<std::ptrdiff_t>(len));
  seq.push_back(' ');
  seq.insert(seq.end(), d.tokens.begin(), d.tokens.begin() + static_cast<std::ptrdiff_t>(len));
  return window_example(seq, seq.size() - 1);
}

inline ExampleSource pretrain_source(std::uint64_t seed, PretrainMix mix) {
  return [seed, mix](std::size_t step) {
    Rng rng = detail::step_rng(seed, "pretrain-batch", step);
    std::vector<TrainExample> out;
    for (std::size_t b = 0; b < mix.batch; ++b) out.push_back(window_example(detail::doc_at_least(rng, mix.seqlen).tokens, mix.seqlen));
    return out;
  };
}

inline ExampleSource passkey_source(std::uint64_t seed, PasskeyMix mix, std::size_t total_steps) {
  return [seed, mix, total_steps](std::size_t step) {
    Rng rng = detail::step_rng(seed, "passkey-batch", step);
    std::vector<TrainExample> out;
    if (mix.sentence_len) out.push_back(window_example(detail::doc_at_least(rng, mix.sentence_len).tokens, mix.sentence_len));
    for (std::size_t r = 0; r < mix.n_repeat; ++r) out.push_back(repeated_span_example(rng, mix.repeat_len));
    const bool long_phase =
        mix.long_max_len && static_cast<double>(step) >= mix.long_from * static_cast<double>(total_steps);
    const std::size_t hi = long_phase ? mix.long_max_len : mix.max_len;
    for (std::size_t i = 0; i < mix.n_passkey; ++i) {
      const auto len = static_cast<std::size_t>(
          rng.range(static_cast<std::int64_t>(mix.min_len), static_cast<std::int64_t>(hi)));
      const auto sample_seed = rng.engine()();
      out.push_back(passkey_example(corpus::gen_passkey(sample_seed, len, rng.uniform()), mix.answer_weight));
    }
    return out;
  };
}

// A passkey prompt with its answer, labelled by the boundary rule so it can
// join chunker and adapter training data.
inline corpus::LabeledDoc passkey_doc(const corpus::PasskeySample& s) {
  corpus::LabeledDoc d;
  std::vector<int> seq = s.prompt();
  seq.insert(seq.end(), s.answer.begin(), s.answer.end());
  d.text = corpus::detokenize(seq);
  d.tokens = std::move(seq);
  d.labels = corpus::label_boundaries(d.text);
  return d;
}

// Chunker training set: sentence docs plus passkey docs in ratio 4:1.
inline std::vector<corpus::LabeledDoc> chunker_docs(std::uint64_t seed, std::size_t n_docs, corpus::LenRange len) {
  auto docs = corpus::gen_sentences(seed, n_docs, len);
  const auto pk = corpus::gen_passkey_set(splitmix64(seed ^ 0x70a55), n_docs / 4, len.max_tokens);
  for (const auto& s : pk) docs.push_back(passkey_doc(s));
  return docs;
}

// Adapter distillation: one sequence of `seqlen` tokens per step; every
// fourth step is a passkey sample.
inline chunkllm::DocSource adapter_source(std::uint64_t seed, std::size_t seqlen) {
  return [seed, seqlen](std::size_t step) {
    Rng rng = detail::step_rng(seed, "adapter-batch", step);
    if (step % 4 == 3) {
      const auto len = static_cast<std::size_t>(rng.range(static_cast<std::int64_t>(seqlen / 2),
                                                          static_cast<std::int64_t>(seqlen - 8)));
      const auto s = rng.engine()();
      return std::vector<corpus::LabeledDoc>{passkey_doc(corpus::gen_passkey(s, len, rng.uniform()))};
    }
    return std::vector<corpus::LabeledDoc>{corpus::gen_doc(rng, {seqlen * 3 / 4, seqlen})};
  };
}

}  // namespace chunkllm::recipes
