// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic sentence corpora with boundary labels, passkey-retrieval
// samples, and LM batching.
//
// A boundary is the last token of a sentence. The generator never places a
// number or an abbreviation as the last word of a sentence, so every label is
// decidable from the text up to and including the labeled token.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "chunkllm/errors.hpp"
#include "chunkllm/numerics/random.hpp"

namespace chunkllm::corpus {

// ---------------------------------------------------------------- tokenizer

// Byte-level identity tokenizer.
inline std::vector<int> tokenize(std::string_view s) {
  std::vector<int> t(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) t[i] = static_cast<unsigned char>(s[i]);
  return t;
}

inline std::string detokenize(std::span<const int> tokens) {
  std::string s(tokens.size(), '\0');
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] > 255) throw IndexError("detokenize: token outside byte range");
    s[i] = static_cast<char>(tokens[i]);
  }
  return s;
}

struct LabeledDoc {
  std::string text;
  std::vector<int> tokens;
  std::vector<std::uint8_t> labels;  // 1 = last token of a chunk
};

// ---------------------------------------------------------------- rule oracle

inline constexpr std::array<std::string_view, 8> kAbbreviations = {"Dr.", "Mr.", "Mrs.", "Ms.",
                                                                   "St.", "vs.", "e.g.", "i.e."};

inline bool is_terminator(char c) { return c == '.' || c == '!' || c == '?'; }
inline bool is_space(char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r'; }
inline bool is_digit(char c) { return c >= '0' && c <= '9'; }

// True iff the word containing position p (delimited by whitespace) ends at p
// and is one of kAbbreviations.
inline bool ends_abbreviation(std::string_view text, std::size_t p) {
  std::size_t w = p;
  while (w > 0 && !is_space(text[w - 1])) --w;
  const std::string_view word = text.substr(w, p - w + 1);
  return std::find(kAbbreviations.begin(), kAbbreviations.end(), word) != kAbbreviations.end();
}

inline std::vector<std::uint8_t> label_boundaries(std::string_view text) {
  std::vector<std::uint8_t> y(text.size(), 0);
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (!is_terminator(text[i])) continue;
    const bool at_end = i + 1 == text.size();
    if (!at_end && !is_space(text[i + 1])) continue;
    if (i > 0 && !at_end && is_digit(text[i - 1]) && is_digit(text[i + 1])) continue;
    if (text[i] == '.' && ends_abbreviation(text, i)) continue;
    y[i] = 1;
  }
  if (!y.empty()) y.back() = 1;
  return y;
}

// ---------------------------------------------------------------- grammar

// Word list in rough frequency order; draws are Zipf-weighted by rank.
inline constexpr std::array<std::string_view, 96> kWords = {
    "the",   "a",     "of",    "to",    "and",   "in",    "is",    "it",    "we",    "you",   "he",    "she",
    "they",  "was",   "for",   "on",    "are",   "with",  "as",    "at",    "be",    "this",  "have",  "from",
    "or",    "one",   "had",   "by",    "word",  "but",   "not",   "what",  "all",   "were",  "when",  "can",
    "said",  "there", "use",   "an",    "each",  "which", "do",    "how",   "their", "if",    "will",  "up",
    "other", "about", "out",   "many",  "then",  "them",  "these", "so",    "some",  "her",   "would", "make",
    "like",  "him",   "into",  "time",  "has",   "look",  "two",   "more",  "write", "go",    "see",   "number",
    "no",    "way",   "could", "people", "my",   "than",  "first", "water", "been",  "call",  "who",   "oil",
    "its",   "now",   "find",  "long",  "down",  "day",   "did",   "get",   "come",  "made",  "may",   "part"};

inline constexpr std::array<std::string_view, 6> kNames = {"Lee", "Khan", "Silva", "Brown", "Novak", "Ito"};

struct Grammar {
  std::size_t min_words = 4;
  std::size_t max_words = 30;
  double mean_extra_words = 2.0;  // geometric tail above min_words
  double confuser_rate = 0.10;    // fraction of sentences carrying one confuser
  double zipf_s = 1.0;
};

namespace detail {

class SentenceWriter {
 public:
  SentenceWriter(std::string& text, std::vector<std::uint8_t>& labels) : text_(text), labels_(labels) {}
  void put(std::string_view s) {
    text_.append(s);
    labels_.insert(labels_.end(), s.size(), 0);
  }
  void put_boundary(char c) {
    text_.push_back(c);
    labels_.push_back(1);
  }

 private:
  std::string& text_;
  std::vector<std::uint8_t>& labels_;
};

inline const std::vector<double>& zipf_cdf(double s) {
  static thread_local double cached_s = -1;
  static thread_local std::vector<double> cdf;
  if (cached_s != s) {
    cdf.assign(kWords.size(), 0);
    double acc = 0;
    for (std::size_t r = 0; r < kWords.size(); ++r) cdf[r] = acc += 1.0 / std::pow(static_cast<double>(r + 1), s);
    for (auto& v : cdf) v /= acc;
    cached_s = s;
  }
  return cdf;
}

inline std::string_view draw_word(Rng& rng, const Grammar& g) {
  const auto& cdf = zipf_cdf(g.zipf_s);
  const auto it = std::lower_bound(cdf.begin(), cdf.end(), rng.uniform());
  return kWords[std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), kWords.size() - 1)];
}

inline std::string draw_confuser(Rng& rng) {
  switch (rng.index(4)) {
    case 0:  // decimal number
      return std::to_string(rng.range(0, 9)) + "." + std::to_string(rng.range(0, 9)) + std::to_string(rng.range(0, 9));
    case 1:  // title + name
      return std::string(kAbbreviations[rng.index(5)]) + " " + std::string(kNames[rng.index(kNames.size())]);
    default:  // vs. / e.g. / i.e.
      return std::string(kAbbreviations[5 + rng.index(3)]);
  }
}

}  // namespace detail

// Appends one sentence (no leading separator) to text/labels.
inline void append_sentence(Rng& rng, const Grammar& g, std::string& text, std::vector<std::uint8_t>& labels) {
  detail::SentenceWriter out(text, labels);
  const double p = 1.0 / (1.0 + g.mean_extra_words);
  std::size_t n = g.min_words;
  while (n < g.max_words && !rng.bernoulli(p)) ++n;
  // A confuser replaces a word at a non-final slot.
  const bool confuse = rng.bernoulli(g.confuser_rate);
  const std::size_t slot = confuse ? rng.index(n - 1) : n;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) out.put(" ");
    if (i == slot) {
      out.put(detail::draw_confuser(rng));
      continue;
    }
    std::string w(detail::draw_word(rng, g));
    if (i == 0) w[0] = static_cast<char>(w[0] - 'a' + 'A');
    out.put(w);
  }
  const double u = rng.uniform();
  out.put_boundary(u < 0.7 ? '.' : (u < 0.85 ? '!' : '?'));
}

struct LenRange {
  std::size_t min_tokens = 256;
  std::size_t max_tokens = 1024;
};

// Sentences separated by single spaces until the next one would overshoot a
// length drawn uniformly from `len`. Always holds at least one sentence.
inline LabeledDoc gen_doc(Rng& rng, LenRange len, const Grammar& g = {}) {
  if (len.min_tokens > len.max_tokens) throw InputError("gen_doc: empty length range");
  const auto target = static_cast<std::size_t>(
      rng.range(static_cast<std::int64_t>(len.min_tokens), static_cast<std::int64_t>(len.max_tokens)));
  LabeledDoc d;
  std::string s;
  std::vector<std::uint8_t> y;
  for (;;) {
    s.clear();
    y.clear();
    append_sentence(rng, g, s, y);
    const std::size_t sep = d.text.empty() ? 0 : 1;
    if (!d.text.empty() && d.text.size() + sep + s.size() > target) break;
    if (sep) {
      d.text.push_back(' ');
      d.labels.push_back(0);
    }
    d.text += s;
    d.labels.insert(d.labels.end(), y.begin(), y.end());
  }
  d.tokens = tokenize(d.text);
  return d;
}

inline std::vector<LabeledDoc> gen_sentences(std::uint64_t seed, std::size_t n_docs, LenRange len,
                                             const Grammar& g = {}) {
  Rng rng(seed, "corpus");
  std::vector<LabeledDoc> docs;
  docs.reserve(n_docs);
  for (std::size_t i = 0; i < n_docs; ++i) docs.push_back(gen_doc(rng, len, g));
  return docs;
}

// ---------------------------------------------------------------- passkey

inline constexpr std::string_view kNeedlePrefix = "The pass key is ";
inline constexpr std::string_view kQuestion = " What is the pass key? The pass key is ";
inline constexpr std::size_t kPasskeyDigits = 5;

struct PasskeySample {
  std::vector<int> context;
  std::string needle;  // the 5-digit value
  double depth = 0;
  std::size_t needle_offset = 0;  // token index where the needle sentence starts
  std::vector<int> question;
  std::vector<int> answer;

  std::vector<int> prompt() const {
    std::vector<int> p = context;
    p.insert(p.end(), question.begin(), question.end());
    return p;
  }
};

inline std::string needle_sentence(std::string_view value) { return std::string(kNeedlePrefix) + std::string(value) + "."; }

// `context_len` bounds context plus question. The needle sentence is placed
// at the sentence boundary closest to depth * (context tokens).
inline PasskeySample gen_passkey(std::uint64_t seed, std::size_t context_len, double depth, const Grammar& g = {}) {
  if (!(depth >= 0.0 && depth <= 1.0)) throw InputError("gen_passkey: depth outside [0, 1]");
  Rng rng(seed, "passkey");
  PasskeySample ps;
  ps.depth = depth;
  ps.needle = std::to_string(rng.range(10000, 99999));
  const std::string needle = needle_sentence(ps.needle);
  if (context_len < needle.size() + kQuestion.size()) throw InputError("gen_passkey: context too small for needle and question");
  const std::size_t budget = context_len - kQuestion.size();

  std::vector<std::string> filler;
  std::size_t used = needle.size();
  for (;;) {
    std::string s;
    std::vector<std::uint8_t> y;
    append_sentence(rng, g, s, y);
    if (used + 1 + s.size() > budget) break;
    used += 1 + s.size();
    filler.push_back(std::move(s));
  }
  // Pick the insertion slot whose start offset is closest to the target.
  const double target = depth * static_cast<double>(used);
  std::size_t slot = 0, offset = 0, best_offset = 0;
  double best = std::abs(target);
  for (std::size_t i = 0; i < filler.size(); ++i) {
    offset += filler[i].size() + 1;
    if (std::abs(static_cast<double>(offset) - target) < best) {
      best = std::abs(static_cast<double>(offset) - target);
      slot = i + 1;
      best_offset = offset;
    }
  }
  std::string text;
  for (std::size_t i = 0; i <= filler.size(); ++i) {
    if (i == slot) {
      if (!text.empty()) text.push_back(' ');
      text += needle;
    }
    if (i < filler.size()) {
      if (!text.empty()) text.push_back(' ');
      text += filler[i];
    }
  }
  ps.needle_offset = best_offset;
  ps.context = tokenize(text);
  ps.question = tokenize(kQuestion);
  ps.answer = tokenize(ps.needle);
  return ps;
}

// Samples for evaluation sweeps: sample i uses its own seed and depth
// (i mod 10 + u) / 10 for uniform u, so every decile is covered.
inline std::vector<PasskeySample> gen_passkey_set(std::uint64_t seed, std::size_t n, std::size_t context_len,
                                                  const Grammar& g = {}) {
  Rng rng(seed, "passkey-set");
  std::vector<PasskeySample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double depth = (static_cast<double>(i % 10) + rng.uniform()) / 10.0;
    out.push_back(gen_passkey(splitmix64(seed + 0x51ed27 * (i + 1)), context_len, depth, g));
  }
  return out;
}

// ---------------------------------------------------------------- batching

struct Window {
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<float> weights;  // 0 where no next token exists
  std::vector<std::uint8_t> labels;
};

using Batch = std::vector<Window>;

// Docs are concatenated with a '\n' separator (label 0) and cut into
// contiguous windows of `seqlen` inputs. targets[i] is the stream token after
// inputs[i]; the final stream position has weight 0. Trailing windows that do
// not fill a batch are dropped.
inline std::vector<Batch> make_batches(const std::vector<LabeledDoc>& docs, std::size_t seqlen, std::size_t batch) {
  if (seqlen == 0 || batch == 0) throw InputError("make_batches: seqlen and batch must be positive");
  std::vector<int> stream;
  std::vector<std::uint8_t> labels;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (docs[i].tokens.size() != docs[i].labels.size()) throw InputError("make_batches: labels misaligned");
    if (i) {
      stream.push_back('\n');
      labels.push_back(0);
    }
    stream.insert(stream.end(), docs[i].tokens.begin(), docs[i].tokens.end());
    labels.insert(labels.end(), docs[i].labels.begin(), docs[i].labels.end());
  }
  const std::size_t n_windows = stream.size() / seqlen;
  std::vector<Batch> out;
  for (std::size_t w = 0; w + batch <= n_windows; w += batch) {
    Batch b;
    for (std::size_t j = w; j < w + batch; ++j) {
      Window win;
      const std::size_t s = j * seqlen;
      win.inputs.assign(stream.begin() + static_cast<std::ptrdiff_t>(s),
                        stream.begin() + static_cast<std::ptrdiff_t>(s + seqlen));
      win.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(s),
                        labels.begin() + static_cast<std::ptrdiff_t>(s + seqlen));
      win.targets.resize(seqlen);
      win.weights.resize(seqlen);
      for (std::size_t i = 0; i < seqlen; ++i) {
        const bool has = s + i + 1 < stream.size();
        win.targets[i] = has ? stream[s + i + 1] : 0;
        win.weights[i] = has ? 1.0f : 0.0f;
      }
      b.push_back(std::move(win));
    }
    out.push_back(std::move(b));
  }
  return out;
}

// Per-byte unigram entropy (nats) of a corpus.
inline double unigram_entropy(const std::vector<LabeledDoc>& docs) {
  std::array<double, 256> counts{};
  double total = 0;
  for (const auto& d : docs)
    for (int t : d.tokens) {
      counts[static_cast<std::size_t>(t)] += 1;
      total += 1;
    }
  double h = 0;
  for (double c : counts)
    if (c > 0) h -= (c / total) * std::log(c / total);
  return h;
}

}  // namespace chunkllm::corpus
