// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>

#include "chunkllm/corpus/corpus.hpp"
#include "chunkllm/corpus/jsonl.hpp"

using namespace chunkllm;
using namespace chunkllm::corpus;

namespace {

std::vector<std::size_t> ones(const std::vector<std::uint8_t>& y) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (y[i]) out.push_back(i);
  return out;
}

std::size_t count_substr(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1)) ++n;
  return n;
}

}  // namespace

TEST(Tokenizer, ByteRoundTrip) {
  std::string s = "Hello, w\xc3\xb6rld!\n";
  EXPECT_EQ(detokenize(tokenize(s)), s);
  std::string all(256, '\0');
  for (int i = 0; i < 256; ++i) all[static_cast<std::size_t>(i)] = static_cast<char>(i);
  EXPECT_EQ(detokenize(tokenize(all)), all);
  EXPECT_THROW(detokenize(std::vector<int>{256}), IndexError);
}

TEST(RuleOracle, TwoSentences) {
  EXPECT_EQ(ones(label_boundaries("Hi there. Bye.")), (std::vector<std::size_t>{8, 13}));
}

TEST(RuleOracle, DecimalIsNotBoundary) {
  EXPECT_EQ(ones(label_boundaries("Pi is 3.14 exactly.")), (std::vector<std::size_t>{18}));
}

TEST(RuleOracle, SingleLetterSentences) { EXPECT_EQ(ones(label_boundaries("A. B.")), (std::vector<std::size_t>{1, 4})); }

TEST(RuleOracle, VersionNumberHasNoInteriorBoundary) {
  const std::string s = "v1.2 works";
  auto y = label_boundaries(s);
  EXPECT_EQ(ones(y), (std::vector<std::size_t>{s.size() - 1}));  // document end only
}

TEST(RuleOracle, AbbreviationsAreNotBoundaries) {
  EXPECT_EQ(ones(label_boundaries("Ask Dr. Lee now! Use e.g. this one?")),
            (std::vector<std::size_t>{15, 34}));
}

TEST(RuleOracle, TerminatorNeedsFollowingSpace) {
  EXPECT_EQ(ones(label_boundaries("a.b ok? x")), (std::vector<std::size_t>{6, 8}));
}

TEST(Generator, SameSeedIsBitIdentical) {
  auto a = gen_sentences(5, 20, {200, 400});
  auto b = gen_sentences(5, 20, {200, 400});
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].text, b[i].text);
    EXPECT_EQ(a[i].labels, b[i].labels);
  }
  EXPECT_NE(gen_sentences(6, 1, {200, 400})[0].text, a[0].text);
}

TEST(Generator, LabelsMatchRuleOracle) {
  for (const auto& d : gen_sentences(17, 200, {64, 2048})) {
    ASSERT_EQ(d.labels, label_boundaries(d.text)) << d.text;
    ASSERT_EQ(d.tokens.size(), d.labels.size());
  }
}

TEST(GeneratorProperty, EndsWithBoundaryAndSentenceCountMatches) {
  for (const auto& d : gen_sentences(18, 100, {100, 1000})) {
    ASSERT_EQ(d.labels.back(), 1);
    std::size_t sentences = 1;  // single-space separators between sentences
    for (std::size_t i = 0; i + 1 < d.text.size(); ++i) sentences += d.labels[i] && d.text[i + 1] == ' ';
    ASSERT_EQ(ones(d.labels).size(), sentences);
    ASSERT_LE(d.text.size(), 1000u);
  }
}

TEST(GeneratorProperty, BoundaryFractionInRange) {
  std::size_t tokens = 0, boundaries = 0;
  for (const auto& d : gen_sentences(19, 100, {512, 1024})) {
    tokens += d.tokens.size();
    boundaries += ones(d.labels).size();
  }
  const double frac = static_cast<double>(boundaries) / static_cast<double>(tokens);
  EXPECT_GE(frac, 0.02);
  EXPECT_LE(frac, 0.15);
}

TEST(GeneratorProperty, SentenceLengthsAndConfuserRate) {
  Rng rng(20);
  Grammar g;
  std::size_t confused = 0;
  const std::size_t n = 4000;
  for (std::size_t i = 0; i < n; ++i) {
    std::string s;
    std::vector<std::uint8_t> y;
    append_sentence(rng, g, s, y);
    std::size_t words = 1;
    for (char c : s) words += c == ' ';
    // A title + name confuser contributes two space-separated pieces.
    ASSERT_GE(words, 4u);
    ASSERT_LE(words, 31u);
    // Only confusers put a terminator character before the sentence end.
    bool has = false;
    for (std::size_t j = 0; j + 1 < s.size(); ++j) has = has || is_terminator(s[j]);
    confused += has;
    ASSERT_TRUE(is_terminator(s.back()));
  }
  const double rate = static_cast<double>(confused) / n;
  EXPECT_NEAR(rate, 0.10, 0.02);
}

TEST(Passkey, NeedleAppearsExactlyOnce) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto s = gen_passkey(seed, 256 + seed * 40, static_cast<double>(seed % 11) / 10.0);
    const std::string ctx = detokenize(s.context);
    ASSERT_EQ(count_substr(ctx, needle_sentence(s.needle)), 1u);
    ASSERT_EQ(count_substr(ctx, "pass key"), 1u);
    ASSERT_EQ(s.needle.size(), kPasskeyDigits);
    ASSERT_LE(s.prompt().size(), 256 + seed * 40);
    ASSERT_EQ(detokenize(s.answer), s.needle);
  }
}

TEST(Passkey, DepthPlacement) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (std::size_t len : {1024u, 4096u}) {
      auto lo = gen_passkey(seed, len, 0.0);
      auto hi = gen_passkey(seed, len, 1.0);
      EXPECT_LT(static_cast<double>(lo.needle_offset), 0.1 * static_cast<double>(lo.context.size()));
      EXPECT_GE(static_cast<double>(hi.needle_offset), 0.9 * static_cast<double>(hi.context.size()));
      auto mid = gen_passkey(seed, len, 0.5);
      EXPECT_NEAR(static_cast<double>(mid.needle_offset) / static_cast<double>(mid.context.size()), 0.5, 0.05);
    }
  }
}

TEST(Passkey, TooSmallContextIsInputError) { EXPECT_THROW(gen_passkey(1, 40, 0.5), InputError); }

TEST(Passkey, SetCoversEveryDecile) {
  auto set = gen_passkey_set(3, 30, 512);
  std::vector<int> per(10, 0);
  for (const auto& s : set) ++per[std::min<std::size_t>(9, static_cast<std::size_t>(s.depth * 10))];
  for (int c : per) EXPECT_EQ(c, 3);
}

TEST(Batches, WindowCount) {
  LabeledDoc d;
  d.text = "abcdefghijklmnop";
  d.tokens = tokenize(d.text);
  d.labels = label_boundaries(d.text);
  auto b = make_batches({d}, 8, 1);
  EXPECT_EQ(b.size(), 2u);
}

TEST(Batches, TargetsShiftedAndLabelsAligned) {
  auto docs = gen_sentences(4, 5, {100, 300});
  std::vector<int> stream;
  std::vector<std::uint8_t> labels;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (i) {
      stream.push_back('\n');
      labels.push_back(0);
    }
    stream.insert(stream.end(), docs[i].tokens.begin(), docs[i].tokens.end());
    labels.insert(labels.end(), docs[i].labels.begin(), docs[i].labels.end());
  }
  const std::size_t seqlen = 37;
  auto batches = make_batches(docs, seqlen, 2);
  std::size_t w = 0;
  for (const auto& b : batches)
    for (const auto& win : b) {
      for (std::size_t i = 0; i + 1 < seqlen; ++i) ASSERT_EQ(win.targets[i], win.inputs[i + 1]);
      for (std::size_t i = 0; i < seqlen; ++i) {
        ASSERT_EQ(win.inputs[i], stream[w * seqlen + i]);
        ASSERT_EQ(win.labels[i], labels[w * seqlen + i]);
      }
      ++w;
    }
  EXPECT_EQ(w, (stream.size() / seqlen) / 2 * 2);
}

TEST(Jsonl, DocsRoundTrip) {
  auto docs = gen_sentences(8, 10, {50, 200});
  const auto path = std::filesystem::temp_directory_path() / "chunkllm_corpus_rt.jsonl";
  write_docs_jsonl(path.string(), docs);
  auto back = read_docs_jsonl(path.string());
  ASSERT_EQ(back.size(), docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    EXPECT_EQ(back[i].text, docs[i].text);
    EXPECT_EQ(back[i].labels, docs[i].labels);
  }
  std::filesystem::remove(path);
}

TEST(Jsonl, PasskeyRoundTrip) {
  auto set = gen_passkey_set(9, 5, 300);
  const auto path = std::filesystem::temp_directory_path() / "chunkllm_passkey_rt.jsonl";
  write_passkey_jsonl(path.string(), set);
  auto back = read_passkey_jsonl(path.string());
  ASSERT_EQ(back.size(), set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    EXPECT_EQ(back[i].context, set[i].context);
    EXPECT_EQ(back[i].needle, set[i].needle);
    EXPECT_EQ(back[i].needle_offset, set[i].needle_offset);
    EXPECT_DOUBLE_EQ(back[i].depth, set[i].depth);
  }
  std::filesystem::remove(path);
}

TEST(Jsonl, MisalignedLabelsAreFormatError) {
  const auto path = std::filesystem::temp_directory_path() / "chunkllm_bad.jsonl";
  {
    std::ofstream f(path);
    f << R"({"text": "abc", "labels": [0, 1]})" << '\n';
  }
  EXPECT_THROW(read_docs_jsonl(path.string()), FormatError);
  std::filesystem::remove(path);
}
