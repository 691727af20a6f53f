// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "chunkllm/engine/engine.hpp"
#include "chunkllm/engine/eval.hpp"
#include "chunkllm/engine/policy_json.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace chunkllm;

namespace {

struct Bundle {
  BackboneWeights<float> w;
  ChunkAdapterParams<float> chunker;
  QKAdapterParams<float> qk;

  explicit Bundle(ModelConfig c, float chunk_bias = -2.0f, std::uint64_t seed = 7)
      : w(init_weights<float>(c)), qk(QKAdapterParams<float>::init(c, c.d_head, seed)) {
    Rng rng(seed, "test-chunker");
    chunker = {rng.normal_tensor<float>({c.d_model, 1}, 20.0), Tensor<float>({1})};  // logits of order 1
    chunker.bias[0] = chunk_bias;
  }
  EngineModel<float> model() const { return {&w, &chunker, &qk}; }
};

PolicyConfig policy(Policy p) {
  PolicyConfig c;
  c.policy = p;
  return c;
}

// Tokens of chunks in `on` plus the tail up to and including position pos.
std::size_t hand_active(const ChunkMap& before, const std::vector<std::size_t>& on, std::size_t pos) {
  std::size_t n = 1;
  for (std::size_t j : on) n += before.chunk(j).size();
  return n + (pos - before.tail().begin);
}

}  // namespace

// ---------------------------------------------------------------- policy config

TEST(PolicyConfig, DefaultsMatchSettings) {
  PolicyConfig p;
  EXPECT_EQ(p.policy, Policy::chunkllm);
  EXPECT_EQ(p.k.mode, KMode::ratio);
  EXPECT_DOUBLE_EQ(p.k.value, 0.45);
  EXPECT_EQ(p.local_chunks, 15u);
  EXPECT_EQ(p.sink_chunks, 1u);
  EXPECT_TRUE(p.vote);
  EXPECT_TRUE(p.icac);
}

TEST(PolicyConfig, JsonRoundTripAndErrors) {
  PolicyConfig p;
  p.policy = Policy::fixed_chunk;
  p.k = KSpec::absolute(256);
  p.local_chunks = 24;
  p.icac = false;
  const auto back = policy_from_json(policy_to_json(p));
  EXPECT_EQ(policy_to_json(back), policy_to_json(p));
  EXPECT_THROW(policy_from_json(nlohmann::json{{"polcy", "full"}}), ConfigError);
  EXPECT_THROW(policy_from_json(nlohmann::json{{"policy", "sparse"}}), ConfigError);
  EXPECT_THROW(policy_from_json(nlohmann::json{{"k_value", "many"}}), ConfigError);
  EXPECT_THROW(policy_from_json(nlohmann::json{{"k_value", 1.5}}), ConfigError);
  EXPECT_THROW(policy_from_json(nlohmann::json{{"alpha", 1.0}}), DomainError);
}

TEST(KSpec, Resolution) {
  EXPECT_EQ(KSpec::ratio(0.45).resolve(20), 9u);
  EXPECT_EQ(KSpec::ratio(0.45).resolve(1), 1u);
  EXPECT_EQ(KSpec::ratio(0.45).resolve(0), 0u);
  EXPECT_EQ(KSpec::ratio(0.5).resolve(7), 4u);
  EXPECT_EQ(KSpec::absolute(256).resolve(100), 100u);
  EXPECT_EQ(KSpec::absolute(3).resolve(100), 3u);
}

// ---------------------------------------------------------------- selection

TEST(Vote, CountThenScoreThenIndex) {
  // Top-2 sets {1,2}, {2,3}, {2,4}; count-1 chunks tie on summed score.
  const std::vector<std::vector<float>> s{{0, 1, 1, 0, 0}, {0, 0, 1, 1, 0}, {0, 0, 1, 0, 1}};
  std::vector<std::span<const float>> spans(s.begin(), s.end());
  EXPECT_EQ(vote_topk(spans, 2), (std::vector<std::size_t>{1, 2}));
}

TEST(Vote, UnanimousLayersGiveTheirSet) {
  const std::vector<std::vector<float>> s{{5, 1, 4, 0}, {9, 0, 8, 1}, {3, 2, 7, 1}};
  std::vector<std::span<const float>> spans(s.begin(), s.end());
  EXPECT_EQ(vote_topk(spans, 2), (std::vector<std::size_t>{0, 2}));
}

TEST(VoteProperty, MatchesBruteForceRule) {
  Rng rng(1);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t layers = 4, c = 8, k = 3;
    std::vector<std::vector<double>> s(layers, std::vector<double>(c));
    for (auto& row : s)
      for (auto& v : row) v = static_cast<double>(rng.index(4));  // coarse values force ties
    std::vector<std::span<const double>> spans(s.begin(), s.end());
    const auto got = vote_topk(spans, k);
    const auto want = oracle::vote(s, k);
    ASSERT_EQ(std::set<std::size_t>(got.begin(), got.end()), want);
  }
}

TEST(TopkProperty, MatchesSelectionSortOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> s(1 + rng.index(20));
    for (auto& v : s) v = static_cast<double>(rng.index(5));
    const std::size_t k = 1 + rng.index(s.size());
    ASSERT_EQ(topk_indices(std::span<const double>(s), k), oracle::topk(s, k));
  }
}

TEST(Select, NoVoteUsesBottomLayer) {
  Bundle b(fixture::tiny_config());
  auto cfg = policy(Policy::fixed_chunk);
  cfg.fixed_chunk_len = 8;
  cfg.vote = false;
  Engine<float> eng(b.model(), cfg);
  Rng rng(3);
  const auto prompt = fixture::random_tokens(rng, 100);
  auto st = eng.prefill(prompt);
  std::vector<std::vector<float>> q(2);
  for (auto& v : q) v = rng.normal_tensor<float>({32}, 1.0).storage();
  const auto scores = eng.chunk_scores(st, q);
  auto want = topk_indices(std::span<const float>(scores[0]), cfg.k.resolve(st.chunks.chunks()));
  std::sort(want.begin(), want.end());
  EXPECT_EQ(eng.select_chunks(st, q), want);
}

// ---------------------------------------------------------------- equivalence

TEST(Full, MatchesVanillaDecodingLogits) {
  Bundle b(fixture::tiny_config());
  Engine<float> eng(b.model(), policy(Policy::full));
  Rng rng(4);
  for (int p = 0; p < 3; ++p) {
    const auto prompt = fixture::random_tokens(rng, 20 + rng.index(100));
    const auto van = generate_vanilla(b.w, prompt, 32);
    const auto got = generate(eng, prompt, 32);
    ASSERT_EQ(got.tokens, van.tokens);
    for (std::size_t s = 0; s < 32; ++s)
      for (std::size_t v = 0; v < 256; ++v) ASSERT_NEAR(got.step_logits[s][v], van.step_logits[s][v], 1e-4);
    for (const auto& r : got.log) ASSERT_EQ(r.retention, 1.0);
  }
}

TEST(Streaming, WideWindowEqualsFull) {
  Bundle b(fixture::tiny_config());
  auto cfg = policy(Policy::streaming);
  cfg.stream_window_tokens = 1024;
  Engine<float> stream(b.model(), cfg), full(b.model(), policy(Policy::full));
  Rng rng(5);
  const auto prompt = fixture::random_tokens(rng, 50);
  const auto a = generate(stream, prompt, 40), c = generate(full, prompt, 40);
  EXPECT_EQ(a.tokens, c.tokens);
  EXPECT_EQ(a.step_logits, c.step_logits);
}

TEST(Streaming, ActiveSetIsSinkPlusWindow) {
  Bundle b(fixture::tiny_config());
  auto cfg = policy(Policy::streaming);
  cfg.stream_sink_tokens = 4;
  cfg.stream_window_tokens = 16;
  Engine<float> eng(b.model(), cfg);
  Rng rng(6);
  auto st = eng.prefill(fixture::random_tokens(rng, 100));
  eng.feed(st, 'a');
  EXPECT_EQ(eng.attention_ranges(st, 101), (std::vector<TokenRange>{{0, 4}, {86, 101}}));
  EXPECT_EQ(st.log.back().active_tokens, 20u);
}

// ---------------------------------------------------------------- chunk maps

TEST(FixedChunk, SixHundredFortyTokensGiveTenChunks) {
  Bundle b(fixture::tiny_config());
  auto cfg = policy(Policy::fixed_chunk);
  cfg.fixed_chunk_len = 64;
  Engine<float> eng(b.model(), cfg);
  Rng rng(7);
  auto st = eng.prefill(fixture::random_tokens(rng, 640));
  EXPECT_EQ(st.chunks.chunks(), 10u);
  EXPECT_EQ(st.chunks.tail().size(), 0u);
}

TEST(Prefill, ShortPromptHasNoChunks) {
  Bundle b(fixture::tiny_config(), -50.0f);
  Engine<float> eng(b.model(), policy(Policy::chunkllm));
  auto st = eng.prefill(corpus::tokenize("Hello"));
  EXPECT_EQ(st.chunks.chunks(), 0u);
  EXPECT_TRUE(st.selected.empty());
  eng.feed(st, ' ');
  EXPECT_EQ(st.log.back().active_tokens, 6u);
  EXPECT_EQ(st.log.back().retention, 1.0);
}

TEST(Prefill, OverflowIsInputError) {
  Bundle b(fixture::tiny_config());
  Engine<float> eng(b.model(), policy(Policy::full));
  EXPECT_THROW(eng.prefill(std::vector<int>(1025, 1)), InputError);
  EXPECT_THROW(eng.prefill(std::vector<int>{}), InputError);
}

TEST(Engine, MissingAdaptersAreConfigErrors) {
  Bundle b(fixture::tiny_config());
  EXPECT_THROW(Engine<float>({&b.w, nullptr, &b.qk}, policy(Policy::chunkllm)), ConfigError);
  EXPECT_THROW(Engine<float>({&b.w, &b.chunker, nullptr}, policy(Policy::fixed_chunk)), ConfigError);
  EXPECT_NO_THROW(Engine<float>({&b.w, nullptr, nullptr}, policy(Policy::full)));
}

// Sentences of exactly 64 tokens: the learned chunker and the fixed
// segmentation agree on every boundary, so selections must agree too.
TEST(FixedChunk, CoincidingBoundariesGiveIdenticalSelections) {
  Bundle b(fixture::tiny_config());
  Rng rng(8);
  auto sentence = [&] {
    std::string s;
    while (s.size() < 63) { s += corpus::kWords[rng.index(corpus::kWords.size())]; s += " "; }
    s.resize(62);
    if (s.back() == ' ') s.back() = 'x';
    return s + ". ";
  };
  auto doc = [&](std::size_t n) {
    std::string t;
    for (std::size_t i = 0; i < n; ++i) t += sentence();
    return t;  // every 64th token is '.', followed by a space
  };
  // The label of a '.' is always 1 here; ' ' follows and starts the next chunk.
  // Shift by one so a chunk ends on the '.' at offsets 62, 126, ... by
  // prefixing a single space.
  std::vector<corpus::LabeledDoc> train;
  for (int i = 0; i < 12; ++i) {
    corpus::LabeledDoc d;
    d.text = " " + doc(6);
    d.text.pop_back();
    d.tokens = corpus::tokenize(d.text);
    d.labels = corpus::label_boundaries(d.text);
    train.push_back(d);
  }
  ChunkerTrainConfig tc;
  tc.steps = 300;
  b.chunker = train_chunker(chunker_features(b.w, train), 32, tc).params;

  const std::string text = " " + doc(10);
  const auto toks = corpus::tokenize(text);
  const std::vector<int> prompt(toks.begin(), toks.begin() + 448);  // 7 sentences
  std::vector<std::uint8_t> want(448, 0);
  for (std::size_t i = 63; i < 448; i += 64) want[i] = 1;
  ASSERT_EQ(predict_boundaries(hidden_l1(b.w, prompt), b.chunker), want) << "chunker must be exact on this grammar";

  auto cfg_c = policy(Policy::chunkllm);
  cfg_c.k = KSpec::absolute(2);
  cfg_c.local_chunks = 1;
  auto cfg_f = cfg_c;
  cfg_f.policy = Policy::fixed_chunk;
  cfg_f.fixed_chunk_len = 64;
  Engine<float> ec(b.model(), cfg_c), ef(b.model(), cfg_f);
  auto sc = ec.prefill(prompt), sf = ef.prefill(prompt);
  ASSERT_EQ(sc.chunks, sf.chunks);
  EXPECT_EQ(sc.selected, sf.selected);
  for (std::size_t i = 448; i < toks.size(); ++i) {
    ec.feed(sc, toks[i]);
    ef.feed(sf, toks[i]);
    ASSERT_EQ(sc.chunks, sf.chunks) << "position " << i;
    ASSERT_EQ(sc.selected, sf.selected) << "position " << i;
    ASSERT_EQ(sc.logits, sf.logits);
  }
}

// ---------------------------------------------------------------- retention

TEST(Retention, ScriptedThreeChunkScenario) {
  // Three 10-token chunks, k=1, m=1, s=1. Zero adapters tie every score, so
  // S = {0} and the active chunks are {0, c-1}.
  Bundle b(fixture::tiny_config());
  for (auto& L : b.qk.layers) {
    L.wq.fill(0);
    L.wk.fill(0);
  }
  auto cfg = policy(Policy::fixed_chunk);
  cfg.fixed_chunk_len = 10;
  cfg.k = KSpec::absolute(1);
  cfg.local_chunks = 1;
  cfg.sink_chunks = 1;
  Engine<float> eng(b.model(), cfg);
  Rng rng(9);
  auto st = eng.prefill(fixture::random_tokens(rng, 30));
  ASSERT_EQ(st.selected, (std::vector<std::size_t>{0}));
  ASSERT_EQ(st.active_chunks, (std::vector<std::size_t>{0, 2}));
  for (std::size_t t = 1; t <= 25; ++t) {
    eng.feed(st, 'a');
    // tokens 30..39 form chunk 3, closed at step 10; then 40..49 at step 20.
    const std::size_t tail = (t - 1) % 10;  // tail tokens before this step
    const double want = static_cast<double>(20 + tail + 1) / static_cast<double>(30 + t);
    ASSERT_EQ(st.log.back().retention, want) << "step " << t;
    ASSERT_EQ(st.log.back().active_tokens, 20 + tail + 1);
  }
}

TEST(Retention, FullPolicyIsExactlyOne) {
  Bundle b(fixture::tiny_config());
  Engine<float> eng(b.model(), policy(Policy::full));
  Rng rng(10);
  auto r = generate(eng, fixture::random_tokens(rng, 40), 20);
  for (const auto& m : r.log) {
    ASSERT_EQ(m.retention, 1.0);
    ASSERT_EQ(m.active_tokens, m.context_len);
  }
}

TEST(RetentionProperty, ActiveCountIsSinkSelectedLocalAndTail) {
  Bundle b(fixture::tiny_config(), -1.5f);
  auto cfg = policy(Policy::chunkllm);
  cfg.k = KSpec::ratio(0.3);
  cfg.local_chunks = 2;
  Engine<float> eng(b.model(), cfg);
  Rng rng(11);
  auto st = eng.prefill(fixture::random_tokens(rng, 200));
  for (int s = 0; s < 300; ++s) {
    const ChunkMap before = st.chunks;
    const auto on = st.active_chunks;
    const std::size_t pos = st.context();
    eng.feed(st, static_cast<int>(rng.index(256)));
    ASSERT_EQ(st.log.back().active_tokens, hand_active(before, on, pos));
    ASSERT_LE(st.selected.size(), cfg.k.resolve(st.chunks.chunks()));
    ASSERT_GT(st.log.back().retention, 0.0);
    ASSERT_LE(st.log.back().retention, 1.0);
  }
}

// ---------------------------------------------------------------- ICAC

TEST(IcacProperty, SelectionFixedBetweenBoundaries) {
  auto c = fixture::tiny_config();
  c.max_context = 10300;
  Bundle b(c, -2.0f);
  Engine<float> eng(b.model(), policy(Policy::chunkllm));
  Rng rng(12);
  auto st = eng.prefill(fixture::random_tokens(rng, 100));
  std::size_t boundaries = 0;
  for (int s = 0; s < 10000; ++s) {
    const auto sel = st.selected;
    const auto ranges = st.chunk_ranges;
    const std::size_t c0 = st.chunks.chunks();
    eng.feed(st, static_cast<int>(rng.index(256)));
    if (st.chunks.chunks() == c0) {
      ASSERT_FALSE(st.log.back().reselected);
      ASSERT_EQ(st.selected, sel);
      ASSERT_EQ(st.chunk_ranges, ranges);
    } else {
      ASSERT_TRUE(st.log.back().reselected);
      ++boundaries;
    }
  }
  EXPECT_GT(boundaries, 100u);
  EXPECT_LT(boundaries, 9900u);
}

TEST(Icac, AllBoundariesMakeIcacIrrelevant) {
  Bundle b(fixture::tiny_config(), 50.0f);
  auto on = policy(Policy::chunkllm), off = on;
  off.icac = false;
  Engine<float> a(b.model(), on), c(b.model(), off);
  Rng rng(13);
  const auto prompt = fixture::random_tokens(rng, 64);
  const auto ra = generate(a, prompt, 200), rc = generate(c, prompt, 200);
  EXPECT_EQ(ra.tokens, rc.tokens);
  EXPECT_EQ(ra.step_logits, rc.step_logits);
}

TEST(Icac, DisabledReselectsEveryStep) {
  Bundle b(fixture::tiny_config(), -50.0f);
  auto cfg = policy(Policy::chunkllm);
  cfg.icac = false;
  Engine<float> eng(b.model(), cfg);
  Rng rng(14);
  auto r = generate(eng, fixture::random_tokens(rng, 30), 10);
  for (const auto& m : r.log) EXPECT_TRUE(m.reselected);
}

// ---------------------------------------------------------------- store

TEST(ColdStore, KeysNeverRewrittenAcrossSelections) {
  Bundle b(fixture::tiny_config(), -1.0f);
  auto cfg = policy(Policy::chunkllm);
  cfg.k = KSpec::absolute(1);
  cfg.local_chunks = 0;
  Engine<float> eng(b.model(), cfg);
  Rng rng(15);
  const auto prompt = fixture::random_tokens(rng, 120);
  const auto tr = eng.prefill_trace(prompt);
  auto st = eng.prefill(prompt, tr);
  for (int s = 0; s < 200; ++s) eng.feed(st, static_cast<int>(rng.index(256)));
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t t = 0; t < 120; ++t) {
      const auto row = st.cache.k_row(l, t);
      ASSERT_TRUE(std::equal(row.begin(), row.end(), tr.k[l].data() + t * 32));
    }
}

// ---------------------------------------------------------------- generate

TEST(Generate, ZeroNewTokensLogsPrefillOnly) {
  Bundle b(fixture::tiny_config());
  Engine<float> eng(b.model(), policy(Policy::chunkllm));
  auto r = generate(eng, corpus::tokenize("Hi there. Bye."), 0);
  EXPECT_TRUE(r.tokens.empty());
  ASSERT_EQ(r.log.size(), 1u);
  EXPECT_EQ(r.log[0].step, 0u);
}

TEST(Generate, GreedyIsDeterministic) {
  Bundle b(fixture::tiny_config());
  Engine<float> eng(b.model(), policy(Policy::chunkllm));
  const auto p = corpus::tokenize("Hi there. Bye. The pass key is 12345. Ok.");
  EXPECT_EQ(generate(eng, p, 50).tokens, generate(eng, p, 50).tokens);
  auto t1 = generate(eng, p, 30, Sampler::with_temperature(1.0, 3));
  auto t2 = generate(eng, p, 30, Sampler::with_temperature(1.0, 3));
  EXPECT_EQ(t1.tokens, t2.tokens);
}

TEST(Generate, StepLogIsJsonl) {
  Bundle b(fixture::tiny_config());
  Engine<float> eng(b.model(), policy(Policy::chunkllm));
  auto r = generate(eng, corpus::tokenize("Hi there. Bye."), 4);
  const auto path = fixture::temp_path("steps.jsonl");
  write_step_log_jsonl(path.string(), r.log);
  std::ifstream f(path);
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line)) {
    auto j = nlohmann::json::parse(line);
    for (const char* key : {"step", "ctx", "active", "retention", "resel", "ms"}) ASSERT_TRUE(j.contains(key)) << key;
    ++n;
  }
  EXPECT_EQ(n, r.log.size());
  std::filesystem::remove(path);
}

// ---------------------------------------------------------------- evaluations

TEST(Ppl, FullPolicyMatchesVanilla) {
  Bundle b(fixture::tiny_config());
  Engine<float> eng(b.model(), policy(Policy::full));
  const auto docs = corpus::gen_sentences(3, 3, {100, 300});
  const double a = eval_ppl(eng, docs).ppl, v = vanilla_ppl(b.w, docs).ppl;
  EXPECT_NEAR(a / v, 1.0, 1e-3);
}

TEST(Ppl, UniformLogitsGiveVocabularySize) {
  Bundle b(fixture::tiny_config());
  b.w.params.at(names::kEmbed).fill(0);
  Engine<float> eng(b.model(), policy(Policy::full));
  EXPECT_NEAR(eval_ppl(eng, corpus::gen_sentences(4, 2, {50, 80})).ppl, 256.0, 1e-3);
}

TEST(Passkey, UntrainedModelScoresZero) {
  Bundle b(fixture::tiny_config());
  Engine<float> full(b.model(), policy(Policy::full)), sparse(b.model(), policy(Policy::chunkllm));
  const auto samples = corpus::gen_passkey_set(5, 10, 300);
  const auto r = eval_passkey<float>({&full, &sparse}, samples);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].n(), 10u);
  EXPECT_EQ(r[0].accuracy(), 0.0);
  EXPECT_EQ(r[0].mean_retention(), 1.0);
  EXPECT_LE(r[1].mean_retention(), 1.0);
}

TEST(Bench, RowPerPolicyAndLength) {
  Bundle b(fixture::tiny_config());
  Engine<float> full(b.model(), policy(Policy::full)), sparse(b.model(), policy(Policy::chunkllm));
  BenchConfig bc;
  bc.reps = 2;
  bc.new_tokens = 4;
  const auto rows = bench_latency<float>({&full, &sparse}, {128, 256, 512}, bc);
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0].policy, "full");
  EXPECT_EQ(rows[1].policy, "chunkllm");
  for (const auto& r : rows) EXPECT_GT(r.ms_per_token, 0.0);
  EXPECT_THROW(bench_latency<float>({&full}, {1020}, bc), ConfigError);
  const auto path = fixture::temp_path("bench.csv");
  write_bench_csv(path.string(), rows);
  std::ifstream f(path);
  std::string header;
  std::getline(f, header);
  EXPECT_EQ(header, "policy,length,ms_per_token,retention");
  std::filesystem::remove(path);
}
