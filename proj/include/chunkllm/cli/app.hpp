// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

// The chunkllm command-line tool. `run` is the whole program; the binary in
// tools/ only forwards argv. Needs CLI11 and OpenSSL (libcrypto).

#pragma once

#include <openssl/evp.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "chunkllm/backbone/checkpoint.hpp"
#include "chunkllm/cli/settings.hpp"
#include "chunkllm/corpus/jsonl.hpp"
#include "chunkllm/engine/eval.hpp"

namespace chunkllm::cli {

namespace fs = std::filesystem;

inline std::string sha256_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("sha256: digest initialisation failed");
  }
  std::vector<char> buf(1 << 16);
  while (f) {
    f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (f.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(f.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return hex.str();
}

// Checkpoint, loss curve and metric file names inside --out.
inline constexpr const char* kCheckpointFile = "checkpoint.chkl";
inline constexpr const char* kLossFile = "loss.csv";

namespace detail {

// Value of --config, read before flag parsing so flags can override it.
inline std::string find_config_arg(int argc, const char* const* argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) return argv[i + 1];
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return {};
}

inline void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string(what) + " path is required");
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + std::string(what) + " " + path);
}

inline void prepare_out_dir(const std::string& dir) {
  if (dir.empty()) throw ConfigError("--out is required");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw IoError("cannot create output directory " + dir);
  const fs::path probe = fs::path(dir) / ".write_check";
  {
    std::ofstream f(probe);
    if (!f) throw IoError("output directory " + dir + " is not writable");
  }
  fs::remove(probe, ec);
}

inline std::string out_path(const std::string& dir, const char* name) { return (fs::path(dir) / name).string(); }

// Outputs never replace the input checkpoint.
inline void check_not_input(const std::string& input, const std::string& output) {
  std::error_code ec;
  if (!input.empty() && fs::exists(output) && fs::equivalent(input, output, ec)) {
    throw ConfigError("output " + output + " would overwrite the input checkpoint");
  }
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << j.dump(2) << '\n';
  if (!f) throw IoError("failed writing " + path);
}

inline std::vector<LossPoint> offset_curve(std::vector<LossPoint> c, std::size_t by) {
  for (auto& p : c) p.step += by;
  return c;
}

struct Progress {
  std::ostream* err;
  std::size_t total;
  const char* stage;
  void operator()(const LossPoint& p) const {
    if ((p.step + 1) % 100 == 0 || p.step + 1 == total)
      *err << stage << " step " << p.step + 1 << "/" << total << " loss " << p.loss << '\n';
  }
};

}  // namespace detail

// Everything an engine needs, loaded from one checkpoint.
struct LoadedModel {
  BackboneWeights<float> backbone;
  std::optional<ChunkAdapterParams<float>> chunker;
  std::optional<QKAdapterParams<float>> adapters;

  EngineModel<float> engine_model() const {
    return {&backbone, chunker ? &*chunker : nullptr, adapters ? &*adapters : nullptr};
  }
};

inline LoadedModel load_model(const Checkpoint& ck) {
  LoadedModel m{backbone_from_checkpoint(ck), std::nullopt, std::nullopt};
  if (ck.has(names::kChunkWeight)) m.chunker = ChunkAdapterParams<float>::load(ck.tensors);
  if (has_qk_adapters(ck.tensors)) m.adapters = QKAdapterParams<float>::load(ck.tensors, ck.config);
  return m;
}

// Random backbone and adapters for latency runs; the chunker is fitted to the
// rule labels so chunk sizes are realistic.
inline LoadedModel untrained_model(ModelConfig c, std::uint64_t seed) {
  c.seed = seed;
  LoadedModel m{init_weights<float>(c), std::nullopt, QKAdapterParams<float>::init(c, c.d_head, seed)};
  ChunkerTrainConfig tc;
  tc.steps = 300;
  const auto docs = corpus::gen_sentences(splitmix64(seed ^ 0xbe9c4), 40, {512, 1024});
  m.chunker = train_chunker(chunker_features(m.backbone, docs), c.d_model, tc).params;
  return m;
}

class App {
 public:
  App(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

  int run(int argc, const char* const* argv) {
    try {
      if (const auto cfg = detail::find_config_arg(argc, argv); !cfg.empty()) load_config_file(cfg, s_);
    } catch (const Error& e) {
      err_ << "error: " << e.what() << '\n';
      return 2;
    }
    CLI::App app{"chunkllm: chunk-sparse KV-cache decoding on a desk-scale transformer"};
    app.require_subcommand(1);
    for (auto* sub : build(app)) (void)sub;
    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      std::ostringstream o, q;
      const int code = app.exit(e, o, q);
      out_ << o.str();
      err_ << q.str();
      return code;
    }
    try {
      apply_policy_flags();
      action_();
      return 0;
    } catch (const ConfigError& e) {
      err_ << "error: " << e.what() << '\n';
      return 2;
    } catch (const std::exception& e) {
      err_ << "error: " << e.what() << '\n';
      return 1;
    }
  }

 private:
  std::ostream& out_;
  std::ostream& err_;
  Settings s_;
  std::function<void()> action_;

  std::string checkpoint_, corpus_, out_dir_, policy_list_;
  std::uint64_t seed_ = 0;
  bool allow_untrained_ = false;
  std::optional<double> topk_ratio_;
  std::optional<std::size_t> topk_;
  bool no_vote_ = false, no_icac_ = false;
  std::string ks_, lengths_;

  // ---------------------------------------------------------------- flags

  void common(CLI::App* sub, bool seed_required) {
    sub->add_option("--config", "JSON settings file; flags override it");
    auto* seed = sub->add_option("--seed", seed_, "Seed for every random stream");
    if (seed_required) seed->required();
    sub->add_option("--checkpoint", checkpoint_, "Input checkpoint");
    sub->add_option("--out", out_dir_, "Output directory")->required();
  }

  void model_flags(CLI::App* sub) {
    sub->add_option("--d-model", s_.model.d_model);
    sub->add_option("--layers", s_.model.n_layers);
    sub->add_option("--heads", s_.model.n_heads);
    sub->add_option("--d-head", s_.model.d_head);
    sub->add_option("--max-context", s_.model.max_context);
  }

  void policy_flags(CLI::App* sub) {
    sub->add_option("--policy", policy_list_, "Comma-separated: chunkllm, full, streaming, fixed_chunk");
    sub->add_option("--topk-ratio", topk_ratio_, "k as a fraction of completed chunks");
    sub->add_option("--topk", topk_, "Absolute k");
    sub->add_option("--local-chunks", s_.policy.local_chunks);
    sub->add_option("--sink-chunks", s_.policy.sink_chunks);
    sub->add_flag("--no-vote", no_vote_, "Use the bottom layer's top-k instead of voting");
    sub->add_flag("--no-icac", no_icac_, "Reselect chunks at every step");
    sub->add_option("--alpha", s_.policy.alpha, "Boundary threshold");
    sub->add_option("--fixed-chunk-len", s_.policy.fixed_chunk_len);
    sub->add_option("--stream-window", s_.policy.stream_window_tokens);
  }

  void apply_policy_flags() {
    if (topk_ratio_ && topk_) throw ConfigError("--topk-ratio and --topk are mutually exclusive");
    if (topk_ratio_) s_.policy.k = KSpec::ratio(*topk_ratio_);
    if (topk_) s_.policy.k = KSpec::absolute(*topk_);
    if (no_vote_) s_.policy.vote = false;
    if (no_icac_) s_.policy.icac = false;
    if (!policy_list_.empty()) s_.eval.policies = detail::split_list(policy_list_);
    if (!ks_.empty()) {
      s_.eval.ks.clear();
      for (const auto& k : detail::split_list(ks_)) s_.eval.ks.push_back(std::stoul(k));
    }
    if (!lengths_.empty()) {
      s_.eval.lengths.clear();
      for (const auto& k : detail::split_list(lengths_)) s_.eval.lengths.push_back(std::stoul(k));
    }
    s_.policy.validate();
    s_.model.validate();
  }

  std::vector<PolicyConfig> policies(std::vector<std::string> fallback) const {
    const auto& names = s_.eval.policies.empty() ? fallback : s_.eval.policies;
    std::vector<PolicyConfig> out;
    for (const auto& n : names) {
      PolicyConfig p = s_.policy;
      p.policy = parse_policy(n);
      p.validate();
      out.push_back(p);
    }
    return out;
  }

  std::vector<CLI::App*> build(CLI::App& app) {
    std::vector<CLI::App*> subs;

    auto* gen = app.add_subcommand("gen-corpus", "Write labeled sentence and passkey corpora with a manifest");
    common(gen, true);
    gen->add_option("--docs", s_.data.docs);
    gen->add_option("--min-len", s_.data.min_len);
    gen->add_option("--max-len", s_.data.max_len);
    gen->add_option("--passkey-samples", s_.data.passkey_samples);
    gen->add_option("--passkey-len", s_.data.passkey_len);
    gen->callback([this] { action_ = [this] { gen_corpus(); }; });
    subs.push_back(gen);

    auto* tb = app.add_subcommand("train-backbone", "Pretrain the backbone, then optionally fine-tune on passkeys");
    common(tb, true);
    model_flags(tb);
    tb->add_option("--corpus", corpus_, "Sentence JSONL; generated from the seed when absent");
    tb->add_option("--steps", s_.backbone.steps);
    tb->add_option("--seqlen", s_.backbone.seqlen);
    tb->add_option("--batch", s_.backbone.batch);
    tb->add_option("--lr", s_.backbone.lr);
    tb->add_option("--passkey-steps", s_.backbone.passkey_steps);
    tb->add_option("--passkey-max-len", s_.backbone.passkey.max_len);
    tb->add_option("--passkey-long-max-len", s_.backbone.passkey.long_max_len);
    tb->callback([this] { action_ = [this] { train_backbone(); }; });
    subs.push_back(tb);

    auto* tc = app.add_subcommand("train-chunker", "Train the boundary classifier on a frozen backbone");
    common(tc, true);
    tc->add_option("--corpus", corpus_, "Sentence JSONL; generated from the seed when absent");
    tc->add_option("--steps", s_.chunker.steps);
    tc->add_option("--lr", s_.chunker.lr);
    tc->add_option("--docs", s_.chunker.docs);
    tc->callback([this] { action_ = [this] { train_chunker_cmd(); }; });
    subs.push_back(tc);

    auto* ta = app.add_subcommand("train-adapters", "Distil full attention into the chunk-selection adapters");
    common(ta, true);
    ta->add_option("--steps", s_.adapters.steps);
    ta->add_option("--seqlen", s_.adapters.seqlen);
    ta->add_option("--lr", s_.adapters.lr);
    ta->add_option("--d-adapter", s_.adapters.d_adapter);
    ta->callback([this] { action_ = [this] { train_adapters_cmd(); }; });
    subs.push_back(ta);

    auto* eb = app.add_subcommand("eval-boundary", "Boundary precision, recall and F1 on held-out docs");
    common(eb, false);
    eb->add_option("--corpus", corpus_, "Held-out sentence JSONL; generated from the seed when absent");
    eb->add_option("--docs", s_.eval.docs);
    eb->add_option("--alpha", s_.policy.alpha);
    eb->callback([this] { action_ = [this] { eval_boundary(); }; });
    subs.push_back(eb);

    auto* er = app.add_subcommand("eval-recall", "Adapter top-k recall against full attention");
    common(er, false);
    er->add_option("--corpus", corpus_);
    er->add_option("--docs", s_.eval.docs);
    er->add_option("--doc-len", s_.eval.doc_len);
    er->add_option("--ks", ks_, "Comma-separated absolute k values for the layer table");
    er->add_option("--topk-ratio", topk_ratio_, "k ratio for the voted summary");
    er->callback([this] { action_ = [this] { eval_recall(); }; });
    subs.push_back(er);

    auto* ep = app.add_subcommand("eval-passkey", "Passkey exact match per policy and depth decile");
    common(ep, false);
    policy_flags(ep);
    ep->add_option("--corpus", corpus_, "Passkey JSONL; generated from the seed when absent");
    ep->add_option("--samples", s_.eval.samples);
    ep->add_option("--passkey-len", s_.eval.passkey_len);
    ep->callback([this] { action_ = [this] { eval_passkey_cmd(); }; });
    subs.push_back(ep);

    auto* pp = app.add_subcommand("eval-ppl", "Simulated-decode perplexity per policy");
    common(pp, false);
    policy_flags(pp);
    pp->add_option("--corpus", corpus_);
    pp->add_option("--docs", s_.eval.docs);
    pp->add_option("--doc-len", s_.eval.doc_len);
    pp->callback([this] { action_ = [this] { eval_ppl_cmd(); }; });
    subs.push_back(pp);

    auto* bn = app.add_subcommand("bench", "Per-token decode latency per policy and context length");
    common(bn, false);
    policy_flags(bn);
    model_flags(bn);
    bn->add_flag("--allow-untrained", allow_untrained_, "Benchmark random weights when no checkpoint is given");
    bn->add_option("--lengths", lengths_, "Comma-separated context lengths");
    bn->add_option("--reps", s_.eval.reps);
    bn->add_option("--new-tokens", s_.eval.new_tokens);
    bn->callback([this] { action_ = [this] { bench(); }; });
    subs.push_back(bn);
    return subs;
  }

  // ---------------------------------------------------------------- helpers

  Checkpoint input_checkpoint() const {
    detail::require_file(checkpoint_, "checkpoint");
    return load_checkpoint(checkpoint_);
  }

  std::vector<corpus::LabeledDoc> heldout_docs(std::size_t n, corpus::LenRange len) const {
    if (!corpus_.empty()) {
      detail::require_file(corpus_, "corpus");
      auto docs = corpus::read_docs_jsonl(corpus_);
      if (docs.size() > n) docs.resize(n);
      return docs;
    }
    return corpus::gen_sentences(splitmix64(seed_ ^ 0x4e1d07u), n, len);
  }

  void save_merged(const Checkpoint& in, const ParamMap<float>& extra, const std::vector<LossPoint>& curve,
                   const char* stage) const {
    const auto ck_out = detail::out_path(out_dir_, kCheckpointFile);
    detail::check_not_input(checkpoint_, ck_out);
    ParamMap<float> all = in.tensors;
    for (const auto& [k, v] : extra) all[k] = v;
    save_checkpoint(ck_out, in.config, all);
    write_loss_csv(detail::out_path(out_dir_, kLossFile), curve);
    out_ << stage << " final loss " << (curve.empty() ? 0.0 : curve.back().loss) << " -> " << ck_out << '\n';
  }

  // ---------------------------------------------------------------- commands

  void gen_corpus() {
    detail::prepare_out_dir(out_dir_);
    const auto& d = s_.data;
    if (d.min_len > d.max_len) throw ConfigError("--min-len exceeds --max-len");
    nlohmann::json manifest{{"seed", seed_}, {"docs", d.docs}, {"passkey_samples", d.passkey_samples}};
    nlohmann::json files = nlohmann::json::object();
    const auto sent = detail::out_path(out_dir_, "sentences.jsonl");
    corpus::write_docs_jsonl(sent, corpus::gen_sentences(seed_, d.docs, {d.min_len, d.max_len}));
    files["sentences.jsonl"] = {{"lines", d.docs}, {"sha256", sha256_file(sent)}};
    if (d.passkey_samples) {
      const auto pk = detail::out_path(out_dir_, "passkey.jsonl");
      corpus::write_passkey_jsonl(pk, corpus::gen_passkey_set(seed_, d.passkey_samples, d.passkey_len));
      files["passkey.jsonl"] = {{"lines", d.passkey_samples}, {"sha256", sha256_file(pk)}};
    }
    manifest["files"] = files;
    detail::write_json(detail::out_path(out_dir_, "manifest.json"), manifest);
    out_ << "wrote " << d.docs << " docs and " << d.passkey_samples << " passkey samples to " << out_dir_ << '\n';
  }

  void train_backbone() {
    if (!corpus_.empty()) detail::require_file(corpus_, "corpus");
    detail::prepare_out_dir(out_dir_);
    detail::check_not_input(checkpoint_, detail::out_path(out_dir_, kCheckpointFile));
    BackboneWeights<float> w;
    if (!checkpoint_.empty()) {
      w = backbone_from_checkpoint(input_checkpoint());
    } else {
      ModelConfig c = s_.model;
      c.seed = seed_;
      w = init_weights<float>(c);
    }
    const auto& b = s_.backbone;
    TrainConfig tc;
    tc.steps = b.steps;
    tc.lr = b.lr;
    tc.warmup = b.warmup;
    ExampleSource src = recipes::pretrain_source(seed_, {b.seqlen, b.batch});
    if (!corpus_.empty()) {
      auto batches = std::make_shared<std::vector<corpus::Batch>>(
          corpus::make_batches(corpus::read_docs_jsonl(corpus_), b.seqlen, b.batch));
      if (batches->empty()) throw InputError("corpus " + corpus_ + " is too small for one batch");
      src = [batches](std::size_t step) {
        std::vector<TrainExample> out;
        for (const auto& win : (*batches)[step % batches->size()]) out.push_back({win.inputs, win.targets, win.weights});
        return out;
      };
    }
    auto curve = pretrain(w, src, tc, detail::Progress{&err_, b.steps, "pretrain"});
    if (b.passkey_steps) {
      TrainConfig ft = tc;
      ft.steps = b.passkey_steps;
      ft.lr = b.passkey_lr;
      const auto more = pretrain(w, recipes::passkey_source(splitmix64(seed_ ^ 0x9a55), b.passkey, b.passkey_steps), ft,
                                 detail::Progress{&err_, b.passkey_steps, "passkey"});
      const auto shifted = detail::offset_curve(more, curve.size());
      curve.insert(curve.end(), shifted.begin(), shifted.end());
    }
    const auto ck_out = detail::out_path(out_dir_, kCheckpointFile);
    detail::check_not_input(checkpoint_, ck_out);
    // Only backbone tensors are written: adapters fitted to older weights
    // would be stale.
    save_checkpoint(ck_out, w.config, w.params);
    write_loss_csv(detail::out_path(out_dir_, kLossFile), curve);
    out_ << "backbone final loss " << (curve.empty() ? 0.0 : curve.back().loss) << " -> " << ck_out << '\n';
  }

  void train_chunker_cmd() {
    const Checkpoint ck = input_checkpoint();
    if (!corpus_.empty()) detail::require_file(corpus_, "corpus");
    detail::prepare_out_dir(out_dir_);
    detail::check_not_input(checkpoint_, detail::out_path(out_dir_, kCheckpointFile));
    const auto w = backbone_from_checkpoint(ck);
    const auto docs = corpus_.empty() ? recipes::chunker_docs(seed_, s_.chunker.docs, {256, 1024})
                                      : corpus::read_docs_jsonl(corpus_);
    ChunkerTrainConfig tc;
    tc.steps = s_.chunker.steps;
    tc.batch = s_.chunker.batch;
    tc.lr = s_.chunker.lr;
    auto res = train_chunker(chunker_features(w, docs), w.config.d_model, tc, detail::Progress{&err_, tc.steps, "chunker"});
    ParamMap<float> extra;
    res.params.store(extra);
    save_merged(ck, extra, res.curve, "chunker");
  }

  void train_adapters_cmd() {
    const Checkpoint ck = input_checkpoint();
    detail::prepare_out_dir(out_dir_);
    detail::check_not_input(checkpoint_, detail::out_path(out_dir_, kCheckpointFile));
    const auto w = backbone_from_checkpoint(ck);
    const auto& a = s_.adapters;
    if (a.seqlen > w.config.max_context) throw ConfigError("--seqlen exceeds the checkpoint's max_context");
    AdapterTrainConfig tc;
    tc.steps = a.steps;
    tc.lr = a.lr;
    const std::size_t d_a = a.d_adapter ? a.d_adapter : w.config.d_head;
    auto res = train_adapters(w, QKAdapterParams<float>::init(w.config, d_a, seed_), recipes::adapter_source(seed_, a.seqlen),
                              tc, detail::Progress{&err_, tc.steps, "adapters"});
    save_merged(ck, res.params.to_map(), res.curve, "adapters");
  }

  void eval_boundary() {
    const Checkpoint ck = input_checkpoint();
    detail::prepare_out_dir(out_dir_);
    const auto m = load_model(ck);
    if (!m.chunker) throw InputError("checkpoint has no chunk adapter; run train-chunker first");
    const auto docs = heldout_docs(s_.eval.docs, {256, 1024});
    const auto r = evaluate_chunker(m.backbone, *m.chunker, docs, s_.policy.alpha);
    auto metrics = [](const BoundaryMetrics& b) {
      return nlohmann::json{{"precision", b.precision}, {"recall", b.recall}, {"f1", b.f1}, {"tp", b.tp}, {"fp", b.fp}, {"fn", b.fn}};
    };
    detail::write_json(detail::out_path(out_dir_, "boundary.json"),
                       {{"docs", docs.size()}, {"alpha", s_.policy.alpha}, {"chunker", metrics(r.metrics)},
                        {"naive_period_rule", metrics(r.naive)}, {"bce", r.bce}});
    out_ << std::fixed << std::setprecision(4) << "precision " << r.metrics.precision << " recall " << r.metrics.recall
         << " f1 " << r.metrics.f1 << " (naive rule f1 " << r.naive.f1 << ")\n";
  }

  void eval_recall() {
    const Checkpoint ck = input_checkpoint();
    detail::prepare_out_dir(out_dir_);
    const auto m = load_model(ck);
    if (!m.adapters) throw InputError("checkpoint has no QK adapters; run train-adapters first");
    const auto docs = heldout_docs(s_.eval.docs, {s_.eval.doc_len * 3 / 4, s_.eval.doc_len});
    const auto rows = recall_report(m.backbone, *m.adapters, docs, s_.eval.ks);
    write_recall_csv(detail::out_path(out_dir_, "recall.csv"), rows);
    const KSpec k = topk_ratio_ ? KSpec::ratio(*topk_ratio_) : s_.policy.k;
    const auto r = evaluate_recall(m.backbone, *m.adapters, docs, k);
    detail::write_json(detail::out_path(out_dir_, "recall.json"),
                       {{"docs", docs.size()}, {"k_mode", k.mode == KMode::ratio ? "ratio" : "absolute"},
                        {"k_value", k.value}, {"voted", r.voted}, {"per_layer", r.per_layer}, {"baseline", r.baseline}});
    out_ << std::fixed << std::setprecision(4) << "voted recall " << r.voted << " (random baseline " << r.baseline << ", "
         << rows.size() << " layer x k rows)\n";
  }

  void eval_passkey_cmd() {
    const Checkpoint ck = input_checkpoint();
    if (!corpus_.empty()) detail::require_file(corpus_, "corpus");
    detail::prepare_out_dir(out_dir_);
    const auto m = load_model(ck);
    const auto samples = corpus_.empty() ? corpus::gen_passkey_set(splitmix64(seed_ ^ 0x9a55e7), s_.eval.samples,
                                                                   s_.eval.passkey_len)
                                         : corpus::read_passkey_jsonl(corpus_);
    std::vector<Engine<float>> engines;
    engines.reserve(4);
    for (const auto& p : policies({"full", "chunkllm"})) engines.emplace_back(m.engine_model(), p);
    std::vector<const Engine<float>*> ptrs;
    for (const auto& e : engines) ptrs.push_back(&e);
    const auto res = eval_passkey(ptrs, samples);
    write_passkey_csv(detail::out_path(out_dir_, "passkey.csv"), res);
    for (const auto& r : res)
      out_ << std::fixed << std::setprecision(4) << r.policy << " accuracy " << r.accuracy() << " mean retention "
           << r.mean_retention() << " (n=" << r.n() << ")\n";
  }

  void eval_ppl_cmd() {
    const Checkpoint ck = input_checkpoint();
    detail::prepare_out_dir(out_dir_);
    const auto m = load_model(ck);
    const auto docs = heldout_docs(s_.eval.docs, {s_.eval.doc_len, s_.eval.doc_len + 64});
    const auto path = detail::out_path(out_dir_, "ppl.csv");
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open " + path);
    f << "policy,ppl,tokens,mean_retention\n";
    const auto van = vanilla_ppl(m.backbone, docs);
    f << "vanilla," << van.ppl << ',' << van.tokens << ",1\n";
    out_ << std::fixed << std::setprecision(4) << "vanilla ppl " << van.ppl << '\n';
    for (const auto& p : policies({"full", "chunkllm"})) {
      const Engine<float> eng(m.engine_model(), p);
      const auto r = eval_ppl(eng, docs);
      f << to_string(p.policy) << ',' << r.ppl << ',' << r.tokens << ',' << r.mean_retention << '\n';
      out_ << to_string(p.policy) << " ppl " << r.ppl << " mean retention " << r.mean_retention << '\n';
    }
    if (!f) throw IoError("failed writing " + path);
  }

  void bench() {
    if (checkpoint_.empty() && !allow_untrained_) {
      throw ConfigError("bench needs --checkpoint, or --allow-untrained to time random weights");
    }
    const std::size_t ctx = checkpoint_.empty() ? s_.model.max_context : input_checkpoint().config.max_context;
    for (std::size_t L : s_.eval.lengths) {
      if (L == 0 || L + BenchConfig{}.warmup_tokens + s_.eval.new_tokens > ctx) {
        throw ConfigError("bench length " + std::to_string(L) + " does not fit max_context " + std::to_string(ctx));
      }
    }
    detail::prepare_out_dir(out_dir_);
    LoadedModel m = checkpoint_.empty() ? untrained_model(s_.model, seed_) : load_model(input_checkpoint());
    std::vector<Engine<float>> engines;
    engines.reserve(4);
    for (auto p : policies({"full", "chunkllm"})) engines.emplace_back(m.engine_model(), p);
    std::vector<const Engine<float>*> ptrs;
    for (const auto& e : engines) ptrs.push_back(&e);
    BenchConfig bc;
    bc.reps = s_.eval.reps;
    bc.new_tokens = s_.eval.new_tokens;
    bc.seed = seed_;
    const auto rows = bench_latency(ptrs, s_.eval.lengths, bc);
    write_bench_csv(detail::out_path(out_dir_, "bench.csv"), rows);
    for (const auto& r : rows)
      out_ << std::fixed << std::setprecision(3) << r.policy << " L=" << r.length << " " << r.ms_per_token
           << " ms/token retention " << r.retention << '\n';
  }
};

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  App app(out, err);
  return app.run(argc, argv);
}

}  // namespace chunkllm::cli
