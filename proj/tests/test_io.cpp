// Round-trip and strictness tests for persistence: every checkpoint loader
// must reproduce the saved object exactly (verified down to save(load(x))
// being byte-identical to x), and the config parser must reject malformed
// lines, duplicates, and unknown structure loudly.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "qs/io.hpp"
#include "qs/rng.hpp"

using namespace qs;
namespace fs = std::filesystem;

namespace {

// Per-test scratch directory, removed on destruction.
struct TmpDir {
  fs::path dir;
  explicit TmpDir(const std::string& name) : dir(name) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~TmpDir() { fs::remove_all(dir); }
  std::string operator/(const std::string& f) const { return (dir / f).string(); }
};

std::vector<PrefPair> synthetic_pairs(int n, int dim, std::uint64_t seed) {
  std::vector<PrefPair> out;
  Rng rng(derive_stream(seed, 3));
  for (int i = 0; i < n; ++i) {
    PrefPair pr;
    pr.chosen.resize(static_cast<std::size_t>(dim));
    pr.rejected.resize(static_cast<std::size_t>(dim));
    for (auto& v : pr.chosen) v = rng.uniform(-1.0, 1.0);
    for (auto& v : pr.rejected) v = rng.uniform(-1.0, 1.0);
    out.push_back(std::move(pr));
  }
  return out;
}

}  // namespace

TEST_CASE("fingerprints match the reference fnv-1a values") {
  CHECK(fingerprint_bytes("") == "cbf29ce484222325");
  CHECK(fingerprint_bytes("a") == "af63dc4c8601ec8c");
  CHECK(fingerprint_bytes("hello") != fingerprint_bytes("hellp"));

  TmpDir tmp("tmp_io_fp");
  write_text_file(tmp / "x.txt", "hello");
  CHECK(fingerprint_file(tmp / "x.txt") == fingerprint_bytes("hello"));
  CHECK_THROWS_AS(fingerprint_file(tmp / "missing.txt"), DataError);
  CHECK_THROWS_AS(read_text_file(tmp / "missing.txt"), DataError);
  CHECK_THROWS_AS(write_text_file((tmp.dir / "no_dir" / "x.txt").string(), "x"), DataError);
}

TEST_CASE("scorer checkpoints round-trip exactly") {
  TmpDir tmp("tmp_io_scorer");
  ScorerConfig sc;
  sc.input_dim = 24;
  sc.hidden1 = 10;
  sc.hidden2 = 6;
  sc.head = HeadKind::gaussian;
  const Scorer s = make_scorer(sc, 42);

  ScorerCheckpointMeta meta;
  meta.train.epochs = 3;
  meta.train.lr = 2.5e-4;
  meta.train.lambda = 0.05;
  meta.train.seed = 909;
  meta.data_fingerprint = "00ff00ff00ff00ff";
  const std::string path = tmp / "rm.json";
  save_scorer(s, meta, path);

  ScorerCheckpointMeta got;
  const Scorer r = load_scorer(path, &got);
  CHECK(r.cfg.head == sc.head);
  CHECK(r.cfg.input_dim == sc.input_dim);
  CHECK(r.cfg.hidden1 == sc.hidden1);
  CHECK(r.cfg.hidden2 == sc.hidden2);
  REQUIRE(r.params.size() == s.params.size());
  for (std::size_t i = 0; i < s.params.size(); ++i) CHECK(r.params[i] == s.params[i]);
  CHECK(got.train.epochs == 3);
  CHECK(got.train.lr == 2.5e-4);
  CHECK(got.train.lambda == 0.05);
  CHECK(got.train.seed == 909);
  CHECK(got.data_fingerprint == "00ff00ff00ff00ff");

  // Reload reproduces accuracy bit-for-bit on any dataset.
  const auto data = synthetic_pairs(64, 24, 5);
  CHECK(rm_accuracy(r, data) == rm_accuracy(s, data));

  // save(load(x)) is byte-identical to x.
  save_scorer(r, got, tmp / "rm2.json");
  CHECK(read_text_file(tmp / "rm2.json") == read_text_file(path));

  // Strictness: foreign format, bad version, truncated params.
  write_text_file(tmp / "bad1.json", "{\"format\":\"other\",\"version\":1}");
  CHECK_THROWS_AS(load_scorer(tmp / "bad1.json"), DataError);
  write_text_file(tmp / "bad2.json", "not json at all");
  CHECK_THROWS_AS(load_scorer(tmp / "bad2.json"), DataError);
  std::string text = read_text_file(path);
  const auto pos = text.find("\"version\": 1");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 12, "\"version\": 9");
  write_text_file(tmp / "bad3.json", text);
  CHECK_THROWS_AS(load_scorer(tmp / "bad3.json"), DataError);
}

TEST_CASE("policy checkpoints round-trip exactly") {
  TmpDir tmp("tmp_io_policy");
  Policy p = make_policy(FeaturizerConfig{46, 16});
  Rng rng(8);
  for (auto& w : p.select_w) w = rng.uniform(-1.0, 1.0);
  for (auto& w : p.refuse_w) w = rng.uniform(-1.0, 1.0);
  p.refuse_b = -2.25;
  p.temperature = 0.75;

  const std::string path = tmp / "policy.json";
  save_policy(p, "deadbeef01234567", path);
  std::string fp;
  const Policy r = load_policy(path, &fp);
  CHECK(fp == "deadbeef01234567");
  CHECK(r.refuse_b == p.refuse_b);
  CHECK(r.temperature == p.temperature);
  REQUIRE(r.select_w.size() == p.select_w.size());
  for (std::size_t i = 0; i < p.select_w.size(); ++i) CHECK(r.select_w[i] == p.select_w[i]);
  for (std::size_t i = 0; i < p.refuse_w.size(); ++i) CHECK(r.refuse_w[i] == p.refuse_w[i]);

  save_policy(r, fp, tmp / "policy2.json");
  CHECK(read_text_file(tmp / "policy2.json") == read_text_file(path));
}

TEST_CASE("fusion weight files carry the component contract") {
  TmpDir tmp("tmp_io_fusion");
  FusionWeights w;
  w.w = {0.5, 0.3, 0.3, 0.3, 1.0, 0.25, 0.4, 1.5, -0.2};
  w.lambda_l2 = 1e-3;
  w.provenance = FusionWeights::Provenance::pareto_tuned;
  const std::string path = tmp / "fusion.json";
  save_fusion_weights(w, path);
  const FusionWeights r = load_fusion_weights(path);
  REQUIRE(r.w.size() == w.w.size());
  for (std::size_t i = 0; i < w.w.size(); ++i) CHECK(r.w[i] == w.w[i]);
  CHECK(r.lambda_l2 == w.lambda_l2);
  CHECK(r.provenance == FusionWeights::Provenance::pareto_tuned);

  // A reordered component list is rejected even with the right size.
  std::string text = read_text_file(path);
  const auto pos = text.find("\"format\"");
  REQUIRE(text.find("\"length\"") != std::string::npos);
  (void)pos;
  const auto lp = text.find("\"length\"");
  text.replace(lp, 8, "\"lenght\"");
  write_text_file(tmp / "bad.json", text);
  CHECK_THROWS_AS(load_fusion_weights(tmp / "bad.json"), DataError);
}

TEST_CASE("reference model checkpoints preserve every probability") {
  TmpDir tmp("tmp_io_ref");
  const std::vector<std::string> corpus = {"alpha beta gamma", "alpha beta delta",
                                           "beta gamma", "delta epsilon alpha"};
  const ReferenceModel m = ReferenceModel::fit(corpus, 0.5);
  const std::string path = tmp / "ref.json";
  save_reference_model(m, path);
  const ReferenceModel r = load_reference_model(path);
  CHECK(r.vocab_size() == m.vocab_size());
  CHECK(r.smoothing_k() == m.smoothing_k());
  for (const auto& text : {"alpha beta", "gamma delta unseen", "epsilon"}) {
    CHECK(r.mean_logprob(text) == m.mean_logprob(text));
  }
  save_reference_model(r, tmp / "ref2.json");
  CHECK(read_text_file(tmp / "ref2.json") == read_text_file(path));
}

TEST_CASE("world snapshots round-trip exactly") {
  TmpDir tmp("tmp_io_world");
  WorldConfig cfg;
  cfg.n_contexts = 10;
  const World w = gen_world(321, cfg);
  const std::string path = tmp / "world.json";
  save_world(w, path);
  const World r = load_world(path);

  CHECK(r.seed == w.seed);
  CHECK(r.cfg.n_contexts == w.cfg.n_contexts);
  CHECK(r.cfg.languages == w.cfg.languages);
  CHECK(r.cfg.position_bias == w.cfg.position_bias);
  REQUIRE(r.contexts.size() == w.contexts.size());
  REQUIRE(r.pools.size() == w.pools.size());
  CHECK(r.vocab == w.vocab);
  CHECK(r.um.utility_weights == w.um.utility_weights);
  for (std::size_t i = 0; i < w.contexts.size(); ++i) {
    CHECK(r.contexts[i].id == w.contexts[i].id);
    CHECK(r.contexts[i].features == w.contexts[i].features);
    CHECK(r.contexts[i].language == w.contexts[i].language);
    CHECK(r.contexts[i].unsafe == w.contexts[i].unsafe);
    CHECK(r.contexts[i].high_noise == w.contexts[i].high_noise);
    CHECK(r.contexts[i].prior_queries == w.contexts[i].prior_queries);
    REQUIRE(r.pools[i].size() == w.pools[i].size());
    for (std::size_t j = 0; j < w.pools[i].size(); ++j) {
      CHECK(r.pools[i][j].id == w.pools[i][j].id);
      CHECK(r.pools[i][j].text == w.pools[i][j].text);
      CHECK(r.pools[i][j].language == w.pools[i][j].language);
    }
  }
  // Ground-truth utilities agree bit-for-bit after the round trip.
  for (const auto& ctx : w.contexts) {
    CHECK(pool_utilities(r, ctx) == pool_utilities(w, ctx));
  }
  save_world(r, tmp / "world2.json");
  CHECK(read_text_file(tmp / "world2.json") == read_text_file(path));
}

TEST_CASE("click log and triplet datasets round-trip") {
  TmpDir tmp("tmp_io_jsonl");
  std::vector<ClickLogRecord> logs;
  ClickLogRecord a;
  a.context_id = 3;
  a.triple = {4, 1, 0};
  a.examined = {true, true, false};
  a.clicked_position = 2;
  a.week = 0;
  a.serving_policy = "base";
  ClickLogRecord b;
  b.context_id = 7;
  b.triple = {0, 2, 5};
  b.examined = {true, false, false};
  b.week = 4;
  b.serving_policy = "rft_shifted";
  logs = {a, b};
  save_click_logs(logs, tmp / "logs.jsonl");
  const auto rl = load_click_logs(tmp / "logs.jsonl");
  REQUIRE(rl.size() == 2);
  CHECK(rl[0].context_id == 3);
  CHECK(rl[0].triple == a.triple);
  CHECK(rl[0].examined == a.examined);
  REQUIRE(rl[0].clicked_position.has_value());
  CHECK(*rl[0].clicked_position == 2);
  CHECK_FALSE(rl[1].clicked_position.has_value());
  CHECK(rl[1].week == 4);
  CHECK(rl[1].serving_policy == "rft_shifted");

  std::vector<PreferenceTriplet> ts(2);
  ts[0].context_id = 1;
  ts[0].chosen = {2, "best query here", "en"};
  ts[0].rejected = {0, "worse query", "fr"};
  ts[0].week = 0;
  ts[0].source_policy = SourcePolicy::base;
  ts[1].context_id = 5;
  ts[1].chosen = {1, "autre question", "fr"};
  ts[1].rejected = {3, "different words", "en"};
  ts[1].week = 4;
  ts[1].source_policy = SourcePolicy::rft_shifted;
  save_triplets(ts, tmp / "trip.jsonl");
  const auto rt = load_triplets(tmp / "trip.jsonl");
  REQUIRE(rt.size() == 2);
  CHECK(rt[0].chosen.text == "best query here");
  CHECK(rt[0].rejected.language == "fr");
  CHECK(rt[0].source_policy == SourcePolicy::base);
  CHECK(rt[1].chosen.id == 1);
  CHECK(rt[1].week == 4);
  CHECK(rt[1].source_policy == SourcePolicy::rft_shifted);

  std::vector<SftExample> xs(2);
  xs[0] = {4, {0, 2, 1}};
  xs[1] = {9, {5, 3, 4}};
  save_sft_examples(xs, tmp / "sft.jsonl");
  const auto rx = load_sft_examples(tmp / "sft.jsonl");
  REQUIRE(rx.size() == 2);
  CHECK(rx[0].context_id == 4);
  CHECK(rx[0].triple == xs[0].triple);
  CHECK(rx[1].triple == xs[1].triple);

  // Malformed rows name the file and line.
  write_text_file(tmp / "bad.jsonl", "{\"context_id\": 1}\nnot json\n");
  CHECK_THROWS_AS(load_sft_examples(tmp / "bad.jsonl"), DataError);
  write_text_file(tmp / "bad2.jsonl", "{\"context_id\": 1}\n");
  CHECK_THROWS_AS(load_sft_examples(tmp / "bad2.jsonl"), DataError);  // missing triple
}

TEST_CASE("config text parses strictly") {
  const std::string text =
      "# top comment\n"
      "[run]\n"
      "seed = 7\n"
      "out_dir = my_run   # trailing comment\n"
      "\n"
      "[world]\n"
      "n_contexts = 50\n"
      "languages = en, fr\n";
  const auto kv = parse_config_text(text);
  REQUIRE(kv.size() == 4);
  CHECK(kv.at("run.seed") == "7");
  CHECK(kv.at("run.out_dir") == "my_run");
  CHECK(kv.at("world.n_contexts") == "50");
  CHECK(kv.at("world.languages") == "en, fr");

  // Keys before any section stay unprefixed.
  const auto flat = parse_config_text("alpha = 1\n");
  CHECK(flat.at("alpha") == "1");

  CHECK_THROWS_AS(parse_config_text("[run]\nseed\n"), ConfigError);       // no '='
  CHECK_THROWS_AS(parse_config_text("[run]\n= 3\n"), ConfigError);        // empty key
  CHECK_THROWS_AS(parse_config_text("[run]\nseed =\n"), ConfigError);     // empty value
  CHECK_THROWS_AS(parse_config_text("[run\nseed = 1\n"), ConfigError);    // bad header
  CHECK_THROWS_AS(parse_config_text("[]\nseed = 1\n"), ConfigError);      // empty section
  CHECK_THROWS_AS(parse_config_text("[r]\na = 1\na = 2\n"), ConfigError); // duplicate

  // Duplicate detection is per flattened key, so sections separate cleanly.
  const auto two = parse_config_text("[a]\nx = 1\n[b]\nx = 2\n");
  CHECK(two.at("a.x") == "1");
  CHECK(two.at("b.x") == "2");
}
