// Simulator contracts: deterministic generation, pool texture, the click
// scan against its enumeration oracle, curation filtering, temporal drift,
// and diversity-aware top-3 assembly.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

#include "qs/probcore.hpp"
#include "qs/rng.hpp"
#include "qs/world.hpp"

using namespace qs;

namespace {

WorldConfig small_cfg() {
  WorldConfig cfg;
  cfg.n_contexts = 60;
  return cfg;
}

// A hand-built world with controllable utilities: one context, pool of
// `pool` one-word suggestions, all utilities = u0, noise = 0.
World flat_world(int pool, double u0) {
  WorldConfig cfg;
  cfg.n_contexts = 1;
  cfg.pool_size = std::max(6, pool);
  World w = gen_world(7, cfg);
  w.contexts[0].unsafe = false;
  std::fill(w.um.utility_weights.begin(), w.um.utility_weights.end(), 0.0);
  w.um.utility_bias = u0;
  w.um.noise_sd_low = 0.0;
  w.um.noise_sd_high = 0.0;
  return w;
}

std::vector<ClickLogRecord> simulate_uniform(const World& w, int n, std::uint64_t seed) {
  std::vector<ClickLogRecord> logs;
  logs.reserve(n);
  Rng r(seed);
  const int pool = w.cfg.pool_size;
  for (int i = 0; i < n; ++i) {
    const Context& ctx = w.contexts[r.index(w.contexts.size())];
    std::array<int, 3> t{};
    t[0] = static_cast<int>(r.index(pool));
    do { t[1] = static_cast<int>(r.index(pool)); } while (t[1] == t[0]);
    do { t[2] = static_cast<int>(r.index(pool)); } while (t[2] == t[0] || t[2] == t[1]);
    logs.push_back(serve_and_click(w, ctx, t, r.next()));
  }
  return logs;
}

}  // namespace

TEST_CASE("same seed and config give identical worlds") {
  const World a = gen_world(11, small_cfg());
  const World b = gen_world(11, small_cfg());
  REQUIRE(a.contexts.size() == b.contexts.size());
  for (std::size_t i = 0; i < a.contexts.size(); ++i) {
    CHECK(a.contexts[i].features == b.contexts[i].features);
    CHECK(a.contexts[i].language == b.contexts[i].language);
    CHECK(a.contexts[i].prior_queries == b.contexts[i].prior_queries);
    for (std::size_t s = 0; s < a.pools[i].size(); ++s) {
      CHECK(a.pools[i][s].text == b.pools[i][s].text);
    }
  }
  CHECK(a.um.utility_weights == b.um.utility_weights);
  // And a different seed gives a different world.
  const World c = gen_world(12, small_cfg());
  CHECK(a.pools[0][0].text != c.pools[0][0].text);
}

TEST_CASE("unsafe fraction is honored within binomial noise") {
  WorldConfig cfg = small_cfg();
  cfg.n_contexts = 2000;
  const World w = gen_world(3, cfg);
  int unsafe = 0;
  for (const Context& c : w.contexts) unsafe += c.unsafe;
  const double expect = 2000 * cfg.unsafe_fraction;
  const double sd = std::sqrt(2000 * cfg.unsafe_fraction * (1 - cfg.unsafe_fraction));
  CHECK(std::abs(unsafe - expect) <= 3 * sd);
}

TEST_CASE("every pool carries the advertised texture") {
  const World w = gen_world(5, small_cfg());
  for (const Context& c : w.contexts) {
    const auto& pool = w.pools[static_cast<std::size_t>(c.id)];
    REQUIRE(static_cast<int>(pool.size()) == w.cfg.pool_size);
    bool paraphrase = false, overlong = false, mismatch = false;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      REQUIRE(!pool[i].text.empty());
      REQUIRE(pool[i].id == static_cast<int>(i));
      if (tokenize(pool[i].text).size() >= 13) overlong = true;
      if (pool[i].language != c.language) mismatch = true;
      for (std::size_t j = i + 1; j < pool.size(); ++j) {
        if (jaccard1(pool[i].text, pool[j].text) >= 0.5) paraphrase = true;
      }
    }
    CHECK(paraphrase);
    CHECK(overlong);
    CHECK(mismatch);
  }
}

TEST_CASE("utility calibration hits the configured scale") {
  const World w = gen_world(17, small_cfg());
  double s1 = 0.0, s2 = 0.0;
  std::int64_t n = 0;
  for (const Context& c : w.contexts) {
    for (double u : pool_utilities(w, c)) {
      s1 += u;
      s2 += u * u;
      ++n;
    }
  }
  const double mean = s1 / n;
  const double sd = std::sqrt(s2 / n - mean * mean);
  CHECK(mean == doctest::Approx(w.cfg.utility_mean).epsilon(1e-9));
  // Spread is approximate: the length/language slopes add variance on top
  // of the calibrated random part.
  CHECK(sd > 0.8 * w.cfg.utility_sd);
  CHECK(sd < 2.5 * w.cfg.utility_sd);
}

TEST_CASE("degenerate configs are rejected") {
  WorldConfig cfg;
  cfg.n_contexts = 0;
  CHECK_THROWS_AS(gen_world(1, cfg), std::invalid_argument);
  cfg = WorldConfig{};
  cfg.pool_size = 4;
  CHECK_THROWS_AS(gen_world(1, cfg), std::invalid_argument);
  cfg = WorldConfig{};
  cfg.languages = {"en"};
  CHECK_THROWS_AS(gen_world(1, cfg), std::invalid_argument);
  cfg = WorldConfig{};
  cfg.position_bias = {0.4, 0.6, 1.0};  // increasing
  CHECK_THROWS_AS(gen_world(1, cfg), std::invalid_argument);
}

TEST_CASE("scan oracle: flat utilities reproduce the hand-enumerated probs") {
  const World w = flat_world(6, 0.0);
  const std::array<int, 3> t{0, 1, 2};
  const std::array<double, 4> p = scan_click_probs(w, w.contexts[0], t);
  // position_bias (1.0, 0.6, 0.4) with p_click = 1/2 at every position:
  //   P1 = 0.5, P2 = 0.5*0.6*0.5 = 0.15, P3 = 0.5*0.7*0.4*0.5 = 0.07.
  CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(p[1] == doctest::Approx(0.15).epsilon(1e-12));
  CHECK(p[2] == doctest::Approx(0.07).epsilon(1e-12));
  CHECK(p[0] + p[1] + p[2] + p[3] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("empirical click frequencies match the scan oracle") {
  World w = gen_world(23, small_cfg());
  const Context& ctx = w.contexts[4];
  const std::array<int, 3> t{2, 0, 5};
  const std::array<double, 4> p = scan_click_probs(w, ctx, t);
  const int n = 100000;
  std::array<int, 4> hits{};
  for (int i = 0; i < n; ++i) {
    const ClickLogRecord rec = serve_and_click(w, ctx, t, derive_stream(900, i));
    ++hits[rec.clicked_position ? static_cast<std::size_t>(*rec.clicked_position - 1) : 3];
  }
  for (std::size_t k = 0; k < 4; ++k) {
    const double sd = std::sqrt(p[k] * (1 - p[k]) / n);
    CHECK(std::abs(hits[k] / double(n) - p[k]) <= 3 * sd + 1e-9);
  }
}

TEST_CASE("hopeless utilities never get clicked") {
  World w = flat_world(6, -1e9);
  w.um.position_bias = {1.0, 1.0, 1.0};
  for (int i = 0; i < 2000; ++i) {
    const ClickLogRecord rec = serve_and_click(w, w.contexts[0], {0, 1, 2}, 50 + i);
    REQUIRE(!rec.clicked_position.has_value());
    REQUIRE(rec.examined[0]);  // bias 1.0 always examines
  }
}

TEST_CASE("clicked position was always examined; malformed triples throw") {
  const World w = gen_world(29, small_cfg());
  Rng r(1);
  for (const ClickLogRecord& rec : simulate_uniform(w, 5000, 77)) {
    if (rec.clicked_position) REQUIRE(rec.examined[static_cast<std::size_t>(*rec.clicked_position - 1)]);
  }
  CHECK_THROWS_AS(serve_and_click(w, w.contexts[0], {0, 0, 1}, 1), std::invalid_argument);
  CHECK_THROWS_AS(serve_and_click(w, w.contexts[0], {0, 1, 99}, 1), std::invalid_argument);
  CHECK_THROWS_AS(serve_and_click(w, w.contexts[0], {-1, 1, 2}, 1), std::invalid_argument);
}

TEST_CASE("position 1 dominates the click share under uniform serving") {
  const World w = gen_world(31, small_cfg());
  std::array<int, 3> clicks{};
  for (const ClickLogRecord& rec : simulate_uniform(w, 60000, 5)) {
    if (rec.clicked_position) ++clicks[static_cast<std::size_t>(*rec.clicked_position - 1)];
  }
  CHECK(clicks[0] > clicks[1]);
  CHECK(clicks[1] > clicks[2]);
}

TEST_CASE("curation keeps only later-position clicks and reports drops") {
  const World w = gen_world(37, small_cfg());
  const std::vector<ClickLogRecord> logs = simulate_uniform(w, 40000, 9);
  CurationStats st;
  const std::vector<PreferenceTriplet> trips =
      curate_triplets(w, logs, Pos3Mode::two_negatives, &st);
  CHECK(st.records == 40000);
  CHECK(st.records == st.dropped_no_click + st.dropped_position1 + st.kept_records);
  CHECK(st.triplets == static_cast<std::int64_t>(trips.size()));
  CHECK(st.kept_records > 0);
  // Position-3 clicks emit two triplets in the default mode.
  std::int64_t pos3 = 0;
  for (const ClickLogRecord& rec : logs) {
    if (rec.clicked_position && *rec.clicked_position == 3) ++pos3;
  }
  CHECK(st.triplets == st.kept_records + pos3);
  // Single-negative mode: one triplet per kept record.
  CurationStats st2;
  curate_triplets(w, logs, Pos3Mode::position2_only, &st2);
  CHECK(st2.triplets == st2.kept_records);
  // Record-level filter invariants.
  for (const PreferenceTriplet& t : trips) {
    REQUIRE(t.chosen.id != t.rejected.id);
    REQUIRE(t.source_policy == SourcePolicy::base);
  }
}

TEST_CASE("curated labels carry true preference signal above chance") {
  const World w = gen_world(41, small_cfg());
  const std::vector<PreferenceTriplet> trips =
      curate_triplets(w, simulate_uniform(w, 60000, 21), Pos3Mode::two_negatives, nullptr);
  REQUIRE(trips.size() >= 10000);
  double agree = 0.0;
  for (const PreferenceTriplet& t : trips) {
    const Context& ctx = w.contexts[static_cast<std::size_t>(t.context_id)];
    agree += utility(w, ctx, t.chosen) > utility(w, ctx, t.rejected) ? 1.0 : 0.0;
  }
  CHECK(agree / static_cast<double>(trips.size()) > 0.5);
}

TEST_CASE("temporal shift: linear mean drift, fresh but reproducible draws") {
  const World w = gen_world(43, small_cfg());
  CHECK_THROWS_AS(temporal_shift(w, 0, 0.1), std::invalid_argument);
  auto ambient_mean = [&](const std::vector<Context>& cs) {
    double s = 0.0;
    std::int64_t n = 0;
    for (const Context& c : cs) {
      for (int d = kAmbientStart; d < w.cfg.context_dim; ++d) {
        s += c.features[static_cast<std::size_t>(d)];
        ++n;
      }
    }
    return s / n;
  };
  const int coords = (w.cfg.context_dim - kAmbientStart) * w.cfg.n_contexts;
  const double tol = 3.0 / std::sqrt(static_cast<double>(coords));
  for (int week = 1; week <= 4; ++week) {
    const std::vector<Context> shifted = temporal_shift(w, week, 0.25);
    CHECK(std::abs(ambient_mean(shifted) - 0.25 * week) < tol);
    CHECK(shifted[0].week == week);
    // Regime/unsafe indicators and tags are untouched.
    for (std::size_t i = 0; i < shifted.size(); ++i) {
      REQUIRE(shifted[i].features[kRegimeCoord] == w.contexts[i].features[kRegimeCoord]);
      REQUIRE(shifted[i].features[kUnsafeCoord] == w.contexts[i].features[kUnsafeCoord]);
      REQUIRE(shifted[i].language == w.contexts[i].language);
    }
  }
  // Zero drift keeps the distribution parameters (mean ~ 0) but reruns are
  // identical and distinct weeks use distinct draws.
  const std::vector<Context> z1 = temporal_shift(w, 1, 0.0);
  CHECK(std::abs(ambient_mean(z1)) < tol);
  CHECK(temporal_shift(w, 1, 0.0)[0].features == z1[0].features);
  CHECK(temporal_shift(w, 2, 0.0)[0].features != z1[0].features);
}

TEST_CASE("sft assembly obeys both dedup thresholds and prefers utility") {
  const DedupeConfig dd;
  double assembled_better = 0.0;
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    const World w = gen_world(seed, small_cfg());
    std::vector<std::vector<double>> scores(w.pools.size());
    for (const Context& c : w.contexts) scores[static_cast<std::size_t>(c.id)] = pool_utilities(w, c);
    const SftAssembly sft = assemble_sft_data(w, scores, dd);
    REQUIRE(!sft.examples.empty());
    const FeaturizerConfig fc = w.cfg.featurizer();
    double mean_sft = 0.0, mean_rand = 0.0;
    Rng r(seed * 99);
    for (const SftExample& ex : sft.examples) {
      const Context& c = w.contexts[static_cast<std::size_t>(ex.context_id)];
      const auto& pool = w.pools[static_cast<std::size_t>(ex.context_id)];
      std::vector<std::vector<double>> f;
      for (int id : ex.triple) {
        const Suggestion& s = pool[static_cast<std::size_t>(id)];
        mean_sft += utility(w, c, s);
        f.push_back(featurize(c, s, fc));
      }
      for (int i = 0; i < 3; ++i) {
        for (int j = i + 1; j < 3; ++j) {
          REQUIRE(jaccard1(pool[static_cast<std::size_t>(ex.triple[static_cast<std::size_t>(i)])].text,
                           pool[static_cast<std::size_t>(ex.triple[static_cast<std::size_t>(j)])].text) <=
                  dd.jaccard_max);
          REQUIRE(suggestion_cosine(f[static_cast<std::size_t>(i)], f[static_cast<std::size_t>(j)], fc) <=
                  dd.cosine_max);
        }
      }
      // Random triple baseline from the same pool.
      for (int k = 0; k < 3; ++k) mean_rand += utility(w, c, pool[r.index(pool.size())]);
    }
    if (mean_sft > mean_rand) assembled_better += 1.0;
  }
  CHECK(assembled_better == 5.0);
}

TEST_CASE("identical candidates collapse to one survivor") {
  World w = gen_world(51, small_cfg());
  auto& pool = w.pools[0];
  for (std::size_t s = 0; s < pool.size(); ++s) {
    pool[s].text = "same same text";
    pool[s].language = w.contexts[0].language;
  }
  std::vector<std::vector<double>> scores(w.pools.size());
  for (const Context& c : w.contexts) {
    scores[static_cast<std::size_t>(c.id)].assign(w.pools[static_cast<std::size_t>(c.id)].size(), 0.0);
  }
  const SftAssembly sft = assemble_sft_data(w, scores, DedupeConfig{});
  for (const SftExample& ex : sft.examples) REQUIRE(ex.context_id != 0);  // dropped
  CHECK(sft.dropped_contexts >= 1);
}

TEST_CASE("featurize: determinism, token sensitivity, language coordinate") {
  const World w = gen_world(53, small_cfg());
  const FeaturizerConfig fc = w.cfg.featurizer();
  const Context& c = w.contexts[0];
  const Suggestion a{0, "mar kol ben", c.language};
  CHECK(featurize(c, a, fc) == featurize(c, a, fc));
  const Suggestion b{0, "mar kol ven", c.language};
  CHECK(featurize(c, a, fc) != featurize(c, b, fc));
  Suggestion m = a;
  m.language = "zz";
  CHECK(featurize(c, m, fc)[static_cast<std::size_t>(fc.lang_match_coord())] == 0.0);
  m.language = "";
  CHECK(featurize(c, m, fc)[static_cast<std::size_t>(fc.lang_match_coord())] == 0.5);
  CHECK_THROWS_AS(featurize(c, Suggestion{0, "", "en"}, fc), std::invalid_argument);
}

TEST_CASE("examined_click_prob oracle sanity") {
  CHECK(examined_click_prob(0.0, 0.0) == 0.5);
  CHECK(examined_click_prob(2.0, 0.0) == doctest::Approx(sigmoid(2.0)).epsilon(1e-12));
  // Noise flattens toward 1/2 but keeps the sign.
  const double p = examined_click_prob(1.0, 2.0);
  CHECK(p > 0.5);
  CHECK(p < sigmoid(1.0));
  // Monte Carlo agreement.
  Rng r(2);
  double hits = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) hits += r.bernoulli(sigmoid(1.0 + 2.0 * r.normal()));
  CHECK(std::abs(hits / n - p) < 3.0 * std::sqrt(p * (1 - p) / n));
}
