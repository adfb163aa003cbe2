// Tests for the evaluation harness.  The Monte-Carlo clicked-group rate is
// checked against full enumeration of (action, scan-tree) probabilities;
// calibration bins against an independent re-binning of the same pairs; the
// usefulness comparison against hand-picked extremes; and the CSV writer
// against byte-level determinism and round-trip parsing.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "qs/evalkit.hpp"
#include "qs/probcore.hpp"
#include "qs/rng.hpp"

using namespace qs;

namespace {

// Hand-built world with a live user model and token-disjoint texts, so small
// pools and exact enumeration stay tractable.
World toy_world(std::uint64_t seed, int n_contexts, int pool_size) {
  World w;
  w.cfg.n_contexts = n_contexts;
  w.cfg.pool_size = pool_size;
  const FeaturizerConfig fc = w.cfg.featurizer();
  Rng rng(derive_stream(seed, 7));
  w.um.utility_weights.resize(static_cast<std::size_t>(fc.dim()));
  for (auto& v : w.um.utility_weights) v = rng.uniform(-0.5, 0.5);
  for (int i = 0; i < n_contexts; ++i) {
    Context c;
    c.id = i;
    c.language = "en";
    c.features.resize(static_cast<std::size_t>(w.cfg.context_dim));
    for (auto& v : c.features) v = rng.uniform(-1.0, 1.0);
    w.contexts.push_back(std::move(c));
    std::vector<Suggestion> pool;
    for (int j = 0; j < pool_size; ++j) {
      const std::string tag = "c" + std::to_string(i) + "s" + std::to_string(j);
      pool.push_back({j, tag + "a " + tag + "b " + tag + "c", "en"});
    }
    w.pools.push_back(std::move(pool));
  }
  return w;
}

Policy random_policy(const FeaturizerConfig& fc, std::uint64_t seed, double scale,
                     double refuse_b) {
  Policy p = make_policy(fc);
  Rng rng(derive_stream(seed, 123));
  for (auto& w : p.select_w) w = rng.uniform(-scale, scale);
  for (auto& w : p.refuse_w) w = rng.uniform(-scale, scale);
  p.refuse_b = refuse_b;
  return p;
}

// Independent expected clicked-group rate: enumerate actions per context.
double enumerated_ctr(const Policy& p, const PolicyEnv& env) {
  double total = 0.0;
  for (std::size_t i = 0; i < env.contexts.size(); ++i) {
    const int pool = static_cast<int>(env.cand_feats[i].size());
    for (const auto& a : enumerate_actions(pool, true)) {
      if (a.refuse) continue;
      const auto probs = scan_click_probs(*env.world, env.contexts[i], a.triple);
      total += std::exp(action_logprob(p, env, static_cast<int>(i), a)) *
               (probs[0] + probs[1] + probs[2]);
    }
  }
  return total / static_cast<double>(env.contexts.size());
}

std::array<int, 3> random_triple(Rng& rng, int pool) {
  std::array<int, 3> t{};
  t[0] = static_cast<int>(rng.index(static_cast<std::size_t>(pool)));
  do { t[1] = static_cast<int>(rng.index(static_cast<std::size_t>(pool))); } while (t[1] == t[0]);
  do {
    t[2] = static_cast<int>(rng.index(static_cast<std::size_t>(pool)));
  } while (t[2] == t[0] || t[2] == t[1]);
  return t;
}

std::vector<ClickLogRecord> simulate_logs(const World& w, int n, std::uint64_t seed) {
  std::vector<ClickLogRecord> logs;
  logs.reserve(static_cast<std::size_t>(n));
  Rng rng(derive_stream(seed, 1));
  for (int i = 0; i < n; ++i) {
    const auto& ctx = w.contexts[rng.index(w.contexts.size())];
    logs.push_back(serve_and_click(w, ctx, random_triple(rng, w.cfg.pool_size),
                                   derive_stream(seed, 2, static_cast<std::uint64_t>(i))));
  }
  return logs;
}

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

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("ctr is zero when clicks are impossible") {
  World w = toy_world(401, 3, 4);
  w.um.utility_bias = -1e9;  // every examined suggestion is hopeless
  const PolicyEnv env = make_policy_env(w, w.contexts);
  const Policy p = make_policy(w.cfg.featurizer());

  const CtrEstimate est = ctr_estimate(p, env, 5000, 11);
  CHECK(est.ctr == 0.0);
  CHECK(est.clicks == 0);
  CHECK(est.se == 0.0);
  CHECK(est.impressions == 5000);
  CHECK(ctr_exact(p, env) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("ctr matches the enumerated action and scan-tree probabilities") {
  const World w = toy_world(402, 3, 3);
  const PolicyEnv env = make_policy_env(w, w.contexts);
  const Policy p = random_policy(w.cfg.featurizer(), 402, 0.6, -1.0);

  const double exact = enumerated_ctr(p, env);
  CHECK(ctr_exact(p, env) == doctest::Approx(exact).epsilon(1e-12));
  CHECK(ctr_exact(p, env, false) == ctr_exact(p, env, true));

  const CtrEstimate est = ctr_estimate(p, env, 100000, 12);
  CHECK(std::fabs(est.ctr - exact) <= 3.5 * est.se + 1e-12);
  CHECK(est.clicks == static_cast<std::int64_t>(std::llround(est.ctr * 100000)));

  // Deterministic in seed, identical across serial and parallel paths.
  const CtrEstimate again = ctr_estimate(p, env, 100000, 12);
  CHECK(est.ctr == again.ctr);
  const CtrEstimate serial = ctr_estimate(p, env, 100000, 12, false);
  CHECK(est.ctr == serial.ctr);

  CHECK_THROWS_AS(ctr_estimate(p, env, 0, 1), std::invalid_argument);
}

TEST_CASE("ctr standard error shrinks as one over sqrt n") {
  const World w = toy_world(403, 4, 5);
  const PolicyEnv env = make_policy_env(w, w.contexts);
  const Policy p = random_policy(w.cfg.featurizer(), 403, 0.5, -2.0);
  const double exact = enumerated_ctr(p, env);

  double prev_se = 0.0;
  for (std::int64_t n : {1000, 10000, 100000}) {
    const CtrEstimate est = ctr_estimate(p, env, n, 13);
    CHECK(std::fabs(est.ctr - exact) <= 4.0 * est.se + 1e-12);
    if (prev_se > 0.0) {
      const double ratio = prev_se / est.se;
      CHECK(ratio > std::sqrt(10.0) * 0.8);
      CHECK(ratio < std::sqrt(10.0) * 1.25);
    }
    prev_se = est.se;
  }
}

TEST_CASE("ctr is monotone in a uniform utility shift") {
  const World base = toy_world(404, 3, 4);
  World shifted = base;
  shifted.um.utility_bias += 1.0;

  const Policy p = random_policy(base.cfg.featurizer(), 404, 0.4, -2.0);
  const PolicyEnv env_a = make_policy_env(base, base.contexts);
  const PolicyEnv env_b = make_policy_env(shifted, shifted.contexts);

  const double exact_a = ctr_exact(p, env_a);
  const double exact_b = ctr_exact(p, env_b);
  CHECK(exact_b > exact_a);

  const CtrEstimate mc_a = ctr_estimate(p, env_a, 20000, 14);
  const CtrEstimate mc_b = ctr_estimate(p, env_b, 20000, 14);
  CHECK(mc_b.ctr > mc_a.ctr);
}

TEST_CASE("calibration bins match an independent re-binning") {
  ScorerConfig sc;
  sc.input_dim = 20;
  sc.hidden1 = 12;
  sc.hidden2 = 8;
  sc.head = HeadKind::gaussian;
  const Scorer s = make_scorer(sc, 77);
  const auto data = synthetic_pairs(400, 20, 500);

  const int n_bins = 5;
  const auto bins = calibration_bins(s, data, n_bins, 1);

  // Independent pass: same definition, separate arithmetic.
  std::vector<double> conf, correct;
  for (const auto& pr : data) {
    const GaussianScore gw = garm_score(s, pr.chosen);
    const GaussianScore gl = garm_score(s, pr.rejected);
    conf.push_back(ulb(gw, gl));
    correct.push_back(gw.mu > gl.mu ? 1.0 : (gw.mu == gl.mu ? 0.5 : 0.0));
  }
  double lo = conf[0], hi = conf[0];
  for (double c : conf) {
    lo = std::min(lo, c);
    hi = std::max(hi, c);
  }
  std::vector<std::int64_t> counts(n_bins, 0);
  std::vector<double> sums(n_bins, 0.0);
  for (std::size_t i = 0; i < conf.size(); ++i) {
    const int b = std::min(n_bins - 1,
                           static_cast<int>((conf[i] - lo) / ((hi - lo) / n_bins)));
    counts[static_cast<std::size_t>(b)] += 1;
    sums[static_cast<std::size_t>(b)] += correct[i];
  }

  REQUIRE(bins.size() == static_cast<std::size_t>(n_bins));
  std::int64_t total = 0;
  for (int b = 0; b < n_bins; ++b) {
    const auto& bin = bins[static_cast<std::size_t>(b)];
    CHECK(bin.count == counts[static_cast<std::size_t>(b)]);
    if (bin.count > 0) {
      CHECK(bin.accuracy ==
            doctest::Approx(sums[static_cast<std::size_t>(b)] / bin.count).epsilon(1e-12));
      CHECK(bin.accuracy >= 0.0);
      CHECK(bin.accuracy <= 1.0);
    }
    total += bin.count;
  }
  CHECK(total == 400);
  CHECK(bins.front().lower == doctest::Approx(lo).epsilon(1e-12));
  CHECK(bins.back().upper == doctest::Approx(hi).epsilon(1e-12));
  for (std::size_t b = 0; b + 1 < bins.size(); ++b) {
    CHECK(bins[b].upper == doctest::Approx(bins[b + 1].lower).epsilon(1e-12));
  }

  // Serial equals parallel.
  const auto serial = calibration_bins(s, data, n_bins, 1, false);
  REQUIRE(serial.size() == bins.size());
  for (std::size_t b = 0; b < bins.size(); ++b) {
    CHECK(serial[b].count == bins[b].count);
    CHECK(serial[b].accuracy == bins[b].accuracy);
  }
}

TEST_CASE("calibration bins merge small bins and keep the partition") {
  ScorerConfig sc;
  sc.input_dim = 16;
  sc.head = HeadKind::gaussian;
  const Scorer s = make_scorer(sc, 78);
  const auto data = synthetic_pairs(200, 16, 501);

  const auto bins = calibration_bins(s, data, 8, 50);
  std::int64_t total = 0;
  for (const auto& b : bins) {
    CHECK(b.count >= 50);
    CHECK(b.lower <= b.upper);
    total += b.count;
  }
  CHECK(total == 200);
  for (std::size_t b = 0; b + 1 < bins.size(); ++b) {
    CHECK(bins[b].upper == doctest::Approx(bins[b + 1].lower).epsilon(1e-12));
  }

  // All-identical pairs collapse to a single zero-width bin.
  std::vector<PrefPair> same(120, data[0]);
  const auto one = calibration_bins(s, same, 5, 50);
  REQUIRE(one.size() == 1);
  CHECK(one[0].count == 120);
  CHECK(one[0].lower == one[0].upper);

  CHECK_THROWS_AS(calibration_bins(s, {}, 5, 50), std::invalid_argument);
  CHECK_THROWS_AS(calibration_bins(s, data, 2, 50), std::invalid_argument);
  CHECK_THROWS_AS(calibration_bins(s, data, 5, 0), std::invalid_argument);
  ScorerConfig scalar_cfg;
  scalar_cfg.input_dim = 16;
  scalar_cfg.head = HeadKind::scalar;
  const Scorer scalar_rm = make_scorer(scalar_cfg, 79);
  CHECK_THROWS_AS(calibration_bins(scalar_rm, data, 5, 50), std::invalid_argument);
}

TEST_CASE("trained model confidence correlates with accuracy") {
  WorldConfig cfg;
  cfg.n_contexts = 120;
  const World w = gen_world(88, cfg);

  const auto logs = simulate_logs(w, 14000, 880);
  const auto triplets = curate_triplets(w, logs, Pos3Mode::two_negatives);
  const auto pairs = featurize_triplets(w.contexts, triplets, w.cfg.featurizer());
  REQUIRE(pairs.size() > 3000);

  const std::size_t split = pairs.size() / 2;
  const std::vector<PrefPair> train(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(split));
  const std::vector<PrefPair> test(pairs.begin() + static_cast<std::ptrdiff_t>(split), pairs.end());

  ScorerConfig sc;
  sc.input_dim = w.cfg.featurizer().dim();
  sc.head = HeadKind::gaussian;
  Scorer s = make_scorer(sc, 881);
  TrainConfig tc;
  tc.epochs = 4;
  tc.lr = 3e-3;
  tc.seed = 882;
  train_scorer(s, train, tc);

  const auto bins = calibration_bins(s, test, 6, 50);
  REQUIRE(bins.size() >= 3);
  std::vector<double> mid, acc;
  for (const auto& b : bins) {
    mid.push_back(0.5 * (b.lower + b.upper));
    acc.push_back(b.accuracy);
  }
  CHECK(spearman(mid, acc) > 0.0);
}

TEST_CASE("spearman agrees with hand-computed ranks") {
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(spearman({1, 2, 3, 4}, {9, 7, 5, 3}) == doctest::Approx(-1.0).epsilon(1e-12));
  // x = {1,2,2,3} has tied middle ranks {1, 2.5, 2.5, 4}: rho = 3/sqrt(10).
  CHECK(spearman({1, 2, 2, 3}, {1, 2, 3, 4}) ==
        doctest::Approx(3.0 / std::sqrt(10.0)).epsilon(1e-12));
  CHECK(spearman({5, 1, 4, 2}, {50, 10, 40, 20}) == doctest::Approx(1.0).epsilon(1e-12));

  CHECK_THROWS_AS(spearman({1, 2}, {1, 2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(spearman({1}, {1}), std::invalid_argument);
  CHECK_THROWS_AS(spearman({2, 2, 2}, {1, 2, 3}), std::invalid_argument);
}

TEST_CASE("usefulness comparison: extremes, antisymmetry, identity") {
  WorldConfig cfg;
  cfg.n_contexts = 12;
  const World w = gen_world(90, cfg);

  std::vector<SuggestionGroup> best, worst, refusals;
  for (const auto& ctx : w.contexts) {
    const auto us = pool_utilities(w, ctx);
    std::vector<int> order(us.size());
    for (std::size_t j = 0; j < order.size(); ++j) order[j] = static_cast<int>(j);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return us[static_cast<std::size_t>(a)] > us[static_cast<std::size_t>(b)]; });
    SuggestionGroup hi, lo;
    const auto& pool = w.pools[static_cast<std::size_t>(ctx.id)];
    for (int t = 0; t < 3; ++t) {
      hi.suggestions.push_back(pool[static_cast<std::size_t>(order[static_cast<std::size_t>(t)])]);
      lo.suggestions.push_back(
          pool[static_cast<std::size_t>(order[order.size() - 1 - static_cast<std::size_t>(t)])]);
    }
    best.push_back(hi);
    worst.push_back(lo);
    SuggestionGroup r;
    r.is_refusal = true;
    refusals.push_back(r);
  }

  const double median = utility_quantile(w, 0.5);
  const std::int64_t n = static_cast<std::int64_t>(w.contexts.size());

  CHECK(gsb_proxy(w, w.contexts, best, best, median) == 0);
  const std::int64_t ab = gsb_proxy(w, w.contexts, best, worst, median);
  CHECK(ab > 0);
  CHECK(gsb_proxy(w, w.contexts, worst, best, median) == -ab);

  // Threshold below every utility: all suggestions useful, refusals score 0.
  const double floor_thresh = utility_quantile(w, 0.0) - 1.0;
  CHECK(gsb_proxy(w, w.contexts, best, refusals, floor_thresh) == 3 * n);
  CHECK(gsb_proxy(w, w.contexts, best, worst, floor_thresh) == 0);

  std::vector<SuggestionGroup> short_list(best.begin(), best.end() - 1);
  CHECK_THROWS_AS(gsb_proxy(w, w.contexts, short_list, worst, median),
                  std::invalid_argument);
}

TEST_CASE("utility quantile interpolates the pooled utility distribution") {
  const World w = toy_world(405, 3, 4);
  std::vector<double> all;
  for (const auto& ctx : w.contexts) {
    const auto us = pool_utilities(w, ctx);
    all.insert(all.end(), us.begin(), us.end());
  }
  std::sort(all.begin(), all.end());

  CHECK(utility_quantile(w, 0.0) == doctest::Approx(all.front()).epsilon(1e-12));
  CHECK(utility_quantile(w, 1.0) == doctest::Approx(all.back()).epsilon(1e-12));

  const double q = 0.37;
  const double pos = q * static_cast<double>(all.size() - 1);
  const auto i = static_cast<std::size_t>(pos);
  const double frac = pos - static_cast<double>(i);
  const double expect = all[i] * (1.0 - frac) + all[i + 1] * frac;
  CHECK(utility_quantile(w, q) == doctest::Approx(expect).epsilon(1e-12));

  CHECK(utility_quantile(w, 0.2) <= utility_quantile(w, 0.8));
  CHECK_THROWS_AS(utility_quantile(w, -0.1), std::invalid_argument);
  CHECK_THROWS_AS(utility_quantile(w, 1.1), std::invalid_argument);
}

TEST_CASE("ood table preserves registration order and matches rm_accuracy") {
  ScorerConfig sc;
  sc.input_dim = 18;
  sc.head = HeadKind::gaussian;
  const Scorer s = make_scorer(sc, 91);
  const auto d1 = synthetic_pairs(150, 18, 600);
  const auto d2 = synthetic_pairs(90, 18, 601);

  const auto rows = ood_eval(s, {{"iid", d1}, {"shifted", d2}, {"iid_copy", d1}});
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].dataset == "iid");
  CHECK(rows[1].dataset == "shifted");
  CHECK(rows[2].dataset == "iid_copy");
  CHECK(rows[0].accuracy == rm_accuracy(s, d1));
  CHECK(rows[1].accuracy == rm_accuracy(s, d2));
  CHECK(rows[0].accuracy == rows[2].accuracy);
  CHECK(rows[0].mean_ulb == rows[2].mean_ulb);
  CHECK(rows[0].has_ulb);
  CHECK(rows[0].n == 150);
  CHECK(rows[1].n == 90);

  // Mean confidence matches a direct average.
  double total = 0.0;
  for (const auto& pr : d1) total += ulb(garm_score(s, pr.chosen), garm_score(s, pr.rejected));
  CHECK(rows[0].mean_ulb == doctest::Approx(total / 150.0).epsilon(1e-12));

  ScorerConfig scalar_cfg;
  scalar_cfg.input_dim = 18;
  scalar_cfg.head = HeadKind::scalar;
  const Scorer scalar_rm = make_scorer(scalar_cfg, 92);
  const auto srows = ood_eval(scalar_rm, {{"iid", d1}});
  CHECK_FALSE(srows[0].has_ulb);

  CHECK_THROWS_AS(ood_eval(s, {{"empty", {}}}), std::invalid_argument);
}

TEST_CASE("report files are deterministic and parse back") {
  namespace fs = std::filesystem;
  EvalReport rep;
  rep.seeds = {1, 2};
  rep.config_fingerprint = "abc123";
  rep.ctr.push_back({"rl", 1, {0.123456789, 0.00123456789, 1234, 10000}});
  rep.ctr.push_back({"uniform", 1, {0.05, 0.0005, 500, 10000}});
  OodRow g;
  g.dataset = "iid";
  g.accuracy = 0.71234567;
  g.mean_ulb = 0.3311111;
  g.has_ulb = true;
  g.n = 4000;
  rep.accuracy.push_back({"iid", 1, g});
  OodRow ng;
  ng.dataset = "scalar";
  ng.accuracy = 0.65;
  ng.has_ulb = false;
  ng.n = 100;
  rep.accuracy.push_back({"scalar", 2, ng});
  rep.calibration.push_back({1, 0, {0.0, 0.5, 120, 0.625}});
  rep.calibration.push_back({1, 1, {0.5, 1.0, 80, 0.8875}});
  rep.gsb.push_back({"rl_vs_sft", 1, 17, 100});

  const fs::path dir_a = fs::path("evalkit_report_a");
  const fs::path dir_b = fs::path("evalkit_report_b");
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
  write_report(rep, dir_a.string());
  write_report(rep, dir_b.string());

  const std::vector<std::string> files = {"ctr.csv", "rm_accuracy.csv", "calibration.csv",
                                          "gsb.csv", "summary.txt"};
  for (const auto& f : files) {
    REQUIRE(fs::exists(dir_a / f));
    CHECK(slurp(dir_a / f) == slurp(dir_b / f));
  }

  const std::string ctr = slurp(dir_a / "ctr.csv");
  CHECK(ctr.rfind("policy,seed,ctr,stderr,clicks,impressions\n", 0) == 0);
  {
    std::istringstream in(ctr);
    std::string line;
    std::getline(in, line);  // header
    std::getline(in, line);
    std::istringstream row(line);
    std::string field;
    std::getline(row, field, ',');
    CHECK(field == "rl");
    std::getline(row, field, ',');
    CHECK(field == "1");
    std::getline(row, field, ',');
    CHECK(std::fabs(std::stod(field) - 0.123456789) <= 1e-6);
    std::getline(row, field, ',');
    CHECK(std::fabs(std::stod(field) - 0.00123456789) <= 1e-8);
    std::getline(row, field, ',');
    CHECK(field == "1234");
  }

  // The no-confidence row leaves its mean_ulb cell empty.
  const std::string acc = slurp(dir_a / "rm_accuracy.csv");
  CHECK(acc.find("scalar,2,0.65,,100\n") != std::string::npos);

  // Empty report: header-only tables.
  const fs::path dir_c = fs::path("evalkit_report_c");
  fs::remove_all(dir_c);
  write_report(EvalReport{}, dir_c.string());
  CHECK(slurp(dir_c / "ctr.csv") == "policy,seed,ctr,stderr,clicks,impressions\n");
  CHECK(slurp(dir_c / "rm_accuracy.csv") == "dataset,seed,accuracy,mean_ulb,n\n");
  CHECK(slurp(dir_c / "calibration.csv") == "seed,bin,lower,upper,count,accuracy\n");
  CHECK(slurp(dir_c / "gsb.csv") == "comparison,seed,gsb,n_contexts\n");

  // A file where the directory should be is an error.
  const fs::path blocker = fs::path("evalkit_report_blocked");
  fs::remove_all(blocker);
  std::ofstream(blocker.string()) << "x";
  CHECK_THROWS_AS(write_report(rep, blocker.string()), std::runtime_error);

  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
  fs::remove_all(dir_c);
  fs::remove(blocker);
}

TEST_CASE("six significant digit formatting") {
  CHECK(format_sig(0.123456789) == "0.123457");
  CHECK(format_sig(123456.789) == "123457");
  CHECK(format_sig(0.0001234564) == "0.000123456");
  CHECK(format_sig(1.0) == "1");
  CHECK(format_sig(-2.5) == "-2.5");
  CHECK(format_sig(0.0) == "0");
}
