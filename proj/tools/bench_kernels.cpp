// Compares the OpenMP kernels against their serial reference twins: same
// block-structured reductions, so the outputs must match bit for bit while
// the wall clock shows the parallel speedup.  Covers the four hot loops:
// Monte-Carlo preference sampling, batch reward-model gradients, policy
// rollout training, and click-through estimation.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "qs/evalkit.hpp"
#include "qs/grpo.hpp"
#include "qs/parallel.hpp"
#include "qs/pipeline.hpp"
#include "qs/probcore.hpp"
#include "qs/rmodels.hpp"
#include "qs/rng.hpp"
#include "qs/world.hpp"

using namespace qs;

namespace {

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

struct Row {
  std::string name;
  double serial_ms = 0.0;
  double parallel_ms = 0.0;
  double max_diff = 0.0;
};

void print_rows(const std::vector<Row>& rows) {
  std::printf("%-28s %12s %12s %9s %12s\n", "kernel", "serial ms", "parallel ms",
              "speedup", "max |diff|");
  for (const auto& r : rows) {
    std::printf("%-28s %12.1f %12.1f %8.2fx %12.3g\n", r.name.c_str(), r.serial_ms,
                r.parallel_ms, r.serial_ms / r.parallel_ms, r.max_diff);
  }
}

template <class Fn>
double timed(Fn&& fn) {
  const double t0 = now_ms();
  fn();
  return now_ms() - t0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"serial vs OpenMP kernel benchmark"};
  int threads = 0;
  std::int64_t mc_samples = 4000000;
  int batch_pairs = 8192;
  std::int64_t ctr_impressions = 400000;
  app.add_option("--threads", threads, "worker cap (0 = hardware default)");
  app.add_option("--mc-samples", mc_samples, "Monte-Carlo draws per estimate");
  app.add_option("--batch-pairs", batch_pairs, "preference pairs per gradient batch");
  app.add_option("--ctr-impressions", ctr_impressions, "impressions per estimate");
  CLI11_PARSE(app, argc, argv);
  if (threads > 0) par::set_max_threads(threads);
  std::printf("threads: %d\n\n", par::max_threads());

  std::vector<Row> rows;

  {  // Monte-Carlo preference probability
    const GaussianScore w{0.4, 1.3}, l{-0.2, 0.8};
    double pv = 0.0, sv = 0.0;
    Row r{"mc preference sampling"};
    r.parallel_ms = timed([&] { pv = pref_prob_mc(w, l, mc_samples, 42).value; });
    r.serial_ms = timed([&] { sv = pref_prob_mc_serial(w, l, mc_samples, 42).value; });
    r.max_diff = std::fabs(pv - sv);
    rows.push_back(r);
  }

  {  // batch gradient of the gaussian-head loss
    ScorerConfig sc;
    sc.input_dim = 64;
    sc.head = HeadKind::gaussian;
    const Scorer s = make_scorer(sc, 7);
    Rng rng(11);
    std::vector<PrefPair> batch(static_cast<std::size_t>(batch_pairs));
    for (auto& pr : batch) {
      pr.chosen.resize(64);
      pr.rejected.resize(64);
      for (auto& v : pr.chosen) v = rng.uniform(-1.0, 1.0);
      for (auto& v : pr.rejected) v = rng.uniform(-1.0, 1.0);
    }
    std::vector<double> gp, gs;
    double lp = 0.0, ls = 0.0;
    Row r{"batch garm gradient"};
    r.parallel_ms = timed([&] {
      for (int it = 0; it < 10; ++it) lp = garm_loss_grad(sc, s.params, batch, 0.05, &gp, true);
    });
    r.serial_ms = timed([&] {
      for (int it = 0; it < 10; ++it) ls = garm_loss_grad(sc, s.params, batch, 0.05, &gs, false);
    });
    r.max_diff = std::fabs(lp - ls);
    for (std::size_t i = 0; i < gp.size(); ++i) {
      r.max_diff = std::max(r.max_diff, std::fabs(gp[i] - gs[i]));
    }
    rows.push_back(r);
  }

  WorldConfig wc;
  wc.n_contexts = 120;
  const World w = gen_world(99, wc);
  const PolicyEnv env = make_policy_env(w, w.contexts);
  const FeaturizerConfig fc = wc.featurizer();

  {  // rollout training (sampling + surrogate gradient)
    FusionWeights fw;
    fw.w.assign(static_cast<std::size_t>(kNumComponents), 0.0);
    fw.w[1] = 0.5;  // length
    fw.w[3] = 0.3;  // diversity
    fw.w[4] = 1.0;  // safety
    const RewardFn fn = make_fused_reward(env, fw, nullptr, nullptr);
    GrpoConfig g;
    g.steps = 12;
    g.group_size = 8;
    g.seed = 5;
    GrpoTrainResult rp, rs;
    Row r{"grpo rollout training"};
    g.parallel = true;
    r.parallel_ms = timed([&] { rp = grpo_train(env, make_policy(fc), fn, g); });
    g.parallel = false;
    r.serial_ms = timed([&] { rs = grpo_train(env, make_policy(fc), fn, g); });
    const auto ppar = policy_params(rp.policy);
    const auto pser = policy_params(rs.policy);
    for (std::size_t i = 0; i < ppar.size(); ++i) {
      r.max_diff = std::max(r.max_diff, std::fabs(ppar[i] - pser[i]));
    }
    rows.push_back(r);
  }

  {  // click-through estimation
    const Policy p = make_policy(fc);
    CtrEstimate ep, es;
    Row r{"ctr estimation"};
    r.parallel_ms = timed([&] { ep = ctr_estimate(p, env, ctr_impressions, 13, true); });
    r.serial_ms = timed([&] { es = ctr_estimate(p, env, ctr_impressions, 13, false); });
    r.max_diff = std::fabs(ep.ctr - es.ctr);
    rows.push_back(r);
  }

  print_rows(rows);
  bool exact = true;
  for (const auto& r : rows) exact = exact && r.max_diff == 0.0;
  std::printf("\nserial == parallel bitwise: %s\n", exact ? "yes" : "NO");
  return exact ? 0 : 1;
}
