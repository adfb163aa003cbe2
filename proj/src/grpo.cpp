#include "qs/grpo.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "qs/parallel.hpp"
#include "qs/probcore.hpp"
#include "qs/rng.hpp"

namespace qs {
namespace {

// Runs fn(i) for i in [0, n), optionally in parallel, capturing the first
// exception and rethrowing it afterwards — exceptions must never unwind
// through an OpenMP region.
template <class Fn>
void parallel_guard(std::int64_t n, bool parallel, Fn&& fn) {
  if (!parallel) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<bool> failed{false};
  std::mutex mu;
  std::string msg;
  par::for_each(n, [&](std::int64_t i) {
    if (failed.load(std::memory_order_relaxed)) return;
    try {
      fn(i);
    } catch (const std::exception& e) {
      const std::lock_guard<std::mutex> lock(mu);
      if (!failed.exchange(true)) msg = e.what();
    }
  });
  if (failed.load()) throw std::runtime_error(msg);
}

// Temperature-scaled action scores for one context: z per candidate plus
// the refuse score.  The refuse-vs-select gate is kept as a single logit so
// both branches stay finite at any score spread, and the sequential-choice
// denominators are re-shifted per step for the same reason.
struct Zs {
  std::vector<double> z;
  double zr = 0.0;
  std::vector<double> ec;  // exp(z - max(z)); the largest entry is 1
  double sc = 0.0;         // sum(ec) >= 1
  double log_s = 0.0;      // logsumexp(z)
  double gate = 0.0;       // zr - log_s; P(refuse) = sigmoid(gate)
};

Zs scores(const Policy& p, const PolicyEnv& env, int ctx_index) {
  const auto& feats = env.cand_feats[static_cast<std::size_t>(ctx_index)];
  const auto& ctx = env.contexts[static_cast<std::size_t>(ctx_index)];
  Zs zs;
  zs.z.resize(feats.size());
  const double inv_t = 1.0 / p.temperature;
  for (std::size_t j = 0; j < feats.size(); ++j) {
    double acc = 0.0;
    for (std::size_t d = 0; d < p.select_w.size(); ++d) acc += p.select_w[d] * feats[j][d];
    zs.z[j] = acc * inv_t;
  }
  double racc = p.refuse_b;
  for (std::size_t d = 0; d < p.refuse_w.size(); ++d) {
    racc += p.refuse_w[d] * ctx.features[d];
  }
  zs.zr = racc * inv_t;

  double mc = zs.z[0];
  for (double z : zs.z) mc = std::max(mc, z);
  zs.ec.resize(zs.z.size());
  zs.sc = 0.0;
  for (std::size_t j = 0; j < zs.z.size(); ++j) {
    zs.ec[j] = std::exp(zs.z[j] - mc);
    zs.sc += zs.ec[j];
  }
  zs.log_s = mc + std::log(zs.sc);
  zs.gate = zs.zr - zs.log_s;
  return zs;
}

// logsumexp of z over the candidates marked remaining.
double log_denom(const std::vector<double>& z, const std::vector<char>& remaining) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < z.size(); ++j) {
    if (remaining[j] != 0) m = std::max(m, z[j]);
  }
  double s = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    if (remaining[j] != 0) s += std::exp(z[j] - m);
  }
  return m + std::log(s);
}

void check_action(const PolicyAction& a, int pool_size) {
  if (a.refuse) return;
  const auto& t = a.triple;
  for (int idx : t) {
    if (idx < 0 || idx >= pool_size) {
      throw std::invalid_argument("policy action: pool index out of range: " +
                                  std::to_string(idx));
    }
  }
  if (t[0] == t[1] || t[0] == t[2] || t[1] == t[2]) {
    throw std::invalid_argument("policy action: repeated pool index in triple");
  }
}

double logprob_from_scores(const Zs& zs, const PolicyAction& a) {
  if (a.refuse) return log_sigmoid(zs.gate);
  double lp = log_sigmoid(-zs.gate);
  std::vector<char> remaining(zs.z.size(), 1);
  for (int t = 0; t < 3; ++t) {
    const auto c = static_cast<std::size_t>(a.triple[static_cast<std::size_t>(t)]);
    lp += zs.z[c] - log_denom(zs.z, remaining);
    remaining[c] = 0;
  }
  return lp;
}

// d(logprob)/dz for every candidate plus the refuse score.
void dlogp_dz(const Zs& zs, const PolicyAction& a, std::vector<double>& dz, double& dzr) {
  const std::size_t n = zs.z.size();
  dz.assign(n, 0.0);
  const double pr = sigmoid(zs.gate);
  if (a.refuse) {
    dzr = 1.0 - pr;
    for (std::size_t j = 0; j < n; ++j) dz[j] = -(1.0 - pr) * zs.ec[j] / zs.sc;
    return;
  }
  dzr = -pr;
  for (std::size_t j = 0; j < n; ++j) dz[j] = pr * zs.ec[j] / zs.sc;
  std::vector<char> remaining(n, 1);
  for (int t = 0; t < 3; ++t) {
    const auto c = static_cast<std::size_t>(a.triple[static_cast<std::size_t>(t)]);
    const double ld = log_denom(zs.z, remaining);
    dz[c] += 1.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (remaining[j] != 0) dz[j] -= std::exp(zs.z[j] - ld);
    }
    remaining[c] = 0;
  }
}

// Chains d(logprob)/dz into flat-parameter space: select_w ++ refuse_w ++ b.
void chain_dz(const Policy& p, const PolicyEnv& env, int ctx_index,
              const std::vector<double>& dz, double dzr, double scale, double* acc) {
  const auto& feats = env.cand_feats[static_cast<std::size_t>(ctx_index)];
  const auto& ctx = env.contexts[static_cast<std::size_t>(ctx_index)];
  const double k = scale / p.temperature;
  const std::size_t nsel = p.select_w.size();
  for (std::size_t j = 0; j < dz.size(); ++j) {
    const double g = k * dz[j];
    if (g == 0.0) continue;
    const auto& f = feats[j];
    for (std::size_t d = 0; d < nsel; ++d) acc[d] += g * f[d];
  }
  const double gr = k * dzr;
  for (std::size_t d = 0; d < p.refuse_w.size(); ++d) {
    acc[nsel + d] += gr * ctx.features[d];
  }
  acc[nsel + p.refuse_w.size()] += gr;
}

void check_policy_env(const Policy& p, const PolicyEnv& env) {
  if (env.world == nullptr) throw std::invalid_argument("policy env: null world");
  const auto fc = env.world->cfg.featurizer();
  if (p.select_w.size() != static_cast<std::size_t>(fc.dim())) {
    throw std::invalid_argument("policy: select_w dimension mismatch");
  }
  if (p.refuse_w.size() != static_cast<std::size_t>(fc.context_dim)) {
    throw std::invalid_argument("policy: refuse_w dimension mismatch");
  }
  if (!(p.temperature > 0.0)) {
    throw std::invalid_argument("policy: temperature must be > 0");
  }
}

}  // namespace

Policy make_policy(const FeaturizerConfig& fc) {
  Policy p;
  p.select_w.assign(static_cast<std::size_t>(fc.dim()), 0.0);
  p.refuse_w.assign(static_cast<std::size_t>(fc.context_dim), 0.0);
  p.refuse_b = -3.0;
  p.temperature = 1.0;
  return p;
}

std::size_t policy_param_count(const Policy& p) {
  return p.select_w.size() + p.refuse_w.size() + 1;
}

std::vector<double> policy_params(const Policy& p) {
  std::vector<double> flat;
  flat.reserve(policy_param_count(p));
  flat.insert(flat.end(), p.select_w.begin(), p.select_w.end());
  flat.insert(flat.end(), p.refuse_w.begin(), p.refuse_w.end());
  flat.push_back(p.refuse_b);
  return flat;
}

void set_policy_params(Policy& p, const std::vector<double>& flat) {
  if (flat.size() != policy_param_count(p)) {
    throw std::invalid_argument("set_policy_params: size mismatch");
  }
  std::copy(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(p.select_w.size()),
            p.select_w.begin());
  std::copy(flat.begin() + static_cast<std::ptrdiff_t>(p.select_w.size()),
            flat.end() - 1, p.refuse_w.begin());
  p.refuse_b = flat.back();
}

PolicyEnv make_policy_env(const World& w, std::vector<Context> contexts) {
  PolicyEnv env;
  env.world = &w;
  env.contexts = std::move(contexts);
  const auto fc = w.cfg.featurizer();
  for (std::size_t i = 0; i < env.contexts.size(); ++i) {
    if (env.contexts[i].id != static_cast<int>(i)) {
      throw std::invalid_argument("make_policy_env: contexts must be the full world "
                                  "list in id order");
    }
    if (w.pools[i].size() < 3) {
      throw std::invalid_argument("make_policy_env: pool smaller than a triple");
    }
  }
  env.cand_feats.resize(env.contexts.size());
  parallel_guard(static_cast<std::int64_t>(env.contexts.size()), true, [&](std::int64_t i) {
    const auto& ctx = env.contexts[static_cast<std::size_t>(i)];
    const auto& pool = w.pools[static_cast<std::size_t>(i)];
    auto& feats = env.cand_feats[static_cast<std::size_t>(i)];
    feats.reserve(pool.size());
    for (const auto& s : pool) feats.push_back(featurize(ctx, s, fc));
  });
  return env;
}

std::vector<PolicyAction> enumerate_actions(int pool_size, bool include_refuse) {
  if (pool_size < 3) {
    throw std::invalid_argument("enumerate_actions: pool size must be >= 3");
  }
  std::vector<PolicyAction> actions;
  if (include_refuse) {
    PolicyAction r;
    r.refuse = true;
    actions.push_back(r);
  }
  for (int a = 0; a < pool_size; ++a) {
    for (int b = 0; b < pool_size; ++b) {
      for (int c = 0; c < pool_size; ++c) {
        if (a == b || a == c || b == c) continue;
        PolicyAction act;
        act.triple = {a, b, c};
        actions.push_back(act);
      }
    }
  }
  return actions;
}

double action_logprob(const Policy& p, const PolicyEnv& env, int ctx_index,
                      const PolicyAction& a) {
  check_policy_env(p, env);
  if (ctx_index < 0 || ctx_index >= static_cast<int>(env.contexts.size())) {
    throw std::invalid_argument("action_logprob: context index out of range");
  }
  check_action(a, static_cast<int>(env.cand_feats[static_cast<std::size_t>(ctx_index)].size()));
  return logprob_from_scores(scores(p, env, ctx_index), a);
}

void action_logprob_grad(const Policy& p, const PolicyEnv& env, int ctx_index,
                         const PolicyAction& a, double scale, double* acc) {
  const Zs zs = scores(p, env, ctx_index);
  std::vector<double> dz;
  double dzr = 0.0;
  dlogp_dz(zs, a, dz, dzr);
  chain_dz(p, env, ctx_index, dz, dzr, scale, acc);
}

Rollout sample_action(const Policy& p, const PolicyEnv& env, int ctx_index,
                      std::uint64_t seed) {
  const Zs zs = scores(p, env, ctx_index);
  const std::size_t n = zs.z.size();
  Rng rng(seed);
  Rollout r;
  r.context_index = ctx_index;
  if (rng.uniform() < sigmoid(zs.gate)) {
    r.action.refuse = true;
  } else {
    std::vector<char> remaining(n, 1);
    for (int t = 0; t < 3; ++t) {
      // Re-shift per step so the walk's total mass is always >= 1.
      const double ld = log_denom(zs.z, remaining);
      const double u = rng.uniform();
      double cum = 0.0;
      std::size_t pick = n;
      for (std::size_t j = 0; j < n; ++j) {
        if (remaining[j] == 0) continue;
        cum += std::exp(zs.z[j] - ld);
        if (u < cum) {
          pick = j;
          break;
        }
      }
      if (pick == n) {  // rounding left cum slightly below 1
        for (std::size_t j = n; j-- > 0;) {
          if (remaining[j] != 0) {
            pick = j;
            break;
          }
        }
      }
      remaining[pick] = 0;
      r.action.triple[static_cast<std::size_t>(t)] = static_cast<int>(pick);
    }
  }
  r.logprob_old = logprob_from_scores(zs, r.action);
  return r;
}

std::vector<Rollout> sample_group(const Policy& p, const PolicyEnv& env, int ctx_index,
                                  int group_size, std::uint64_t seed) {
  check_policy_env(p, env);
  if (ctx_index < 0 || ctx_index >= static_cast<int>(env.contexts.size())) {
    throw std::invalid_argument("sample_group: context index out of range");
  }
  if (group_size < 2) {
    throw std::invalid_argument("sample_group: group size must be >= 2");
  }
  std::vector<Rollout> out;
  out.reserve(static_cast<std::size_t>(group_size));
  for (int g = 0; g < group_size; ++g) {
    out.push_back(sample_action(p, env, ctx_index,
                                derive_stream(seed, 50, static_cast<std::uint64_t>(g))));
  }
  return out;
}

double exact_kl(const Policy& p, const Policy& q, const PolicyEnv& env, int ctx_index) {
  check_policy_env(p, env);
  check_policy_env(q, env);
  const Zs zp = scores(p, env, ctx_index);
  const Zs zq = scores(q, env, ctx_index);
  const auto actions = enumerate_actions(
      static_cast<int>(env.cand_feats[static_cast<std::size_t>(ctx_index)].size()), true);
  double kl = 0.0;
  for (const auto& a : actions) {
    const double lp = logprob_from_scores(zp, a);
    const double lq = logprob_from_scores(zq, a);
    kl += std::exp(lp) * (lp - lq);
  }
  return std::max(0.0, kl);  // clamp the tiny negative left by rounding
}

void exact_kl_grad(const Policy& p, const Policy& q, const PolicyEnv& env, int ctx_index,
                   double scale, double* acc) {
  const Zs zp = scores(p, env, ctx_index);
  const Zs zq = scores(q, env, ctx_index);
  const auto actions = enumerate_actions(
      static_cast<int>(env.cand_feats[static_cast<std::size_t>(ctx_index)].size()), true);
  std::vector<double> dz;
  double dzr = 0.0;
  // dKL/dtheta = sum_a pi(a) * dlogpi(a) * (logpi(a) - logq(a)); the other
  // terms cancel because sum_a dpi(a) = 0.
  for (const auto& a : actions) {
    const double lp = logprob_from_scores(zp, a);
    const double lq = logprob_from_scores(zq, a);
    const double w = std::exp(lp) * (lp - lq);
    if (w == 0.0) continue;
    dlogp_dz(zp, a, dz, dzr);
    chain_dz(p, env, ctx_index, dz, dzr, scale * w, acc);
  }
}

std::vector<double> group_advantages(const std::vector<double>& rewards) {
  if (rewards.size() < 2) {
    throw std::invalid_argument("group_advantages: need at least 2 rewards");
  }
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> adv(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    adv[i] = (rewards[i] - mean) / (sd + 1e-8);
  }
  return adv;
}

void GrpoConfig::validate() const {
  if (group_size < 2) throw std::invalid_argument("GrpoConfig: group_size must be >= 2");
  if (beta_kl < 0.0) throw std::invalid_argument("GrpoConfig: beta_kl must be >= 0");
  if (!(clip_ratio > 0.0)) throw std::invalid_argument("GrpoConfig: clip_ratio must be > 0");
  if (!(lr > 0.0)) throw std::invalid_argument("GrpoConfig: lr must be > 0");
  if (steps < 1) throw std::invalid_argument("GrpoConfig: steps must be >= 1");
  if (refresh_every < 1) throw std::invalid_argument("GrpoConfig: refresh_every must be >= 1");
}

SuggestionGroup action_group(const PolicyEnv& env, int ctx_index, const PolicyAction& a) {
  SuggestionGroup g;
  if (a.refuse) {
    g.is_refusal = true;
    return g;
  }
  const auto& pool = env.pool(ctx_index);
  check_action(a, static_cast<int>(pool.size()));
  for (int idx : a.triple) g.suggestions.push_back(pool[static_cast<std::size_t>(idx)]);
  return g;
}

GrpoStepStats grpo_step(Policy& p, const Policy& p_old, const Policy& anchor,
                        const PolicyEnv& env, std::vector<RolloutGroup>& groups,
                        const RewardFn& reward_fn, const GrpoConfig& cfg) {
  cfg.validate();
  check_policy_env(p, env);
  check_policy_env(p_old, env);
  check_policy_env(anchor, env);
  if (groups.empty()) throw std::invalid_argument("grpo_step: empty batch");
  if (!reward_fn) throw std::invalid_argument("grpo_step: null reward function");

  // Reward scoring is pure per contract; run per group with exception capture.
  parallel_guard(static_cast<std::int64_t>(groups.size()), cfg.parallel, [&](std::int64_t i) {
    auto& g = groups[static_cast<std::size_t>(i)];
    const auto& ctx = env.contexts[static_cast<std::size_t>(g.context_index)];
    for (auto& r : g.rollouts) r.reward = reward_fn(ctx, g.context_index, r.action);
  });
  // A non-finite reward must fail loudly here: NaN advantages would otherwise
  // fall through the clip gate (every comparison is false) and the step would
  // silently train on the KL term alone.
  for (const auto& g : groups) {
    for (const auto& r : g.rollouts) {
      if (!std::isfinite(r.reward.fused)) {
        throw std::runtime_error("grpo_step: non-finite reward at context " +
                                 std::to_string(g.context_index));
      }
    }
  }

  const std::size_t np = policy_param_count(p);
  std::int64_t n_roll = 0;
  for (const auto& g : groups) {
    if (g.rollouts.size() < 2) {
      throw std::invalid_argument("grpo_step: every group needs >= 2 rollouts");
    }
    n_roll += static_cast<std::int64_t>(g.rollouts.size());
  }
  const double inv_roll = 1.0 / static_cast<double>(n_roll);
  const double inv_ctx = 1.0 / static_cast<double>(groups.size());

  // One deterministic reduction carries the gradient and all stats:
  // [0, np) gradient; then fused sum, component sums, KL sum, clipped count.
  const std::size_t kFused = np;
  const std::size_t kComp = np + 1;
  const std::size_t kKl = kComp + static_cast<std::size_t>(kNumComponents);
  const std::size_t kClip = kKl + 1;
  const std::size_t width = kClip + 1;

  auto map = [&](std::int64_t i, double* acc) {
    const auto& g = groups[static_cast<std::size_t>(i)];
    std::vector<double> fused;
    fused.reserve(g.rollouts.size());
    for (const auto& r : g.rollouts) fused.push_back(r.reward.fused);
    std::vector<double> adv;
    if (cfg.standardize) {
      adv = group_advantages(fused);
    } else {
      adv = fused;
    }
    const Zs zs_new = scores(p, env, g.context_index);
    std::vector<double> dz;
    double dzr = 0.0;
    for (std::size_t k = 0; k < g.rollouts.size(); ++k) {
      const auto& r = g.rollouts[k];
      const double lp_new = logprob_from_scores(zs_new, r.action);
      const double ratio = std::exp(lp_new - r.logprob_old);
      const double a = adv[k];
      const bool active = (a >= 0.0 && ratio <= 1.0 + cfg.clip_ratio) ||
                          (a < 0.0 && ratio >= 1.0 - cfg.clip_ratio);
      if (active) {
        dlogp_dz(zs_new, r.action, dz, dzr);
        chain_dz(p, env, g.context_index, dz, dzr, ratio * a * inv_roll, acc);
      } else {
        acc[kClip] += 1.0;
      }
      acc[kFused] += r.reward.fused;
      const auto comps = r.reward.components();
      for (int c = 0; c < kNumComponents; ++c) {
        acc[kComp + static_cast<std::size_t>(c)] += comps[static_cast<std::size_t>(c)];
      }
    }
    if (cfg.beta_kl > 0.0) {
      acc[kKl] += exact_kl(p, anchor, env, g.context_index);
      exact_kl_grad(p, anchor, env, g.context_index, -cfg.beta_kl * inv_ctx, acc);
    }
  };
  const std::vector<double> sums =
      cfg.parallel ? par::block_sum_vec(static_cast<std::int64_t>(groups.size()), width, map)
                   : par::block_sum_vec_serial(static_cast<std::int64_t>(groups.size()),
                                               width, map);

  double norm_sq = 0.0;
  for (std::size_t j = 0; j < np; ++j) norm_sq += sums[j] * sums[j];
  if (!std::isfinite(norm_sq)) {
    throw std::runtime_error("grpo_step: non-finite gradient (|batch| = " +
                             std::to_string(groups.size()) + ")");
  }

  std::vector<double> flat = policy_params(p);
  for (std::size_t j = 0; j < np; ++j) flat[j] += cfg.lr * sums[j];
  set_policy_params(p, flat);

  GrpoStepStats st;
  st.grad_norm = std::sqrt(norm_sq);
  st.mean_fused = sums[kFused] * inv_roll;
  for (int c = 0; c < kNumComponents; ++c) {
    st.mean_components[static_cast<std::size_t>(c)] =
        sums[kComp + static_cast<std::size_t>(c)] * inv_roll;
  }
  st.mean_kl = sums[kKl] * inv_ctx;
  st.clip_fraction = sums[kClip] * inv_roll;
  return st;
}

GrpoTrainResult grpo_train(const PolicyEnv& env, Policy p0, const RewardFn& reward_fn,
                           const GrpoConfig& cfg, const Policy* sft_ref) {
  cfg.validate();
  check_policy_env(p0, env);
  if (env.contexts.empty()) throw std::invalid_argument("grpo_train: empty context set");
  if (cfg.anchor == GrpoConfig::Anchor::sft_reference && sft_ref == nullptr) {
    throw std::invalid_argument("grpo_train: sft_reference anchor requires a reference policy");
  }

  GrpoTrainResult res;
  res.policy = std::move(p0);
  Policy rollout_policy = res.policy;
  const auto n_ctx = static_cast<std::int64_t>(env.contexts.size());

  for (int step = 0; step < cfg.steps; ++step) {
    if (step % cfg.refresh_every == 0) rollout_policy = res.policy;

    std::vector<RolloutGroup> groups(static_cast<std::size_t>(n_ctx));
    parallel_guard(n_ctx, cfg.parallel, [&](std::int64_t i) {
      auto& g = groups[static_cast<std::size_t>(i)];
      g.context_index = static_cast<int>(i);
      g.rollouts = sample_group(
          rollout_policy, env, static_cast<int>(i), cfg.group_size,
          derive_stream(cfg.seed, 60, static_cast<std::uint64_t>(step),
                        static_cast<std::uint64_t>(env.contexts[static_cast<std::size_t>(i)].id)));
    });

    const Policy& anchor =
        cfg.anchor == GrpoConfig::Anchor::old_policy ? rollout_policy : *sft_ref;
    try {
      const GrpoStepStats st =
          grpo_step(res.policy, rollout_policy, anchor, env, groups, reward_fn, cfg);
      res.trace.push_back({step, st});
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("grpo_train: step " + std::to_string(step) + ": " + e.what());
    }
  }
  return res;
}

std::string grpo_trace_csv(const std::vector<GrpoStepTrace>& trace) {
  std::ostringstream out;
  out << "step,fused";
  for (const char* name : kComponentNames) out << "," << name;
  out << ",kl,clip_fraction,grad_norm\n";
  out.precision(10);
  for (const auto& t : trace) {
    out << t.step << "," << t.stats.mean_fused;
    for (double c : t.stats.mean_components) out << "," << c;
    out << "," << t.stats.mean_kl << "," << t.stats.clip_fraction << ","
        << t.stats.grad_norm << "\n";
  }
  return out.str();
}

SftFitResult sft_fit(const PolicyEnv& env, Policy p, const std::vector<SftExample>& data,
                     int epochs, double lr, std::uint64_t seed) {
  check_policy_env(p, env);
  if (epochs < 0) throw std::invalid_argument("sft_fit: epochs must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("sft_fit: lr must be > 0");
  for (const auto& ex : data) {
    if (ex.context_id < 0 || ex.context_id >= static_cast<int>(env.contexts.size())) {
      throw std::invalid_argument("sft_fit: context id out of range");
    }
    PolicyAction a;
    a.triple = ex.triple;
    check_action(a, static_cast<int>(env.cand_feats[static_cast<std::size_t>(ex.context_id)].size()));
  }

  SftFitResult res;
  res.policy = std::move(p);
  if (data.empty()) return res;

  const std::size_t np = policy_param_count(res.policy);
  constexpr std::size_t kBatch = 64;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  auto mean_target_logprob = [&]() {
    const double total =
        par::block_sum(static_cast<std::int64_t>(data.size()), [&](std::int64_t i) {
          const auto& ex = data[static_cast<std::size_t>(i)];
          PolicyAction a;
          a.triple = ex.triple;
          return action_logprob(res.policy, env, ex.context_id, a);
        });
    return total / static_cast<double>(data.size());
  };

  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng shuffle_rng(derive_stream(seed, 70, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += kBatch) {
      const std::size_t stop = std::min(order.size(), start + kBatch);
      std::vector<double> grad(np, 0.0);
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (std::size_t i = start; i < stop; ++i) {
        const auto& ex = data[order[i]];
        PolicyAction a;
        a.triple = ex.triple;
        action_logprob_grad(res.policy, env, ex.context_id, a, inv, grad.data());
      }
      double norm_sq = 0.0;
      for (double g : grad) norm_sq += g * g;
      if (!std::isfinite(norm_sq)) {
        throw std::runtime_error("sft_fit: non-finite gradient at epoch " +
                                 std::to_string(epoch));
      }
      std::vector<double> flat = policy_params(res.policy);
      for (std::size_t j = 0; j < np; ++j) flat[j] += lr * grad[j];
      set_policy_params(res.policy, flat);
    }
    res.epoch_logprob.push_back(mean_target_logprob());
  }
  return res;
}

RftResult rft_round(const PolicyEnv& env, Policy p, const Scorer& rm, int k,
                    const DedupeConfig& dedupe, int sft_epochs, double sft_lr,
                    std::uint64_t seed) {
  check_policy_env(p, env);
  if (rm.cfg.head == HeadKind::pair_logit) {
    throw std::invalid_argument("rft_round: pair head cannot score single candidates");
  }
  if (k < 3) throw std::invalid_argument("rft_round: k must be >= 3");

  const auto n_ctx = static_cast<std::int64_t>(env.contexts.size());
  std::vector<std::vector<SftExample>> per_ctx(static_cast<std::size_t>(n_ctx));
  std::vector<std::int64_t> dropped(static_cast<std::size_t>(n_ctx), 0);

  parallel_guard(n_ctx, true, [&](std::int64_t i) {
    const auto ci = static_cast<int>(i);
    const auto& ctx = env.contexts[static_cast<std::size_t>(i)];
    const auto& pool = env.pool(ci);
    const auto& feats = env.cand_feats[static_cast<std::size_t>(i)];
    const Zs zs = scores(p, env, ci);

    // k draws from the first-pick marginal (refuse excluded), then score
    // each distinct candidate once.
    std::vector<char> sampled(pool.size(), 0);
    for (int t = 0; t < k; ++t) {
      Rng rng(derive_stream(seed, 80, static_cast<std::uint64_t>(ctx.id),
                            static_cast<std::uint64_t>(t)));
      const double u = rng.uniform() * zs.sc;
      double cum = 0.0;
      std::size_t pick = pool.size() - 1;
      for (std::size_t j = 0; j < pool.size(); ++j) {
        cum += zs.ec[j];
        if (u < cum) {
          pick = j;
          break;
        }
      }
      sampled[pick] = 1;
    }

    struct Cand {
      int idx;
      double score;
    };
    std::vector<Cand> cands;
    for (std::size_t j = 0; j < pool.size(); ++j) {
      if (sampled[j] == 0) continue;
      const double score = rm.cfg.head == HeadKind::gaussian
                               ? garm_score(rm, feats[j]).mu
                               : btrm_score(rm, feats[j]);
      cands.push_back({static_cast<int>(j), score});
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.idx < b.idx;
    });

    // Greedy dedupe in score order: a candidate too close to any kept one
    // loses to its higher-scored twin.
    std::vector<int> kept;
    for (const auto& c : cands) {
      bool dup = false;
      for (int kc : kept) {
        if (jaccard1(pool[static_cast<std::size_t>(c.idx)].text,
                     pool[static_cast<std::size_t>(kc)].text) > dedupe.jaccard_max) {
          dup = true;
          break;
        }
      }
      if (!dup) kept.push_back(c.idx);
      if (kept.size() == 3) break;
    }
    if (kept.size() < 3) {
      dropped[static_cast<std::size_t>(i)] = 1;
      return;
    }
    SftExample ex;
    ex.context_id = ctx.id;
    ex.triple = {kept[0], kept[1], kept[2]};
    per_ctx[static_cast<std::size_t>(i)].push_back(ex);
  });

  RftResult res;
  for (std::int64_t i = 0; i < n_ctx; ++i) {
    res.dropped_contexts += dropped[static_cast<std::size_t>(i)];
    for (const auto& ex : per_ctx[static_cast<std::size_t>(i)]) res.dataset.push_back(ex);
  }
  SftFitResult fit = sft_fit(env, std::move(p), res.dataset, sft_epochs, sft_lr,
                             derive_stream(seed, 81));
  res.policy = std::move(fit.policy);
  res.epoch_logprob = std::move(fit.epoch_logprob);
  return res;
}

}  // namespace qs
