#pragma once
// Triple-selection policy and its optimization.
//
// The policy is a linear scorer over (context, candidate) features that
// selects an ordered triple by sequential softmax choice without
// replacement (Plackett-Luce), plus one atomic "refuse" action whose score
// competes in the same softmax base.  Action log-probabilities are exact,
// the action set is small enough to enumerate, and the KL between two
// policies on a context is computed exactly — which makes every training
// contract (no-op conditions, gradient checks, normalization) testable.
//
// Training ops: group-relative policy optimization (sample G rollouts per
// context, standardize rewards within the group, ascend a ratio-clipped
// surrogate minus beta * KL to an anchor policy), supervised fitting of
// target triples, and rejection fine-tuning rounds (sample k candidates,
// score with a reward model, dedupe, keep the top 3, refit).

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qs/features.hpp"
#include "qs/rmodels.hpp"
#include "qs/textrewards.hpp"
#include "qs/types.hpp"
#include "qs/world.hpp"

namespace qs {

struct Policy {
  std::vector<double> select_w;  // over featurize() coordinates
  std::vector<double> refuse_w;  // over the context feature block
  double refuse_b = -3.0;
  double temperature = 1.0;
};

// Zero-weight policy: uniform over ordered triples with a small refuse mass
// (exp(refuse_b) against pool_size unit scores).
Policy make_policy(const FeaturizerConfig& fc);

// Learnable parameters as one flat vector: select_w ++ refuse_w ++ refuse_b.
// Temperature is a fixed hyperparameter, not a learned weight.
std::size_t policy_param_count(const Policy& p);
std::vector<double> policy_params(const Policy& p);
void set_policy_params(Policy& p, const std::vector<double>& flat);

struct PolicyAction {
  bool refuse = false;
  std::array<int, 3> triple{{-1, -1, -1}};  // pool indices, served order
};

struct Rollout {
  int context_index = 0;  // index into the PolicyEnv context list
  PolicyAction action;
  double logprob_old = 0.0;
  RewardVector reward;
};

struct RolloutGroup {
  int context_index = 0;
  std::vector<Rollout> rollouts;
};

// Read-only view shared by all policy operations: contexts (possibly a
// shifted variant of the world's), their pools, and precomputed candidate
// features.  Pools are taken from world.pools[contexts[i].id].
struct PolicyEnv {
  const World* world = nullptr;
  std::vector<Context> contexts;
  std::vector<std::vector<std::vector<double>>> cand_feats;  // [ctx][cand][dim]

  const std::vector<Suggestion>& pool(int ctx_index) const {
    return world->pools[static_cast<std::size_t>(
        contexts[static_cast<std::size_t>(ctx_index)].id)];
  }
};

PolicyEnv make_policy_env(const World& w, std::vector<Context> contexts);

// All actions for a pool: refuse (unless excluded) plus every ordered triple
// of distinct indices.  Pool size must be >= 3.
std::vector<PolicyAction> enumerate_actions(int pool_size, bool include_refuse = true);

// Exact log-probability of an action; throws std::invalid_argument for
// out-of-range or repeated indices.
double action_logprob(const Policy& p, const PolicyEnv& env, int ctx_index,
                      const PolicyAction& a);

// Adds scale * d(logprob)/d(params) into acc (policy_param_count wide).
void action_logprob_grad(const Policy& p, const PolicyEnv& env, int ctx_index,
                         const PolicyAction& a, double scale, double* acc);

// One exact sample with its log-probability; deterministic in seed.
Rollout sample_action(const Policy& p, const PolicyEnv& env, int ctx_index,
                      std::uint64_t seed);

// G independent rollouts for one context.
std::vector<Rollout> sample_group(const Policy& p, const PolicyEnv& env, int ctx_index,
                                  int group_size, std::uint64_t seed);

// Exact KL(p || q) on one context's action set; >= 0, 0 iff the action
// distributions coincide.
double exact_kl(const Policy& p, const Policy& q, const PolicyEnv& env, int ctx_index);

// Adds scale * d KL(p || q) / d(p params) into acc.
void exact_kl_grad(const Policy& p, const Policy& q, const PolicyEnv& env, int ctx_index,
                   double scale, double* acc);

// Standardized within-group advantages (r - mean) / (std + 1e-8); all zeros
// when the rewards are constant.  Throws on fewer than 2 entries.
std::vector<double> group_advantages(const std::vector<double>& rewards);

struct GrpoConfig {
  int group_size = 10;
  double beta_kl = 0.1;
  double clip_ratio = 0.2;  // set to infinity to disable clipping
  double lr = 0.05;
  int steps = 200;
  int refresh_every = 4;  // sync the rollout policy every this many steps
  bool standardize = true;  // false trains on raw group rewards
  enum class Anchor : std::uint8_t { old_policy, sft_reference } anchor = Anchor::old_policy;
  std::uint64_t seed = 0;
  bool parallel = true;
  void validate() const;  // throws std::invalid_argument
};

// Builds the suggestion group an action denotes (used by reward functions
// and evaluation): either the refusal group or the three pool members.
SuggestionGroup action_group(const PolicyEnv& env, int ctx_index, const PolicyAction& a);

// Pure function of (context, action); called concurrently across contexts.
using RewardFn = std::function<RewardVector(const Context& ctx, int ctx_index,
                                            const PolicyAction& a)>;

struct GrpoStepStats {
  double mean_fused = 0.0;
  std::array<double, kNumComponents> mean_components{};
  double mean_kl = 0.0;       // exact KL to the anchor, averaged over contexts
  double clip_fraction = 0.0;  // rollouts whose surrogate branch saturated
  double grad_norm = 0.0;
};

// One ascent step on the clipped surrogate minus beta_kl * KL(p || anchor).
// Fills rollout rewards via reward_fn, standardizes advantages per group
// (or uses raw rewards), and updates p in place.  Throws std::runtime_error
// on non-finite rewards or gradients.
GrpoStepStats grpo_step(Policy& p, const Policy& p_old, const Policy& anchor,
                        const PolicyEnv& env, std::vector<RolloutGroup>& groups,
                        const RewardFn& reward_fn, const GrpoConfig& cfg);

struct GrpoStepTrace {
  int step = 0;
  GrpoStepStats stats;
};

struct GrpoTrainResult {
  Policy policy;
  std::vector<GrpoStepTrace> trace;
};

// Full training loop: per step, sample group_size rollouts for every env
// context from the rollout policy (refreshed every refresh_every steps),
// then take one grpo_step.  sft_ref must be non-null when cfg.anchor is
// sft_reference.  Bit-for-bit reproducible given cfg.seed.
GrpoTrainResult grpo_train(const PolicyEnv& env, Policy p0, const RewardFn& reward_fn,
                           const GrpoConfig& cfg, const Policy* sft_ref = nullptr);

// Per-step trace as CSV (step, fused, each component, kl, clip fraction,
// gradient norm).
std::string grpo_trace_csv(const std::vector<GrpoStepTrace>& trace);

struct SftFitResult {
  Policy policy;
  std::vector<double> epoch_logprob;  // mean target logprob after each epoch
};

// Gradient ascent on the mean log-probability of target triples.
SftFitResult sft_fit(const PolicyEnv& env, Policy p, const std::vector<SftExample>& data,
                     int epochs, double lr, std::uint64_t seed);

struct RftResult {
  std::vector<SftExample> dataset;
  std::int64_t dropped_contexts = 0;
  Policy policy;
  std::vector<double> epoch_logprob;
};

// One rejection fine-tuning round: sample k candidates per context from the
// policy's first-pick marginal, score them with the reward model (scalar
// score or gaussian mean; the pair head cannot score single candidates and
// is rejected), sort descending, greedily drop near-duplicates (1-gram
// Jaccard above dedupe.jaccard_max loses to the higher-scored twin), keep
// the top 3 as a supervised triple, and refit the policy on the dataset.
RftResult rft_round(const PolicyEnv& env, Policy p, const Scorer& rm, int k,
                    const DedupeConfig& dedupe, int sft_epochs, double sft_lr,
                    std::uint64_t seed);

}  // namespace qs
