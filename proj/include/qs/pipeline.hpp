#pragma once
// End-to-end orchestration: one RunConfig drives the whole chain
//
//   simulate -> curate -> train-rm -> fuse -> train-rl -> rft -> report
//
// Each command reads its inputs from cfg.out_dir, writes deterministic
// artifacts back into it, and can be re-run idempotently (identical inputs
// give byte-identical outputs).  Every random quantity derives from
// cfg.seed through named streams, so the single seed reproduces the full
// artifact tree.
//
// Stream allocation (derive_stream ids under cfg.seed): 100/101 base and
// shifted click logs, 110+ reward-model training, 120/121 fusion fit and
// tuning probes, 130 supervised policy fit, 131 policy optimization, 140
// rejection fine-tuning, 150 policy-shift test serving, 160..169 evaluation.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "qs/evalkit.hpp"
#include "qs/fusion.hpp"
#include "qs/grpo.hpp"
#include "qs/io.hpp"
#include "qs/rmodels.hpp"
#include "qs/textrewards.hpp"
#include "qs/world.hpp"

namespace qs {

struct SimulateConfig {
  std::int64_t impressions = 60000;        // base serving log size
  int shift_week = 4;                      // temporal-drift test week
  std::int64_t shift_impressions = 20000;  // drifted serving log size
  double test_fraction = 0.2;              // held-out share of curated pairs
};

struct RmStageConfig {
  int hidden1 = 32;
  int hidden2 = 32;
  TrainConfig train;  // lambda applies to the gaussian head only
};

struct FusionStageConfig {
  double lambda_l2 = 1e-3;       // L2 strength of the logistic fit
  double format_weight = 0.5;    // group-level components keep config
  double diversity_weight = 0.3; // weights: their per-pair deltas are zero
  double safety_weight = 1.0;    // by construction, so the fit cannot see them
  // The reference-fluency term also keeps its config weight: both sides of a
  // click pair come from one pool written by one generator, so its per-pair
  // delta carries no click signal and the fit returns regularization noise.
  // Its job is keeping the policy on-distribution, not predicting clicks.
  double ppl_weight = 0.4;
  bool pareto = true;            // run the probe-based tuning stage
  ParetoConfig pareto_cfg;
  int probe_group_size = 6;      // rollouts per context in tuning probes
  double probe_beta_kl = 0.05;
};

struct SftStageConfig {
  // The supervised proxy is deliberately a modest baseline (short fit):
  // it anchors the optimization story the way a production starting point
  // would, leaving the headroom the policy stage is meant to claim.
  int epochs = 2;
  double lr = 0.2;
  DedupeConfig dedupe;  // candidate-group assembly thresholds
};

struct RftStageConfig {
  int k = 12;  // candidates sampled per context
  int sft_epochs = 30;
  double sft_lr = 0.2;
  DedupeConfig dedupe;
};

struct EvalStageConfig {
  int n_seeds = 3;                              // independent evaluation replicas
  std::int64_t ctr_impressions = 20000;         // per policy per seed
  int calibration_bins = 8;
  int calibration_min_count = 100;
  double gsb_quantile = 0.6;                    // usefulness threshold anchor
  std::int64_t policy_shift_impressions = 20000;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "run";
  int threads = 0;  // 0 keeps the library default
  WorldConfig world;
  SimulateConfig simulate;
  RmStageConfig rm;
  FusionStageConfig fusion;
  SftStageConfig sft;
  GrpoConfig grpo;
  RftStageConfig rft;
  EvalStageConfig eval;

  void validate() const;  // throws ConfigError on out-of-range values
};

RunConfig default_run_config();

// Strict schema application: consumes "section.key" entries produced by
// parse_config_text, throws ConfigError on unknown keys (naming them),
// malformed values, or out-of-range settings.
RunConfig run_config_from_map(const std::map<std::string, std::string>& kv);
RunConfig load_run_config(const std::string& path);

// Canonical key = value rendering of a RunConfig; reparsing it reproduces
// the config exactly, and its fingerprint stamps evaluation reports.
std::string run_config_text(const RunConfig& cfg);

// Identity of the candidate pools a policy was trained against.
std::string world_pool_fingerprint(const World& w);

// Serves n suggestion triples sampled from `policy` on env's contexts
// (round-robin) and records the simulated click outcome.  Refusals are
// resampled — a refusal shows nothing, so it leaves no click log — with a
// deterministic bounded retry; `label` fills the serving_policy field.
std::vector<ClickLogRecord> simulate_policy_logs(const World& w, const PolicyEnv& env,
                                                 const Policy& policy, std::int64_t n,
                                                 std::uint64_t seed,
                                                 const std::string& label);

// Preference test set whose suggestions come from alt_policy instead of the
// base serving policy: serve n impressions from alt_policy on the world's
// own contexts, then curate clicks exactly like the base pipeline.  The
// distribution-shift analog for reward-model stress tests.
std::vector<PreferenceTriplet> policy_shift(const World& w, const PolicyEnv& env,
                                            const Policy& alt_policy, std::int64_t n,
                                            std::uint64_t seed);

// Composite reward over policy actions: rule components from the suggestion
// texts, rm / rm_sigma from the scorer (gaussian mean and spread, or a
// scalar score with zero spread), ppl from the reference model.  rm and ref
// may be null (those components read zero).  Pure and thread-safe.
RewardFn make_fused_reward(const PolicyEnv& env, const FusionWeights& w,
                           const Scorer* rm, const ReferenceModel* ref);

// Supervised triples ranked by ground-truth utility (the simulator stands in
// for the teacher model) with near-duplicate candidates removed.
SftAssembly assemble_teacher_sft(const World& w, const DedupeConfig& dedupe);

// ------------------------------------------------------------- commands
// All commands create cfg.out_dir as needed, read their inputs from it, and
// throw ConfigError / DataError / NumericError (io.hpp) on failure.

void cmd_simulate(const RunConfig& cfg);
void cmd_curate(const RunConfig& cfg);
void cmd_train_rm(const RunConfig& cfg, HeadKind head);
void cmd_fuse(const RunConfig& cfg);
void cmd_train_rl(const RunConfig& cfg);
void cmd_rft(const RunConfig& cfg);
void cmd_report(const RunConfig& cfg);

// The full chain in order, training the gaussian-head reward model.
void run_all(const RunConfig& cfg);

}  // namespace qs
