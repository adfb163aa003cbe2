#pragma once
// Evaluation harness: simulated clicked-group rate with binomial error bars,
// reward-model accuracy tables across shifted datasets, pairwise-confidence
// calibration bins, a usefulness-count comparison between two serving
// policies, and deterministic CSV reporting.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "qs/grpo.hpp"
#include "qs/rmodels.hpp"
#include "qs/world.hpp"

namespace qs {

struct CtrEstimate {
  double ctr = 0.0;
  double se = 0.0;  // binomial standard error sqrt(ctr (1 - ctr) / n)
  std::int64_t clicks = 0;
  std::int64_t impressions = 0;
};

// Monte-Carlo clicked-group rate under the world's click model.  Impressions
// cycle through the env's contexts round-robin; each impression samples one
// action from the policy.  Refusals count as impressions that cannot be
// clicked.  Deterministic in seed at any thread count.
CtrEstimate ctr_estimate(const Policy& p, const PolicyEnv& env, std::int64_t n_impressions,
                         std::uint64_t seed, bool parallel = true);

// Exact expected clicked-group rate: enumerates every action per context and
// weights the scan tree's click probability by the action's probability.
double ctr_exact(const Policy& p, const PolicyEnv& env, bool parallel = true);

struct CalibrationBin {
  double lower = 0.0;
  double upper = 0.0;
  std::int64_t count = 0;
  double accuracy = 0.0;  // in [0, 1] when count > 0
};

// Confidence calibration for a gaussian-head scorer.  Each pair's confidence
// is the uncertainty lower bound of its two predicted score distributions;
// bins are equal-width over the observed confidence range, and bins holding
// fewer than min_count pairs are merged into their right neighbor (a small
// trailing remainder merges left).  A pair counts as accurate when the model
// ranks the chosen side strictly higher (exact ties count half).
std::vector<CalibrationBin> calibration_bins(const Scorer& s,
                                             const std::vector<PrefPair>& data, int n_bins,
                                             std::int64_t min_count = 50,
                                             bool parallel = true);

// Spearman rank correlation with average ranks on ties.  Throws
// std::invalid_argument on size mismatch, fewer than 2 points, or an input
// with zero rank variance.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// Sum over contexts of (useful_a - useful_b), where useful counts the
// group's suggestions whose true utility clears the threshold (refusal
// groups count 0).  Group lists must align with the context list.
std::int64_t gsb_proxy(const World& w, const std::vector<Context>& contexts,
                       const std::vector<SuggestionGroup>& groups_a,
                       const std::vector<SuggestionGroup>& groups_b,
                       double useful_threshold);

// Linear-interpolation quantile (q in [0, 1]) of true utility over every
// (context, candidate) pair in the world; anchors the usefulness threshold
// without world-specific constants.
double utility_quantile(const World& w, double q);

struct OodRow {
  std::string dataset;
  double accuracy = 0.0;
  double mean_ulb = 0.0;  // only meaningful when has_ulb
  bool has_ulb = false;
  std::int64_t n = 0;
};

// One accuracy per named dataset, in registration order.  Gaussian heads
// also report the mean pairwise confidence (uncertainty lower bound).
std::vector<OodRow> ood_eval(const Scorer& s,
                             const std::vector<std::pair<std::string, std::vector<PrefPair>>>&
                                 datasets,
                             bool parallel = true);

struct CtrRow {
  std::string policy;
  std::uint64_t seed = 0;
  CtrEstimate est;
};

struct AccuracyRow {
  std::string dataset;
  std::uint64_t seed = 0;
  OodRow row;
};

struct CalibrationRow {
  std::uint64_t seed = 0;
  int bin_index = 0;
  CalibrationBin bin;
};

struct GsbRow {
  std::string comparison;
  std::uint64_t seed = 0;
  std::int64_t gsb = 0;
  std::int64_t n_contexts = 0;
};

struct EvalReport {
  std::vector<std::uint64_t> seeds;
  std::string config_fingerprint;
  std::vector<CtrRow> ctr;
  std::vector<AccuracyRow> accuracy;
  std::vector<CalibrationRow> calibration;
  std::vector<GsbRow> gsb;
};

// Decimal formatting used by every CSV emitter: 6 significant digits.
std::string format_sig(double v);

// Writes ctr.csv, rm_accuracy.csv, calibration.csv, gsb.csv, and summary.txt
// into out_dir (created if missing).  Stable column order and formatting:
// the same report produces byte-identical files.  I/O failures throw
// std::runtime_error naming the path.
void write_report(const EvalReport& rep, const std::string& out_dir);

}  // namespace qs
