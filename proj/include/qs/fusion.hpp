#pragma once
// Two-stage fusion of reward components.
//
// Stage 1 (fit_fusion_weights): convex logistic regression on per-pair
// component deltas — minimizes  -mean log sigmoid(w . delta) + lambda * |w|^2
// to a gradient norm of 1e-6 (damped Newton; the problem has at most a
// handful of dimensions, so second-order steps make the tolerance cheap).
//
// Stage 2 (pareto_tune): mechanized weight refinement.  Each round runs a
// short probe training, fits a least-squares slope per component over the
// trailing window, multiplies the weight of any decreasing component by
// alpha_up, and multiplies by alpha_down the weight of any component that
// contributes more than dominance_share of the total fused improvement.
// Multiplicative updates never flip weight signs.  Stops when every slope
// is >= -trend_epsilon, checked before any update, so an already-balanced
// start returns unchanged.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qs/textrewards.hpp"

namespace qs {

inline constexpr double kFusionGradTol = 1e-6;

struct FusionFitResult {
  FusionWeights weights;
  int iters = 0;
  double grad_norm = 0.0;
  double loss = 0.0;
  bool converged = false;
};

// deltas[i] = reward-component vector of (chosen - rejected) for one
// preference pair; all rows must share one dimension.  `lr` caps the initial
// Newton step scale, `epochs` the iteration count; `seed` draws the starting
// point, and convexity sends every start to the same optimum.
FusionFitResult fit_fusion_weights(const std::vector<std::vector<double>>& deltas,
                                   double lambda_l2, double lr = 1.0, int epochs = 200,
                                   std::uint64_t seed = 0);

double fusion_fit_loss(const std::vector<std::vector<double>>& deltas,
                       const std::vector<double>& w, double lambda_l2);

struct ParetoConfig {
  int probe_steps = 60;        // steps each probe run must report
  int window = 50;             // trailing steps used for the trend fit
  double alpha_up = 1.5;       // factor for decreasing components
  double alpha_down = 0.75;    // factor for dominating components
  double dominance_share = 0.6;
  int max_rounds = 10;
  double trend_epsilon = 1e-3;  // slope >= -epsilon counts as non-decreasing
  void validate() const;        // throws std::invalid_argument
};

// probe(weights, round) returns a per-step series of component values,
// series[step][component], with at least 2 steps and one column per weight.
using ProbeFn = std::function<std::vector<std::vector<double>>(const FusionWeights&, int)>;

struct ParetoRound {
  int round = 0;
  std::vector<double> slopes;          // per component, over the window
  std::vector<double> weights_after;   // weights leaving this round
  bool all_nonnegative = false;        // convergence test result
};

struct ParetoResult {
  FusionWeights weights;
  bool converged = false;
  int rounds = 0;  // probe rounds actually run
  std::vector<ParetoRound> log;
};

// Probe exceptions are rethrown annotated with the failing round index.
ParetoResult pareto_tune(const FusionWeights& w0, const ProbeFn& probe,
                         const ParetoConfig& cfg);

// Round-by-round tuning log with one row per round and one slope/weight
// column pair per component.
std::string pareto_log_csv(const ParetoResult& res);

// Least-squares slope of y against step index 0..n-1 (used for the trend
// statistic; exposed for tests).
double ls_slope(const std::vector<double>& y);

// Deterministic two-component trade-off environment for exercising the
// tuner: component growth rates are coupled so that raising one weight
// drags the other component down, with a balanced region where both grow.
// Component 1 drifts at rate (w1 - 0.5 w2), component 2 at (w2 - 0.5 w1),
// scaled by eta per step.
ProbeFn toy_tradeoff_probe(double eta = 0.02);

}  // namespace qs
