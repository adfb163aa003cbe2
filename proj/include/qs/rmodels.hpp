#pragma once
// Learned preference scorers.  One small tanh MLP body with three heads:
//   scalar    — score s(x); pairs trained on -log sigmoid(s_w - s_l)
//   pair_logit— g(ctx, x1, x2) read over both candidates at once; the
//               preference probability sigmoid(g(c,x1,x2) - g(c,x2,x1)) is
//               antisymmetric by construction
//   gaussian  — (mu, sigma) with sigma = softplus(raw) + 1e-3, trained on
//               the closed-form probit-approximate preference likelihood
//               plus an additive variance penalty
//               lambda * (sigma_w^2 - 2 ln sigma_w + sigma_l^2 - 2 ln sigma_l)
// Batch losses/gradients use the deterministic block reduction, so training
// is bit-identical across thread counts; every gradient has a
// finite-difference test.

#include <cstdint>
#include <string>
#include <vector>

#include "qs/features.hpp"
#include "qs/probcore.hpp"
#include "qs/types.hpp"
#include "qs/world.hpp"

namespace qs {

enum class HeadKind : std::uint8_t { scalar, pair_logit, gaussian };

const char* head_name(HeadKind k);
HeadKind head_from_name(const std::string& name);

struct ScorerConfig {
  int input_dim = 64;  // featurizer dim; the pair head uses ctx + 2 * this
  int hidden1 = 32;
  int hidden2 = 32;
  HeadKind head = HeadKind::scalar;

  int output_dim() const { return head == HeadKind::gaussian ? 2 : 1; }
  std::size_t param_count() const;
  void validate() const;  // throws std::invalid_argument
};

// Flat parameter vector: W1 (h1 x in, row-major), b1, W2 (h2 x h1), b2,
// W3 (out x h2), b3.  The flat layout keeps Adam, clipping, checkpoints and
// finite-difference checks trivial.
struct Scorer {
  ScorerConfig cfg;
  std::vector<double> params;
};

// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases;
// deterministic in (cfg, seed).
Scorer make_scorer(const ScorerConfig& cfg, std::uint64_t seed);

// out must hold cfg.output_dim() doubles; x must hold cfg.input_dim (the
// pair head's effective input, see pairedrm_prob, is handled by callers).
void scorer_forward(const ScorerConfig& cfg, const std::vector<double>& params,
                    const double* x, double* out);

double btrm_score(const Scorer& s, const std::vector<double>& x);
GaussianScore garm_score(const Scorer& s, const std::vector<double>& x);

// sigmoid(g(c,f1,f2) - g(c,f2,f1)); the scorer's input_dim must equal
// ctx_block.size() + f1.size() + f2.size().
double pairedrm_prob(const Scorer& s, const std::vector<double>& ctx_block,
                     const std::vector<double>& f1, const std::vector<double>& f2);

// One featurized preference pair.  ctx_block is consumed only by the pair
// head; the other heads read the context block embedded in the features.
struct PrefPair {
  std::vector<double> chosen;
  std::vector<double> rejected;
  std::vector<double> ctx_block;
};

// Joins curated triplets with their contexts (indexed by context_id).
std::vector<PrefPair> featurize_triplets(const std::vector<Context>& contexts,
                                         const std::vector<PreferenceTriplet>& triplets,
                                         const FeaturizerConfig& fc);

// Pointwise losses, exposed for closed-form expectations in tests.
double btrm_pair_loss(double s_w, double s_l);
double garm_pair_loss(double mu_w, double sigma_w, double mu_l, double sigma_l,
                      double lambda);

// Mean batch loss; when grad != nullptr it receives the mean gradient
// (resized to param_count).  `parallel` = false runs the serial reference
// path with the identical block layout, so results match bitwise.
double btrm_loss_grad(const ScorerConfig& cfg, const std::vector<double>& params,
                      const std::vector<PrefPair>& batch, std::vector<double>* grad,
                      bool parallel = true);
double pairedrm_loss_grad(const ScorerConfig& cfg, const std::vector<double>& params,
                          const std::vector<PrefPair>& batch, std::vector<double>* grad,
                          bool parallel = true);
double garm_loss_grad(const ScorerConfig& cfg, const std::vector<double>& params,
                      const std::vector<PrefPair>& batch, double lambda,
                      std::vector<double>* grad, bool parallel = true);

struct TrainConfig {
  int epochs = 6;
  int batch_size = 512;
  double lr = 1e-3;
  double beta1 = 0.99;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;  // global-norm clip applied before Adam
  double lambda = 0.01;    // gaussian head variance penalty
  std::uint64_t seed = 1;
  bool parallel = true;
};

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  double grad_norm = 0.0;  // pre-clip norm of the epoch's last batch
};

struct TrainResult {
  std::vector<EpochStats> epochs;
  double final_loss = 0.0;
};

// Adam over shuffled mini-batches (deterministic shuffle per epoch); the
// loss is picked by s.cfg.head.  Throws std::runtime_error if the loss or
// gradient goes non-finite.
TrainResult train_scorer(Scorer& s, const std::vector<PrefPair>& data,
                         const TrainConfig& tc);

// Held-out accuracy: chosen strictly ahead counts 1, exact ties 0.5.
double rm_accuracy(const Scorer& s, const std::vector<PrefPair>& data);

}  // namespace qs
