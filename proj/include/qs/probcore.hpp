#pragma once
// Gaussian preference arithmetic.
//
// A scored suggestion is modeled as N(mu, sigma^2).  The probability that
// suggestion w beats suggestion l has the closed form
//
//     P(w > l) = sigmoid( (mu_w - mu_l) / sqrt(1 + (pi/8)(sw^2 + sl^2)) )
//
// via the probit approximation sigmoid(x) ~ Phi(x * sqrt(pi/8)) (the
// sqrt(pi/8) factor matches the derivatives at 0).  A Monte Carlo estimator
// of the same integral is kept as an independent cross-check and as the
// parallel kernel showcased in the benchmark.  Distribution overlap is
// measured with the Bhattacharyya coefficient/distance and a cheap lower
// bound on the distance that needs only (mu, sigma) arithmetic.

#include <cstdint>

namespace qs {

// Smallest sigma used in any formula; inputs are validated positive first,
// then clamped here so near-degenerate scores stay finite.
inline constexpr double kSigmaFloor = 1e-6;

// Probit-matching constant pi/8 used by the closed-form preference
// probability's denominator sqrt(1 + (pi/8)(sigma_w^2 + sigma_l^2)).
inline constexpr double kProbitScale = 0.39269908169872414;  // pi / 8

struct GaussianScore {
  double mu = 0.0;     // mean quality
  double sigma = 1.0;  // predictive std, > 0
};

enum class PrefMethod : std::uint8_t { closed_form, monte_carlo };

struct PrefProbEstimate {
  double value = 0.5;                             // in [0, 1]
  PrefMethod method = PrefMethod::closed_form;
  std::int64_t n_samples = 0;                     // 0 for closed_form
  std::uint64_t seed = 0;                         // monte_carlo only
};

double sigmoid(double x);

// log(sigmoid(x)) without overflow for large |x|.
double log_sigmoid(double x);

// Throws std::invalid_argument unless mu is finite and sigma is finite > 0.
void validate(const GaussianScore& s);

// Closed-form win probability of w over l (probit approximation).
PrefProbEstimate pref_prob_closed(const GaussianScore& w, const GaussianScore& l);

// Monte Carlo estimate of E[sigmoid(z)], z ~ N(mu_w - mu_l, sw^2 + sl^2).
// Deterministic in (seed, n); sample i is drawn by counter, so the parallel
// and serial paths return bit-identical values.
PrefProbEstimate pref_prob_mc(const GaussianScore& w, const GaussianScore& l,
                              std::int64_t n, std::uint64_t seed);
PrefProbEstimate pref_prob_mc_serial(const GaussianScore& w, const GaussianScore& l,
                                     std::int64_t n, std::uint64_t seed);

// Bhattacharyya coefficient of two Gaussians:
//   BC = sqrt(2 sa sb / (sa^2 + sb^2)) * exp(-(mua - mub)^2 / (4 (sa^2 + sb^2)))
// in (0, 1], equal to 1 iff the distributions coincide.
double bhattacharyya_coeff(const GaussianScore& a, const GaussianScore& b);

// Distance D_B = -ln BC, >= 0.
double bhattacharyya_dist(const GaussianScore& a, const GaussianScore& b);

// Uncertainty-aware lower bound on D_B:
//   ULB = (mu_w - mu_l)^2 / (4 (sigma_w + sigma_l)^2)  <=  D_B.
// Large ULB means the two score distributions are confidently separated.
double ulb(const GaussianScore& w, const GaussianScore& l);

// Per-score regularizer sigma^2 - 2 ln(sigma); strictly convex with its
// minimum value 1 at sigma = 1.
double variance_penalty(double sigma);

// KL( N(mu, sigma^2) || N(mu, 1) ) = (sigma^2 - 1 - 2 ln sigma) / 2.
// The variance penalty equals 2 * KL + 1, which is why penalizing it pins
// sigma near 1 without touching mu.
double kl_gauss_to_unit(double sigma);

}  // namespace qs
