#include "qs/probcore.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "qs/parallel.hpp"
#include "qs/rng.hpp"

namespace qs {

namespace {

static_assert(kProbitScale > 0.3926990816 && kProbitScale < 0.3926990817,
              "header constant must equal pi/8");

double checked_sigma(const GaussianScore& s) {
  validate(s);
  return std::max(s.sigma, kSigmaFloor);
}

// Mean of sigmoid(mu + sd * N(0,1)) over sample indices [lo, hi) of the
// counter stream `seed`.  Both MC entry points run exactly this code on the
// same block layout, so they agree bit for bit.
double mc_mean(double mu, double sd, std::int64_t n, std::uint64_t seed, bool parallel) {
  // Box-Muller yields two normals per counter; consume both.
  const std::int64_t pairs = (n + 1) / 2;
  auto pair_sum = [mu, sd, n, seed](std::int64_t i) {
    const auto [z0, z1] = normal_pair_at(seed, static_cast<std::uint64_t>(i));
    double s = sigmoid(mu + sd * z0);
    if (2 * i + 1 < n) s += sigmoid(mu + sd * z1);
    return s;
  };
  const double total = parallel ? par::block_sum(pairs, pair_sum)
                                : par::block_sum_serial(pairs, pair_sum);
  return total / static_cast<double>(n);
}

PrefProbEstimate mc_impl(const GaussianScore& w, const GaussianScore& l,
                         std::int64_t n, std::uint64_t seed, bool parallel) {
  const double sw = checked_sigma(w);
  const double sl = checked_sigma(l);
  if (n <= 0) throw std::invalid_argument("pref_prob_mc: n must be positive");
  const double mu = w.mu - l.mu;
  const double sd = std::sqrt(sw * sw + sl * sl);
  PrefProbEstimate est;
  est.value = mc_mean(mu, sd, n, seed, parallel);
  est.method = PrefMethod::monte_carlo;
  est.n_samples = n;
  est.seed = seed;
  return est;
}

}  // namespace

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double log_sigmoid(double x) {
  // -log(1 + exp(-x)) with the large-|x| branch kept in the stable form.
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

void validate(const GaussianScore& s) {
  if (!std::isfinite(s.mu)) {
    throw std::invalid_argument("GaussianScore: mu must be finite, got " +
                                std::to_string(s.mu));
  }
  if (!std::isfinite(s.sigma) || s.sigma <= 0.0) {
    throw std::invalid_argument("GaussianScore: sigma must be finite > 0, got " +
                                std::to_string(s.sigma));
  }
}

PrefProbEstimate pref_prob_closed(const GaussianScore& w, const GaussianScore& l) {
  const double sw = checked_sigma(w);
  const double sl = checked_sigma(l);
  const double denom = std::sqrt(1.0 + kProbitScale * (sw * sw + sl * sl));
  PrefProbEstimate est;
  est.value = sigmoid((w.mu - l.mu) / denom);
  return est;
}

PrefProbEstimate pref_prob_mc(const GaussianScore& w, const GaussianScore& l,
                              std::int64_t n, std::uint64_t seed) {
  return mc_impl(w, l, n, seed, /*parallel=*/true);
}

PrefProbEstimate pref_prob_mc_serial(const GaussianScore& w, const GaussianScore& l,
                                     std::int64_t n, std::uint64_t seed) {
  return mc_impl(w, l, n, seed, /*parallel=*/false);
}

double bhattacharyya_coeff(const GaussianScore& a, const GaussianScore& b) {
  const double sa = checked_sigma(a);
  const double sb = checked_sigma(b);
  const double v = sa * sa + sb * sb;
  const double dm = a.mu - b.mu;
  return std::sqrt(2.0 * sa * sb / v) * std::exp(-dm * dm / (4.0 * v));
}

double bhattacharyya_dist(const GaussianScore& a, const GaussianScore& b) {
  return -std::log(bhattacharyya_coeff(a, b));
}

double ulb(const GaussianScore& w, const GaussianScore& l) {
  const double sw = checked_sigma(w);
  const double sl = checked_sigma(l);
  const double dm = w.mu - l.mu;
  const double ss = sw + sl;
  return dm * dm / (4.0 * ss * ss);
}

double variance_penalty(double sigma) {
  if (!std::isfinite(sigma) || sigma <= 0.0) {
    throw std::invalid_argument("variance_penalty: sigma must be finite > 0");
  }
  sigma = std::max(sigma, kSigmaFloor);
  return sigma * sigma - 2.0 * std::log(sigma);
}

double kl_gauss_to_unit(double sigma) {
  if (!std::isfinite(sigma) || sigma <= 0.0) {
    throw std::invalid_argument("kl_gauss_to_unit: sigma must be finite > 0");
  }
  sigma = std::max(sigma, kSigmaFloor);
  return 0.5 * (sigma * sigma - 1.0 - 2.0 * std::log(sigma));
}

}  // namespace qs
