#include "qs/fusion.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "qs/probcore.hpp"
#include "qs/rng.hpp"

namespace qs {
namespace {

void check_deltas(const std::vector<std::vector<double>>& deltas) {
  if (deltas.empty()) {
    throw std::invalid_argument("fit_fusion_weights: empty delta list");
  }
  const std::size_t k = deltas.front().size();
  if (k == 0) throw std::invalid_argument("fit_fusion_weights: zero-dimensional deltas");
  for (const auto& row : deltas) {
    if (row.size() != k) {
      throw std::invalid_argument("fit_fusion_weights: ragged delta rows");
    }
    for (double v : row) {
      if (!std::isfinite(v)) {
        throw std::invalid_argument("fit_fusion_weights: non-finite delta entry");
      }
    }
  }
}

// Solves the k x k system A x = b in place by Gaussian elimination with
// partial pivoting; A is symmetric positive definite here (Hessian + L2).
std::vector<double> solve_spd(std::vector<double> a, std::vector<double> b) {
  const std::size_t k = b.size();
  for (std::size_t col = 0; col < k; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < k; ++r) {
      if (std::abs(a[r * k + col]) > std::abs(a[piv * k + col])) piv = r;
    }
    if (std::abs(a[piv * k + col]) < 1e-14) {
      throw std::runtime_error("fit_fusion_weights: singular Newton system");
    }
    if (piv != col) {
      for (std::size_t c = 0; c < k; ++c) std::swap(a[piv * k + c], a[col * k + c]);
      std::swap(b[piv], b[col]);
    }
    for (std::size_t r = col + 1; r < k; ++r) {
      const double f = a[r * k + col] / a[col * k + col];
      if (f == 0.0) continue;
      for (std::size_t c = col; c < k; ++c) a[r * k + c] -= f * a[col * k + c];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> x(k, 0.0);
  for (std::size_t ri = k; ri-- > 0;) {
    double acc = b[ri];
    for (std::size_t c = ri + 1; c < k; ++c) acc -= a[ri * k + c] * x[c];
    x[ri] = acc / a[ri * k + ri];
  }
  return x;
}

}  // namespace

double fusion_fit_loss(const std::vector<std::vector<double>>& deltas,
                       const std::vector<double>& w, double lambda_l2) {
  double acc = 0.0;
  for (const auto& row : deltas) {
    double z = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) z += w[j] * row[j];
    acc += -log_sigmoid(z);
  }
  acc /= static_cast<double>(deltas.size());
  for (double wj : w) acc += lambda_l2 * wj * wj;
  return acc;
}

FusionFitResult fit_fusion_weights(const std::vector<std::vector<double>>& deltas,
                                   double lambda_l2, double lr, int epochs,
                                   std::uint64_t seed) {
  check_deltas(deltas);
  if (lambda_l2 < 0.0 || !std::isfinite(lambda_l2)) {
    throw std::invalid_argument("fit_fusion_weights: lambda_l2 must be finite and >= 0");
  }
  if (epochs < 1 || !(lr > 0.0)) {
    throw std::invalid_argument("fit_fusion_weights: epochs must be >= 1 and lr > 0");
  }
  const std::size_t k = deltas.front().size();
  const double n = static_cast<double>(deltas.size());

  std::vector<double> w(k, 0.0);
  Rng init_rng(derive_stream(seed, 40));
  for (auto& wj : w) wj = init_rng.uniform(-0.5, 0.5);

  FusionFitResult res;
  double loss = fusion_fit_loss(deltas, w, lambda_l2);
  std::vector<double> grad(k, 0.0), hess(k * k, 0.0);
  for (int iter = 0; iter < epochs; ++iter) {
    std::fill(grad.begin(), grad.end(), 0.0);
    std::fill(hess.begin(), hess.end(), 0.0);
    for (const auto& row : deltas) {
      double z = 0.0;
      for (std::size_t j = 0; j < k; ++j) z += w[j] * row[j];
      const double s = sigmoid(z);
      const double g = s - 1.0;      // d(-log sigmoid)/dz
      const double curv = s * (1.0 - s);
      for (std::size_t j = 0; j < k; ++j) {
        grad[j] += g * row[j];
        for (std::size_t l = 0; l < k; ++l) hess[j * k + l] += curv * row[j] * row[l];
      }
    }
    double gnorm_sq = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      grad[j] = grad[j] / n + 2.0 * lambda_l2 * w[j];
      gnorm_sq += grad[j] * grad[j];
    }
    for (std::size_t j = 0; j < k * k; ++j) hess[j] /= n;
    for (std::size_t j = 0; j < k; ++j) hess[j * k + j] += 2.0 * lambda_l2;

    res.iters = iter + 1;
    res.grad_norm = std::sqrt(gnorm_sq);
    if (res.grad_norm <= kFusionGradTol) {
      res.converged = true;
      break;
    }

    const std::vector<double> dir = solve_spd(hess, grad);
    double gd = 0.0;
    for (std::size_t j = 0; j < k; ++j) gd += grad[j] * dir[j];
    double t = std::min(1.0, lr);
    std::vector<double> cand(k, 0.0);
    double cand_loss = loss;
    while (t > 1e-12) {
      for (std::size_t j = 0; j < k; ++j) cand[j] = w[j] - t * dir[j];
      cand_loss = fusion_fit_loss(deltas, cand, lambda_l2);
      if (cand_loss <= loss - 1e-4 * t * gd) break;
      t *= 0.5;
    }
    w = cand;
    loss = cand_loss;
  }

  res.loss = loss;
  res.weights.w = w;
  res.weights.lambda_l2 = lambda_l2;
  res.weights.provenance = FusionWeights::Provenance::initial_lr;
  return res;
}

void ParetoConfig::validate() const {
  if (probe_steps < 2 || window < 2 || max_rounds < 1) {
    throw std::invalid_argument("ParetoConfig: probe_steps/window >= 2 and max_rounds >= 1");
  }
  if (!(alpha_up > 1.0) || !(alpha_down > 0.0) || !(alpha_down < 1.0)) {
    throw std::invalid_argument("ParetoConfig: need alpha_up > 1 and alpha_down in (0,1)");
  }
  if (!(dominance_share > 0.0) || !(dominance_share < 1.0)) {
    throw std::invalid_argument("ParetoConfig: dominance_share must lie in (0,1)");
  }
  if (trend_epsilon < 0.0) {
    throw std::invalid_argument("ParetoConfig: trend_epsilon must be >= 0");
  }
}

double ls_slope(const std::vector<double>& y) {
  const std::size_t m = y.size();
  if (m < 2) throw std::invalid_argument("ls_slope: need at least 2 points");
  const double xbar = static_cast<double>(m - 1) / 2.0;
  double ybar = 0.0;
  for (double v : y) ybar += v;
  ybar /= static_cast<double>(m);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double dx = static_cast<double>(i) - xbar;
    num += dx * (y[i] - ybar);
    den += dx * dx;
  }
  return num / den;
}

ParetoResult pareto_tune(const FusionWeights& w0, const ProbeFn& probe,
                         const ParetoConfig& cfg) {
  cfg.validate();
  if (!probe) throw std::invalid_argument("pareto_tune: null probe");
  if (w0.w.empty()) throw std::invalid_argument("pareto_tune: empty weight vector");

  ParetoResult res;
  res.weights = w0;
  const std::size_t k = w0.w.size();

  for (int round = 1; round <= cfg.max_rounds; ++round) {
    std::vector<std::vector<double>> series;
    try {
      series = probe(res.weights, round);
    } catch (const std::exception& e) {
      throw std::runtime_error("pareto_tune: probe failed at round " +
                               std::to_string(round) + ": " + e.what());
    }
    if (series.size() < 2) {
      throw std::runtime_error("pareto_tune: probe returned fewer than 2 steps at round " +
                               std::to_string(round));
    }
    for (const auto& step : series) {
      if (step.size() != k) {
        throw std::runtime_error("pareto_tune: probe component count mismatch at round " +
                                 std::to_string(round));
      }
    }

    const std::size_t use = std::min<std::size_t>(series.size(),
                                                  static_cast<std::size_t>(cfg.window));
    const std::size_t lo = series.size() - use;
    ParetoRound rl;
    rl.round = round;
    rl.slopes.resize(k);
    for (std::size_t j = 0; j < k; ++j) {
      std::vector<double> col(use);
      for (std::size_t i = 0; i < use; ++i) col[i] = series[lo + i][j];
      rl.slopes[j] = ls_slope(col);
    }
    res.rounds = round;

    // Convergence is tested before any update, so a start with no decreasing
    // component returns the input weights untouched.
    bool all_ok = true;
    for (double s : rl.slopes) all_ok = all_ok && (s >= -cfg.trend_epsilon);
    rl.all_nonnegative = all_ok;
    if (all_ok) {
      rl.weights_after = res.weights.w;
      res.log.push_back(std::move(rl));
      res.converged = true;
      res.weights.provenance = FusionWeights::Provenance::pareto_tuned;
      return res;
    }

    // Rule 1: a decreasing component gets more weight.
    for (std::size_t j = 0; j < k; ++j) {
      if (rl.slopes[j] < -cfg.trend_epsilon) res.weights.w[j] *= cfg.alpha_up;
    }
    // Rule 2: a component carrying more than dominance_share of the total
    // fused improvement gets less.  Contributions are weight * trend; the
    // rule only fires when the fused trend improves at all.
    double total = 0.0;
    std::vector<double> contrib(k, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      contrib[j] = res.weights.w[j] * rl.slopes[j];
      total += contrib[j];
    }
    if (total > 0.0) {
      for (std::size_t j = 0; j < k; ++j) {
        if (contrib[j] > cfg.dominance_share * total) res.weights.w[j] *= cfg.alpha_down;
      }
    }
    rl.weights_after = res.weights.w;
    res.log.push_back(std::move(rl));
  }

  res.converged = false;
  res.weights.provenance = FusionWeights::Provenance::pareto_tuned;
  return res;
}

std::string pareto_log_csv(const ParetoResult& res) {
  std::ostringstream out;
  const std::size_t k = res.weights.w.size();
  out << "round,converged";
  for (std::size_t j = 0; j < k; ++j) out << ",slope_" << j;
  for (std::size_t j = 0; j < k; ++j) out << ",weight_" << j;
  out << "\n";
  out.precision(10);
  for (const auto& r : res.log) {
    out << r.round << "," << (r.all_nonnegative ? 1 : 0);
    for (double s : r.slopes) out << "," << s;
    for (double w : r.weights_after) out << "," << w;
    out << "\n";
  }
  return out.str();
}

ProbeFn toy_tradeoff_probe(double eta) {
  return [eta](const FusionWeights& fw, int /*round*/) {
    if (fw.w.size() != 2) {
      throw std::invalid_argument("toy_tradeoff_probe: expects exactly 2 components");
    }
    const double w1 = fw.w[0], w2 = fw.w[1];
    std::vector<std::vector<double>> series;
    double x = 0.0, y = 0.0;
    for (int step = 0; step < 60; ++step) {
      x += eta * (w1 - 0.5 * w2);
      y += eta * (w2 - 0.5 * w1);
      series.push_back({x, y});
    }
    return series;
  };
}

}  // namespace qs
