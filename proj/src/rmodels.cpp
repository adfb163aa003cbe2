#include "qs/rmodels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "qs/parallel.hpp"
#include "qs/rng.hpp"

namespace qs {
namespace {

constexpr double kHeadSigmaFloor = 1e-3;  // added after softplus

struct Offsets {
  std::size_t w1, b1, w2, b2, w3, b3, total;
};

Offsets layout(const ScorerConfig& c) {
  const auto in = static_cast<std::size_t>(c.input_dim);
  const auto h1 = static_cast<std::size_t>(c.hidden1);
  const auto h2 = static_cast<std::size_t>(c.hidden2);
  const auto out = static_cast<std::size_t>(c.output_dim());
  Offsets o{};
  o.w1 = 0;
  o.b1 = o.w1 + h1 * in;
  o.w2 = o.b1 + h1;
  o.b2 = o.w2 + h2 * h1;
  o.w3 = o.b2 + h2;
  o.b3 = o.w3 + out * h2;
  o.total = o.b3 + out;
  return o;
}

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Post-activation values kept for backprop.
struct Trace {
  std::vector<double> a1, a2, out;
};

void fwd(const ScorerConfig& c, const double* p, const double* x, Trace& t) {
  const Offsets o = layout(c);
  const int in = c.input_dim, h1 = c.hidden1, h2 = c.hidden2, nout = c.output_dim();
  t.a1.assign(static_cast<std::size_t>(h1), 0.0);
  t.a2.assign(static_cast<std::size_t>(h2), 0.0);
  t.out.assign(static_cast<std::size_t>(nout), 0.0);
  for (int r = 0; r < h1; ++r) {
    const double* w = p + o.w1 + static_cast<std::size_t>(r) * static_cast<std::size_t>(in);
    double z = p[o.b1 + static_cast<std::size_t>(r)];
    for (int k = 0; k < in; ++k) z += w[k] * x[k];
    t.a1[static_cast<std::size_t>(r)] = std::tanh(z);
  }
  for (int r = 0; r < h2; ++r) {
    const double* w = p + o.w2 + static_cast<std::size_t>(r) * static_cast<std::size_t>(h1);
    double z = p[o.b2 + static_cast<std::size_t>(r)];
    for (int k = 0; k < h1; ++k) z += w[k] * t.a1[static_cast<std::size_t>(k)];
    t.a2[static_cast<std::size_t>(r)] = std::tanh(z);
  }
  for (int r = 0; r < nout; ++r) {
    const double* w = p + o.w3 + static_cast<std::size_t>(r) * static_cast<std::size_t>(h2);
    double z = p[o.b3 + static_cast<std::size_t>(r)];
    for (int k = 0; k < h2; ++k) z += w[k] * t.a2[static_cast<std::size_t>(k)];
    t.out[static_cast<std::size_t>(r)] = z;
  }
}

// Adds dLoss/dparams into acc (length >= param_count) for one input, given
// dLoss/doutput in dout.
void bwd(const ScorerConfig& c, const double* p, const double* x, const Trace& t,
         const double* dout, double* acc) {
  const Offsets o = layout(c);
  const int in = c.input_dim, h1 = c.hidden1, h2 = c.hidden2, nout = c.output_dim();
  std::vector<double> d2(static_cast<std::size_t>(h2), 0.0);
  for (int r = 0; r < nout; ++r) {
    const double g = dout[r];
    double* gw = acc + o.w3 + static_cast<std::size_t>(r) * static_cast<std::size_t>(h2);
    const double* w = p + o.w3 + static_cast<std::size_t>(r) * static_cast<std::size_t>(h2);
    for (int k = 0; k < h2; ++k) {
      gw[k] += g * t.a2[static_cast<std::size_t>(k)];
      d2[static_cast<std::size_t>(k)] += g * w[k];
    }
    acc[o.b3 + static_cast<std::size_t>(r)] += g;
  }
  std::vector<double> d1(static_cast<std::size_t>(h1), 0.0);
  for (int r = 0; r < h2; ++r) {
    const double a = t.a2[static_cast<std::size_t>(r)];
    const double g = d2[static_cast<std::size_t>(r)] * (1.0 - a * a);
    double* gw = acc + o.w2 + static_cast<std::size_t>(r) * static_cast<std::size_t>(h1);
    const double* w = p + o.w2 + static_cast<std::size_t>(r) * static_cast<std::size_t>(h1);
    for (int k = 0; k < h1; ++k) {
      gw[k] += g * t.a1[static_cast<std::size_t>(k)];
      d1[static_cast<std::size_t>(k)] += g * w[k];
    }
    acc[o.b2 + static_cast<std::size_t>(r)] += g;
  }
  for (int r = 0; r < h1; ++r) {
    const double a = t.a1[static_cast<std::size_t>(r)];
    const double g = d1[static_cast<std::size_t>(r)] * (1.0 - a * a);
    double* gw = acc + o.w1 + static_cast<std::size_t>(r) * static_cast<std::size_t>(in);
    for (int k = 0; k < in; ++k) gw[k] += g * x[k];
    acc[o.b1 + static_cast<std::size_t>(r)] += g;
  }
}

void check_input(const ScorerConfig& cfg, std::size_t got, const char* who) {
  if (got != static_cast<std::size_t>(cfg.input_dim)) {
    throw std::invalid_argument(std::string(who) + ": expected input of dim " +
                                std::to_string(cfg.input_dim) + ", got " +
                                std::to_string(got));
  }
}

// Serial input validation; throwing inside an OpenMP region would abort, so
// every dimension check runs before the parallel reduction starts.
void check_batch(const ScorerConfig& cfg, const std::vector<PrefPair>& batch,
                 const char* who) {
  for (const PrefPair& pr : batch) {
    if (cfg.head == HeadKind::pair_logit) {
      check_input(cfg, pr.ctx_block.size() + pr.chosen.size() + pr.rejected.size(), who);
    } else {
      check_input(cfg, pr.chosen.size(), who);
      check_input(cfg, pr.rejected.size(), who);
    }
  }
}

// Shared batch driver: accumulates per-pair gradients and losses into one
// (param_count + 1)-wide blocked reduction so parallel and serial paths are
// bit-identical, then converts sums to means.
template <class PairFn>
double reduce_pairs(const ScorerConfig& cfg, const std::vector<double>& params,
                    const std::vector<PrefPair>& batch, std::vector<double>* grad,
                    bool parallel, PairFn&& pair_fn) {
  cfg.validate();
  const std::size_t np = cfg.param_count();
  if (params.size() != np) {
    throw std::invalid_argument("loss_grad: parameter vector has size " +
                                std::to_string(params.size()) + ", expected " +
                                std::to_string(np));
  }
  if (batch.empty()) throw std::invalid_argument("loss_grad: empty batch");
  const auto n = static_cast<std::int64_t>(batch.size());
  const bool want_grad = grad != nullptr;
  const std::size_t width = want_grad ? np + 1 : 1;

  auto map = [&](std::int64_t i, double* acc) {
    const PrefPair& pr = batch[static_cast<std::size_t>(i)];
    acc[width - 1] += pair_fn(pr, want_grad ? acc : nullptr);
  };
  const std::vector<double> sums =
      parallel ? par::block_sum_vec(n, width, map) : par::block_sum_vec_serial(n, width, map);

  const double inv = 1.0 / static_cast<double>(n);
  if (want_grad) {
    grad->assign(np, 0.0);
    for (std::size_t j = 0; j < np; ++j) (*grad)[j] = sums[j] * inv;
  }
  return sums[width - 1] * inv;
}

}  // namespace

const char* head_name(HeadKind k) {
  switch (k) {
    case HeadKind::scalar: return "scalar";
    case HeadKind::pair_logit: return "pair_logit";
    case HeadKind::gaussian: return "gaussian";
  }
  return "scalar";
}

HeadKind head_from_name(const std::string& name) {
  if (name == "scalar") return HeadKind::scalar;
  if (name == "pair_logit") return HeadKind::pair_logit;
  if (name == "gaussian") return HeadKind::gaussian;
  throw std::invalid_argument("unknown scorer head: " + name);
}

std::size_t ScorerConfig::param_count() const { return layout(*this).total; }

void ScorerConfig::validate() const {
  if (input_dim < 1 || hidden1 < 1 || hidden2 < 1) {
    throw std::invalid_argument("ScorerConfig: dimensions must be >= 1");
  }
}

Scorer make_scorer(const ScorerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Offsets o = layout(cfg);
  Scorer s{cfg, std::vector<double>(o.total, 0.0)};
  struct Layer {
    std::size_t w;
    std::size_t count;
    int fan_in;
  };
  const Layer layers[3] = {
      {o.w1, o.b1 - o.w1, cfg.input_dim},
      {o.w2, o.b2 - o.w2, cfg.hidden1},
      {o.w3, o.b3 - o.w3, cfg.hidden2},
  };
  for (int li = 0; li < 3; ++li) {
    Rng rng(derive_stream(seed, 7, static_cast<std::uint64_t>(li)));
    const double r = 1.0 / std::sqrt(static_cast<double>(layers[li].fan_in));
    for (std::size_t j = 0; j < layers[li].count; ++j) {
      s.params[layers[li].w + j] = rng.uniform(-r, r);
    }
  }
  return s;
}

void scorer_forward(const ScorerConfig& cfg, const std::vector<double>& params,
                    const double* x, double* out) {
  Trace t;
  fwd(cfg, params.data(), x, t);
  for (int r = 0; r < cfg.output_dim(); ++r) out[r] = t.out[static_cast<std::size_t>(r)];
}

double btrm_score(const Scorer& s, const std::vector<double>& x) {
  check_input(s.cfg, x.size(), "btrm_score");
  double out = 0.0;
  scorer_forward(s.cfg, s.params, x.data(), &out);
  return out;
}

GaussianScore garm_score(const Scorer& s, const std::vector<double>& x) {
  if (s.cfg.head != HeadKind::gaussian) {
    throw std::invalid_argument("garm_score: scorer head is not gaussian");
  }
  check_input(s.cfg, x.size(), "garm_score");
  double out[2] = {0.0, 0.0};
  scorer_forward(s.cfg, s.params, x.data(), out);
  return {out[0], softplus(out[1]) + kHeadSigmaFloor};
}

double pairedrm_prob(const Scorer& s, const std::vector<double>& ctx_block,
                     const std::vector<double>& f1, const std::vector<double>& f2) {
  check_input(s.cfg, ctx_block.size() + f1.size() + f2.size(), "pairedrm_prob");
  std::vector<double> x;
  x.reserve(static_cast<std::size_t>(s.cfg.input_dim));
  x.insert(x.end(), ctx_block.begin(), ctx_block.end());
  x.insert(x.end(), f1.begin(), f1.end());
  x.insert(x.end(), f2.begin(), f2.end());
  double g12 = 0.0;
  scorer_forward(s.cfg, s.params, x.data(), &g12);
  std::copy(f2.begin(), f2.end(), x.begin() + static_cast<std::ptrdiff_t>(ctx_block.size()));
  std::copy(f1.begin(), f1.end(),
            x.begin() + static_cast<std::ptrdiff_t>(ctx_block.size() + f2.size()));
  double g21 = 0.0;
  scorer_forward(s.cfg, s.params, x.data(), &g21);
  return sigmoid(g12 - g21);
}

std::vector<PrefPair> featurize_triplets(const std::vector<Context>& contexts,
                                         const std::vector<PreferenceTriplet>& triplets,
                                         const FeaturizerConfig& fc) {
  for (const auto& t : triplets) {  // serial validation before the parallel map
    if (t.context_id < 0 || t.context_id >= static_cast<int>(contexts.size())) {
      throw std::invalid_argument("featurize_triplets: context_id out of range: " +
                                  std::to_string(t.context_id));
    }
    if (t.chosen.text.empty() || t.rejected.text.empty()) {
      throw std::invalid_argument("featurize_triplets: empty suggestion text");
    }
  }
  std::vector<PrefPair> out(triplets.size());
  par::for_each(static_cast<std::int64_t>(triplets.size()), [&](std::int64_t i) {
    const auto& t = triplets[static_cast<std::size_t>(i)];
    const Context& ctx = contexts[static_cast<std::size_t>(t.context_id)];
    PrefPair& p = out[static_cast<std::size_t>(i)];
    p.chosen = featurize(ctx, t.chosen, fc);
    p.rejected = featurize(ctx, t.rejected, fc);
    p.ctx_block = ctx.features;
  });
  return out;
}

double btrm_pair_loss(double s_w, double s_l) { return -log_sigmoid(s_w - s_l); }

double garm_pair_loss(double mu_w, double sigma_w, double mu_l, double sigma_l,
                      double lambda) {
  if (!(sigma_w > 0.0) || !(sigma_l > 0.0) || !std::isfinite(sigma_w) ||
      !std::isfinite(sigma_l)) {
    throw std::invalid_argument("garm_pair_loss: sigmas must be finite and positive");
  }
  const double denom = std::sqrt(1.0 + kProbitScale * (sigma_w * sigma_w + sigma_l * sigma_l));
  const double z = (mu_w - mu_l) / denom;
  const double penalty = sigma_w * sigma_w - 2.0 * std::log(sigma_w) + sigma_l * sigma_l -
                         2.0 * std::log(sigma_l);
  return -log_sigmoid(z) + lambda * penalty;
}

double btrm_loss_grad(const ScorerConfig& cfg, const std::vector<double>& params,
                      const std::vector<PrefPair>& batch, std::vector<double>* grad,
                      bool parallel) {
  if (cfg.head != HeadKind::scalar) {
    throw std::invalid_argument("btrm_loss_grad: head must be scalar");
  }
  check_batch(cfg, batch, "btrm_loss_grad");
  const double* p = params.data();
  return reduce_pairs(cfg, params, batch, grad, parallel,
                      [&](const PrefPair& pr, double* acc) {
    Trace tw, tl;
    fwd(cfg, p, pr.chosen.data(), tw);
    fwd(cfg, p, pr.rejected.data(), tl);
    const double delta = tw.out[0] - tl.out[0];
    if (acc != nullptr) {
      const double g = sigmoid(delta) - 1.0;  // dLoss/d s_w
      const double gw = g, gl = -g;
      bwd(cfg, p, pr.chosen.data(), tw, &gw, acc);
      bwd(cfg, p, pr.rejected.data(), tl, &gl, acc);
    }
    return -log_sigmoid(delta);
  });
}

double pairedrm_loss_grad(const ScorerConfig& cfg, const std::vector<double>& params,
                          const std::vector<PrefPair>& batch, std::vector<double>* grad,
                          bool parallel) {
  if (cfg.head != HeadKind::pair_logit) {
    throw std::invalid_argument("pairedrm_loss_grad: head must be pair_logit");
  }
  check_batch(cfg, batch, "pairedrm_loss_grad");
  const double* p = params.data();
  return reduce_pairs(cfg, params, batch, grad, parallel,
                      [&](const PrefPair& pr, double* acc) {
    std::vector<double> x12, x21;
    x12.reserve(static_cast<std::size_t>(cfg.input_dim));
    x12.insert(x12.end(), pr.ctx_block.begin(), pr.ctx_block.end());
    x12.insert(x12.end(), pr.chosen.begin(), pr.chosen.end());
    x12.insert(x12.end(), pr.rejected.begin(), pr.rejected.end());
    x21.reserve(static_cast<std::size_t>(cfg.input_dim));
    x21.insert(x21.end(), pr.ctx_block.begin(), pr.ctx_block.end());
    x21.insert(x21.end(), pr.rejected.begin(), pr.rejected.end());
    x21.insert(x21.end(), pr.chosen.begin(), pr.chosen.end());
    Trace t12, t21;
    fwd(cfg, p, x12.data(), t12);
    fwd(cfg, p, x21.data(), t21);
    const double delta = t12.out[0] - t21.out[0];
    if (acc != nullptr) {
      const double g = sigmoid(delta) - 1.0;
      const double g12 = g, g21 = -g;
      bwd(cfg, p, x12.data(), t12, &g12, acc);
      bwd(cfg, p, x21.data(), t21, &g21, acc);
    }
    return -log_sigmoid(delta);
  });
}

double garm_loss_grad(const ScorerConfig& cfg, const std::vector<double>& params,
                      const std::vector<PrefPair>& batch, double lambda,
                      std::vector<double>* grad, bool parallel) {
  if (cfg.head != HeadKind::gaussian) {
    throw std::invalid_argument("garm_loss_grad: head must be gaussian");
  }
  if (lambda < 0.0 || !std::isfinite(lambda)) {
    throw std::invalid_argument("garm_loss_grad: lambda must be finite and >= 0");
  }
  check_batch(cfg, batch, "garm_loss_grad");
  const double* p = params.data();
  return reduce_pairs(cfg, params, batch, grad, parallel,
                      [&](const PrefPair& pr, double* acc) {
    Trace tw, tl;
    fwd(cfg, p, pr.chosen.data(), tw);
    fwd(cfg, p, pr.rejected.data(), tl);
    const double raw_w = tw.out[1], raw_l = tl.out[1];
    const double sw = softplus(raw_w) + kHeadSigmaFloor;
    const double sl = softplus(raw_l) + kHeadSigmaFloor;
    const double dmu = tw.out[0] - tl.out[0];
    const double denom = std::sqrt(1.0 + kProbitScale * (sw * sw + sl * sl));
    const double z = dmu / denom;
    if (acc != nullptr) {
      const double gz = sigmoid(z) - 1.0;  // dLoss/dz
      // dz/dsigma = -dmu * (pi/8) * sigma / denom^3
      const double denom3 = denom * denom * denom;
      const double dz_dsw = -dmu * kProbitScale * sw / denom3;
      const double dz_dsl = -dmu * kProbitScale * sl / denom3;
      const double dpen_dsw = lambda * (2.0 * sw - 2.0 / sw);
      const double dpen_dsl = lambda * (2.0 * sl - 2.0 / sl);
      const double dout_w[2] = {gz / denom, (gz * dz_dsw + dpen_dsw) * sigmoid(raw_w)};
      const double dout_l[2] = {-gz / denom, (gz * dz_dsl + dpen_dsl) * sigmoid(raw_l)};
      bwd(cfg, p, pr.chosen.data(), tw, dout_w, acc);
      bwd(cfg, p, pr.rejected.data(), tl, dout_l, acc);
    }
    return garm_pair_loss(tw.out[0], sw, tl.out[0], sl, lambda);
  });
}

TrainResult train_scorer(Scorer& s, const std::vector<PrefPair>& data,
                         const TrainConfig& tc) {
  s.cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_scorer: empty dataset");
  if (tc.epochs < 1 || tc.batch_size < 1) {
    throw std::invalid_argument("train_scorer: epochs and batch_size must be >= 1");
  }
  if (!(tc.lr > 0.0) || !(tc.clip_norm > 0.0)) {
    throw std::invalid_argument("train_scorer: lr and clip_norm must be > 0");
  }
  const std::size_t np = s.cfg.param_count();
  if (s.params.size() != np) {
    throw std::invalid_argument("train_scorer: scorer parameter size mismatch");
  }

  auto batch_loss_grad = [&](const std::vector<PrefPair>& batch, std::vector<double>* g) {
    switch (s.cfg.head) {
      case HeadKind::scalar:
        return btrm_loss_grad(s.cfg, s.params, batch, g, tc.parallel);
      case HeadKind::pair_logit:
        return pairedrm_loss_grad(s.cfg, s.params, batch, g, tc.parallel);
      case HeadKind::gaussian:
        return garm_loss_grad(s.cfg, s.params, batch, tc.lambda, g, tc.parallel);
    }
    throw std::logic_error("train_scorer: unreachable head");
  };

  std::vector<double> m(np, 0.0), v(np, 0.0), grad;
  std::int64_t step = 0;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult res;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    Rng shuffle_rng(derive_stream(tc.seed, 900, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::int64_t seen = 0;
    double last_norm = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(tc.batch_size));
      std::vector<PrefPair> batch;
      batch.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) batch.push_back(data[order[i]]);

      const double loss = batch_loss_grad(batch, &grad);
      if (!std::isfinite(loss)) {
        throw std::runtime_error("train_scorer: non-finite loss at epoch " +
                                 std::to_string(epoch));
      }
      double sq = 0.0;
      for (double g : grad) sq += g * g;
      const double norm = std::sqrt(sq);
      if (!std::isfinite(norm)) {
        throw std::runtime_error("train_scorer: non-finite gradient at epoch " +
                                 std::to_string(epoch));
      }
      last_norm = norm;
      const double scale = norm > tc.clip_norm ? tc.clip_norm / norm : 1.0;

      ++step;
      const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(step));
      for (std::size_t j = 0; j < np; ++j) {
        const double g = grad[j] * scale;
        m[j] = tc.beta1 * m[j] + (1.0 - tc.beta1) * g;
        v[j] = tc.beta2 * v[j] + (1.0 - tc.beta2) * g * g;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        s.params[j] -= tc.lr * mhat / (std::sqrt(vhat) + tc.adam_eps);
      }

      loss_sum += loss * static_cast<double>(stop - start);
      seen += static_cast<std::int64_t>(stop - start);
    }
    res.epochs.push_back({epoch, loss_sum / static_cast<double>(seen), last_norm});
  }
  res.final_loss = res.epochs.back().mean_loss;
  return res;
}

double rm_accuracy(const Scorer& s, const std::vector<PrefPair>& data) {
  if (data.empty()) throw std::invalid_argument("rm_accuracy: empty dataset");
  const auto n = static_cast<std::int64_t>(data.size());
  const double total = par::block_sum(n, [&](std::int64_t i) {
    const PrefPair& pr = data[static_cast<std::size_t>(i)];
    double a, b;
    switch (s.cfg.head) {
      case HeadKind::pair_logit: {
        const double prob = pairedrm_prob(s, pr.ctx_block, pr.chosen, pr.rejected);
        a = prob;
        b = 0.5;
        break;
      }
      case HeadKind::gaussian:
        a = garm_score(s, pr.chosen).mu;
        b = garm_score(s, pr.rejected).mu;
        break;
      case HeadKind::scalar:
      default:
        a = btrm_score(s, pr.chosen);
        b = btrm_score(s, pr.rejected);
        break;
    }
    if (a > b) return 1.0;
    if (a == b) return 0.5;
    return 0.0;
  });
  return total / static_cast<double>(n);
}

}  // namespace qs
