#include "qs/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "qs/parallel.hpp"
#include "qs/probcore.hpp"
#include "qs/rng.hpp"

namespace qs {
namespace {

void check_env(const PolicyEnv& env) {
  if (env.world == nullptr || env.contexts.empty()) {
    throw std::invalid_argument("evalkit: empty policy environment");
  }
}

// Accuracy credit for one pair under a gaussian head: strict win 1, tie 0.5.
double pair_correct(double mu_w, double mu_l) {
  if (mu_w > mu_l) return 1.0;
  if (mu_w == mu_l) return 0.5;
  return 0.0;
}

}  // namespace

CtrEstimate ctr_estimate(const Policy& p, const PolicyEnv& env, std::int64_t n_impressions,
                         std::uint64_t seed, bool parallel) {
  check_env(env);
  if (n_impressions < 1) {
    throw std::invalid_argument("ctr_estimate: need at least one impression");
  }
  const auto n_ctx = static_cast<std::int64_t>(env.contexts.size());
  auto draw = [&](std::int64_t i) -> double {
    const int ci = static_cast<int>(i % n_ctx);
    const Rollout r =
        sample_action(p, env, ci, derive_stream(seed, 90, static_cast<std::uint64_t>(i)));
    if (r.action.refuse) return 0.0;
    const ClickLogRecord rec =
        serve_and_click(*env.world, env.contexts[static_cast<std::size_t>(ci)],
                        r.action.triple, derive_stream(seed, 91, static_cast<std::uint64_t>(i)));
    return rec.clicked_position.has_value() ? 1.0 : 0.0;
  };
  const double clicks = parallel ? par::block_sum(n_impressions, draw)
                                 : par::block_sum_serial(n_impressions, draw);
  CtrEstimate est;
  est.impressions = n_impressions;
  est.clicks = static_cast<std::int64_t>(clicks);
  est.ctr = clicks / static_cast<double>(n_impressions);
  est.se = std::sqrt(est.ctr * (1.0 - est.ctr) / static_cast<double>(n_impressions));
  return est;
}

double ctr_exact(const Policy& p, const PolicyEnv& env, bool parallel) {
  check_env(env);
  const auto n_ctx = static_cast<std::int64_t>(env.contexts.size());
  auto per_ctx = [&](std::int64_t i) -> double {
    const int ci = static_cast<int>(i);
    const auto& ctx = env.contexts[static_cast<std::size_t>(i)];
    const auto pool_size = static_cast<int>(env.cand_feats[static_cast<std::size_t>(i)].size());
    double expect = 0.0;
    for (const auto& a : enumerate_actions(pool_size, true)) {
      if (a.refuse) continue;  // refusals cannot be clicked
      const auto probs = scan_click_probs(*env.world, ctx, a.triple);
      expect += std::exp(action_logprob(p, env, ci, a)) * (1.0 - probs[3]);
    }
    return expect;
  };
  const double total =
      parallel ? par::block_sum(n_ctx, per_ctx) : par::block_sum_serial(n_ctx, per_ctx);
  return total / static_cast<double>(n_ctx);
}

std::vector<CalibrationBin> calibration_bins(const Scorer& s,
                                             const std::vector<PrefPair>& data, int n_bins,
                                             std::int64_t min_count, bool parallel) {
  if (s.cfg.head != HeadKind::gaussian) {
    throw std::invalid_argument("calibration_bins: needs a gaussian-head scorer");
  }
  if (data.empty()) throw std::invalid_argument("calibration_bins: empty test set");
  if (n_bins < 3) throw std::invalid_argument("calibration_bins: n_bins must be >= 3");
  if (min_count < 1) throw std::invalid_argument("calibration_bins: min_count must be >= 1");

  const auto n = static_cast<std::int64_t>(data.size());
  std::vector<double> conf(data.size());
  std::vector<double> correct(data.size());
  auto fill = [&](std::int64_t i) {
    const auto& pr = data[static_cast<std::size_t>(i)];
    const GaussianScore w = garm_score(s, pr.chosen);
    const GaussianScore l = garm_score(s, pr.rejected);
    conf[static_cast<std::size_t>(i)] = ulb(w, l);
    correct[static_cast<std::size_t>(i)] = pair_correct(w.mu, l.mu);
  };
  if (parallel) {
    par::for_each(n, fill);
  } else {
    for (std::int64_t i = 0; i < n; ++i) fill(i);
  }

  double lo = conf[0], hi = conf[0];
  for (double c : conf) {
    lo = std::min(lo, c);
    hi = std::max(hi, c);
  }

  // Raw equal-width histogram; the top edge is inclusive.
  std::vector<std::int64_t> counts(static_cast<std::size_t>(n_bins), 0);
  std::vector<double> sums(static_cast<std::size_t>(n_bins), 0.0);
  const double width = (hi - lo) / n_bins;
  for (std::size_t i = 0; i < data.size(); ++i) {
    int b = 0;
    if (width > 0.0) {
      b = std::min(n_bins - 1, static_cast<int>((conf[i] - lo) / width));
    }
    counts[static_cast<std::size_t>(b)] += 1;
    sums[static_cast<std::size_t>(b)] += correct[i];
  }

  // Merge under-filled bins into their right neighbor; a trailing remainder
  // folds into the last emitted bin so the result stays a partition.
  std::vector<CalibrationBin> out;
  double lower = lo;
  std::int64_t acc_count = 0;
  double acc_sum = 0.0;
  for (int b = 0; b < n_bins; ++b) {
    acc_count += counts[static_cast<std::size_t>(b)];
    acc_sum += sums[static_cast<std::size_t>(b)];
    const double upper = (b == n_bins - 1) ? hi : lo + width * (b + 1);
    if (acc_count >= min_count) {
      out.push_back({lower, upper, acc_count, acc_sum / static_cast<double>(acc_count)});
      lower = upper;
      acc_count = 0;
      acc_sum = 0.0;
    }
  }
  if (acc_count > 0) {
    if (out.empty()) {
      out.push_back({lower, hi, acc_count, acc_sum / static_cast<double>(acc_count)});
    } else {
      CalibrationBin& last = out.back();
      const double sum_last = last.accuracy * static_cast<double>(last.count);
      last.count += acc_count;
      last.upper = hi;
      last.accuracy = (sum_last + acc_sum) / static_cast<double>(last.count);
    }
  }
  return out;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman: size mismatch");
  if (x.size() < 2) throw std::invalid_argument("spearman: need at least 2 points");

  auto ranks = [](const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return v[a] < v[b];
    });
    std::vector<double> r(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };

  const std::vector<double> rx = ranks(x);
  const std::vector<double> ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw std::invalid_argument("spearman: zero rank variance");
  }
  return sxy / std::sqrt(sxx * syy);
}

std::int64_t gsb_proxy(const World& w, const std::vector<Context>& contexts,
                       const std::vector<SuggestionGroup>& groups_a,
                       const std::vector<SuggestionGroup>& groups_b,
                       double useful_threshold) {
  if (groups_a.size() != contexts.size() || groups_b.size() != contexts.size()) {
    throw std::invalid_argument("gsb_proxy: group lists must align with the context list");
  }
  auto useful = [&](const Context& ctx, const SuggestionGroup& g) -> std::int64_t {
    if (g.is_refusal) return 0;
    std::int64_t score = 0;
    for (const auto& s : g.suggestions) {
      if (utility(w, ctx, s) >= useful_threshold) score += 1;
    }
    return score;
  };
  std::int64_t total = 0;
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    total += useful(contexts[i], groups_a[i]) - useful(contexts[i], groups_b[i]);
  }
  return total;
}

double utility_quantile(const World& w, double q) {
  if (!(q >= 0.0 && q <= 1.0)) {
    throw std::invalid_argument("utility_quantile: q must be in [0, 1]");
  }
  std::vector<double> all;
  for (const auto& ctx : w.contexts) {
    const auto us = pool_utilities(w, ctx);
    all.insert(all.end(), us.begin(), us.end());
  }
  if (all.empty()) throw std::invalid_argument("utility_quantile: empty world");
  std::sort(all.begin(), all.end());
  const double pos = q * static_cast<double>(all.size() - 1);
  const auto i = static_cast<std::size_t>(pos);
  if (i + 1 >= all.size()) return all.back();
  const double frac = pos - static_cast<double>(i);
  return all[i] * (1.0 - frac) + all[i + 1] * frac;
}

std::vector<OodRow> ood_eval(const Scorer& s,
                             const std::vector<std::pair<std::string, std::vector<PrefPair>>>&
                                 datasets,
                             bool parallel) {
  std::vector<OodRow> rows;
  for (const auto& [name, data] : datasets) {
    if (data.empty()) {
      throw std::invalid_argument("ood_eval: empty dataset: " + name);
    }
    OodRow row;
    row.dataset = name;
    row.n = static_cast<std::int64_t>(data.size());
    row.accuracy = rm_accuracy(s, data);
    if (s.cfg.head == HeadKind::gaussian) {
      row.has_ulb = true;
      auto pair_ulb = [&](std::int64_t i) {
        const auto& pr = data[static_cast<std::size_t>(i)];
        return ulb(garm_score(s, pr.chosen), garm_score(s, pr.rejected));
      };
      const auto n = static_cast<std::int64_t>(data.size());
      const double total = parallel ? par::block_sum(n, pair_ulb)
                                    : par::block_sum_serial(n, pair_ulb);
      row.mean_ulb = total / static_cast<double>(data.size());
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_sig(double v) {
  std::ostringstream out;
  out << std::setprecision(6) << v;
  return out.str();
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_report: cannot open " + path.string());
  return out;
}

void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw std::runtime_error("write_report: failed writing " + path.string());
}

}  // namespace

void write_report(const EvalReport& rep, const std::string& out_dir) {
  namespace fs = std::filesystem;
  const fs::path dir(out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw std::runtime_error("write_report: cannot create directory " + dir.string());
  }

  {
    const fs::path path = dir / "ctr.csv";
    std::ofstream out = open_out(path);
    out << "policy,seed,ctr,stderr,clicks,impressions\n";
    for (const auto& r : rep.ctr) {
      out << r.policy << "," << r.seed << "," << format_sig(r.est.ctr) << ","
          << format_sig(r.est.se) << "," << r.est.clicks << "," << r.est.impressions << "\n";
    }
    finish(out, path);
  }
  {
    const fs::path path = dir / "rm_accuracy.csv";
    std::ofstream out = open_out(path);
    out << "dataset,seed,accuracy,mean_ulb,n\n";
    for (const auto& r : rep.accuracy) {
      out << r.dataset << "," << r.seed << "," << format_sig(r.row.accuracy) << ",";
      if (r.row.has_ulb) out << format_sig(r.row.mean_ulb);
      out << "," << r.row.n << "\n";
    }
    finish(out, path);
  }
  {
    const fs::path path = dir / "calibration.csv";
    std::ofstream out = open_out(path);
    out << "seed,bin,lower,upper,count,accuracy\n";
    for (const auto& r : rep.calibration) {
      out << r.seed << "," << r.bin_index << "," << format_sig(r.bin.lower) << ","
          << format_sig(r.bin.upper) << "," << r.bin.count << ","
          << format_sig(r.bin.accuracy) << "\n";
    }
    finish(out, path);
  }
  {
    const fs::path path = dir / "gsb.csv";
    std::ofstream out = open_out(path);
    out << "comparison,seed,gsb,n_contexts\n";
    for (const auto& r : rep.gsb) {
      out << r.comparison << "," << r.seed << "," << r.gsb << "," << r.n_contexts << "\n";
    }
    finish(out, path);
  }
  {
    const fs::path path = dir / "summary.txt";
    std::ofstream out = open_out(path);
    out << "config: " << rep.config_fingerprint << "\n";
    out << "seeds:";
    for (auto s : rep.seeds) out << " " << s;
    out << "\n";

    // Per-policy mean CTR in first-seen order.
    std::vector<std::string> seen;
    for (const auto& r : rep.ctr) {
      if (std::find(seen.begin(), seen.end(), r.policy) == seen.end()) {
        seen.push_back(r.policy);
      }
    }
    for (const auto& name : seen) {
      double sum = 0.0;
      int cnt = 0;
      for (const auto& r : rep.ctr) {
        if (r.policy == name) {
          sum += r.est.ctr;
          ++cnt;
        }
      }
      out << "ctr " << name << " mean " << format_sig(sum / cnt) << " over " << cnt
          << " runs\n";
    }
    seen.clear();
    for (const auto& r : rep.accuracy) {
      if (std::find(seen.begin(), seen.end(), r.dataset) == seen.end()) {
        seen.push_back(r.dataset);
      }
    }
    for (const auto& name : seen) {
      double sum = 0.0;
      int cnt = 0;
      for (const auto& r : rep.accuracy) {
        if (r.dataset == name) {
          sum += r.row.accuracy;
          ++cnt;
        }
      }
      out << "accuracy " << name << " mean " << format_sig(sum / cnt) << " over " << cnt
          << " runs\n";
    }
    std::int64_t gsb_total = 0;
    for (const auto& r : rep.gsb) gsb_total += r.gsb;
    out << "gsb rows " << rep.gsb.size() << " total " << gsb_total << "\n";
    out << "calibration rows " << rep.calibration.size() << "\n";
    finish(out, path);
  }
}

}  // namespace qs
