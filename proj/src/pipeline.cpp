#include "qs/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <sstream>
#include <utility>

#include "json.hpp"
#include "qs/features.hpp"
#include "qs/parallel.hpp"
#include "qs/rng.hpp"

namespace qs {

namespace fs = std::filesystem;

namespace {

// Reward-component slots, aligned with kComponentNames.
constexpr int kFormat = 0, kLength = 1, kLanguage = 2, kDiversity = 3, kSafety = 4,
              kRubric = 5, kPpl = 6, kRm = 7, kRmSigma = 8;

constexpr double kReferenceSmoothing = 0.5;  // add-k for the bigram model
constexpr int kRefuseRetries = 64;           // serving draws before the fallback

// Artifact names inside cfg.out_dir.
constexpr const char* kWorldFile = "world.json";
constexpr const char* kLogsFile = "logs.jsonl";
constexpr const char* kLogsShiftedFile = "logs_shifted.jsonl";
constexpr const char* kTrainTripletsFile = "triplets_train.jsonl";
constexpr const char* kTestTripletsFile = "triplets_test.jsonl";
constexpr const char* kShiftedTripletsFile = "triplets_shifted.jsonl";
constexpr const char* kCurationFile = "curation.txt";
constexpr const char* kReferenceFile = "reference_model.json";
constexpr const char* kFusionFile = "fusion_weights.json";
constexpr const char* kFusionLogFile = "fusion_pareto.csv";
constexpr const char* kSftPolicyFile = "sft_policy.json";
constexpr const char* kSftDatasetFile = "sft_dataset.jsonl";
constexpr const char* kRlPolicyFile = "rl_policy.json";
constexpr const char* kRlTraceFile = "rl_trace.csv";
constexpr const char* kRftPolicyFile = "rft_policy.json";
constexpr const char* kRftDatasetFile = "rft_dataset.jsonl";

std::string path_in(const RunConfig& cfg, const std::string& name) {
  return cfg.out_dir + "/" + name;
}

// Checkpoint file tag per reward-model head.
const char* rm_file_tag(HeadKind head) {
  switch (head) {
    case HeadKind::scalar: return "bt";
    case HeadKind::pair_logit: return "paired";
    case HeadKind::gaussian: return "garm";
  }
  throw ConfigError("unknown reward-model head");
}

std::string rm_checkpoint_path(const RunConfig& cfg, HeadKind head) {
  return cfg.out_dir + "/rm_" + std::string(rm_file_tag(head)) + ".json";
}

void apply_threads(const RunConfig& cfg) {
  if (cfg.threads > 0) par::set_max_threads(cfg.threads);
}

void ensure_out_dir(const RunConfig& cfg) {
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec || !fs::is_directory(cfg.out_dir)) {
    throw DataError("cannot create output directory " + cfg.out_dir);
  }
}

// Library validation errors become ConfigErrors so the tool exits with the
// configuration code instead of the generic data code.
template <class Fn>
void check_cfg(Fn&& fn) {
  try {
    fn();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

// Training throws std::runtime_error only for non-finite numeric state.
template <class Fn>
auto numeric_section(Fn&& fn) {
  try {
    return fn();
  } catch (const std::runtime_error& e) {
    throw NumericError(e.what());
  }
}

void check_policy_matches(const Policy& p, const World& w, const std::string& who) {
  const FeaturizerConfig fc = w.cfg.featurizer();
  if (p.select_w.size() != static_cast<std::size_t>(fc.dim()) ||
      p.refuse_w.size() != static_cast<std::size_t>(fc.context_dim) ||
      !(p.temperature > 0.0)) {
    throw DataError(who + ": policy does not match the world's feature layout");
  }
}

double parse_double(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != value.size() || !std::isfinite(v)) {
    throw ConfigError("config key \"" + key + "\": expected a number, got \"" + value + "\"");
  }
  return v;
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  std::int64_t v = 0;
  try {
    v = std::stoll(value, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != value.size()) {
    throw ConfigError("config key \"" + key + "\": expected an integer, got \"" + value + "\"");
  }
  return v;
}

// Consumes recognized keys from the parsed map; whatever remains afterwards
// is unknown and rejected by done().
struct KvReader {
  std::map<std::string, std::string> kv;

  std::optional<std::string> take(const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) return std::nullopt;
    std::string v = it->second;
    kv.erase(it);
    return v;
  }

  void get(const std::string& key, double& target) {
    if (const auto v = take(key)) target = parse_double(key, *v);
  }
  void get(const std::string& key, int& target) {
    if (const auto v = take(key)) {
      const std::int64_t raw = parse_int(key, *v);
      if (raw < INT32_MIN || raw > INT32_MAX) {
        throw ConfigError("config key \"" + key + "\": value out of range");
      }
      target = static_cast<int>(raw);
    }
  }
  void get(const std::string& key, std::int64_t& target) {
    if (const auto v = take(key)) target = parse_int(key, *v);
  }
  void get(const std::string& key, std::uint64_t& target) {
    if (const auto v = take(key)) {
      const std::int64_t raw = parse_int(key, *v);
      if (raw < 0) throw ConfigError("config key \"" + key + "\": must be non-negative");
      target = static_cast<std::uint64_t>(raw);
    }
  }
  void get(const std::string& key, bool& target) {
    if (const auto v = take(key)) {
      if (*v == "true" || *v == "1") {
        target = true;
      } else if (*v == "false" || *v == "0") {
        target = false;
      } else {
        throw ConfigError("config key \"" + key + "\": expected true/false, got \"" + *v + "\"");
      }
    }
  }
  void get(const std::string& key, std::string& target) {
    if (const auto v = take(key)) target = *v;
  }
  void get_list(const std::string& key, std::vector<std::string>& target) {
    const auto v = take(key);
    if (!v.has_value()) return;
    std::vector<std::string> items;
    std::string cur;
    for (char c : *v + ",") {
      if (c == ',') {
        std::size_t b = cur.find_first_not_of(" \t");
        std::size_t e = cur.find_last_not_of(" \t");
        if (b == std::string::npos) {
          throw ConfigError("config key \"" + key + "\": empty list item");
        }
        items.push_back(cur.substr(b, e - b + 1));
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    target = std::move(items);
  }
  void get_anchor(const std::string& key, GrpoConfig::Anchor& target) {
    if (const auto v = take(key)) {
      if (*v == "old_policy") {
        target = GrpoConfig::Anchor::old_policy;
      } else if (*v == "sft_reference") {
        target = GrpoConfig::Anchor::sft_reference;
      } else {
        throw ConfigError("config key \"" + key +
                          "\": expected old_policy or sft_reference, got \"" + *v + "\"");
      }
    }
  }

  void done() const {
    if (kv.empty()) return;
    std::string msg = "unknown config key";
    if (kv.size() > 1) msg += "s";
    msg += ":";
    for (const auto& [k, v] : kv) msg += " \"" + k + "\"";
    throw ConfigError(msg);
  }
};

// Shortest round-trip decimal rendering (what the JSON library emits), so a
// rendered config reparses to bit-identical values.
std::string num(double v) { return nlohmann::json(v).dump(); }

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace

// ------------------------------------------------------------ run config

void RunConfig::validate() const {
  check_cfg([&] { world.validate(); });
  check_cfg([&] { grpo.validate(); });
  check_cfg([&] { fusion.pareto_cfg.validate(); });
  require(!out_dir.empty(), "run.out_dir must not be empty");
  require(threads >= 0, "run.threads must be >= 0");
  require(simulate.impressions >= 1, "simulate.impressions must be >= 1");
  require(simulate.shift_week >= 1, "simulate.shift_week must be >= 1");
  require(simulate.shift_impressions >= 1, "simulate.shift_impressions must be >= 1");
  require(simulate.test_fraction > 0.0 && simulate.test_fraction <= 0.9,
          "simulate.test_fraction must be in (0, 0.9]");
  require(rm.hidden1 >= 1 && rm.hidden2 >= 1, "rm.hidden1 and rm.hidden2 must be >= 1");
  require(rm.train.epochs >= 0, "rm.epochs must be >= 0");
  require(rm.train.batch_size >= 1, "rm.batch_size must be >= 1");
  require(rm.train.lr > 0.0, "rm.lr must be > 0");
  require(rm.train.beta1 >= 0.0 && rm.train.beta1 < 1.0, "rm.beta1 must be in [0, 1)");
  require(rm.train.beta2 >= 0.0 && rm.train.beta2 < 1.0, "rm.beta2 must be in [0, 1)");
  require(rm.train.clip_norm > 0.0, "rm.clip_norm must be > 0");
  require(rm.train.lambda >= 0.0, "rm.lambda must be >= 0");
  require(fusion.lambda_l2 > 0.0, "fusion.lambda_l2 must be > 0");
  require(fusion.probe_group_size >= 2, "fusion.probe_group_size must be >= 2");
  require(fusion.probe_beta_kl >= 0.0, "fusion.probe_beta_kl must be >= 0");
  require(sft.epochs >= 0, "sft.epochs must be >= 0");
  require(sft.lr > 0.0, "sft.lr must be > 0");
  require(sft.dedupe.jaccard_max >= 0.0 && sft.dedupe.jaccard_max <= 1.0,
          "sft.jaccard_max must be in [0, 1]");
  require(sft.dedupe.cosine_max >= 0.0 && sft.dedupe.cosine_max <= 1.0,
          "sft.cosine_max must be in [0, 1]");
  require(rft.k >= 3, "rft.k must be >= 3");
  require(rft.sft_epochs >= 0, "rft.sft_epochs must be >= 0");
  require(rft.sft_lr > 0.0, "rft.sft_lr must be > 0");
  require(rft.dedupe.jaccard_max >= 0.0 && rft.dedupe.jaccard_max <= 1.0,
          "rft.jaccard_max must be in [0, 1]");
  require(rft.dedupe.cosine_max >= 0.0 && rft.dedupe.cosine_max <= 1.0,
          "rft.cosine_max must be in [0, 1]");
  require(eval.n_seeds >= 1, "eval.n_seeds must be >= 1");
  require(eval.ctr_impressions >= 1, "eval.ctr_impressions must be >= 1");
  require(eval.calibration_bins >= 3, "eval.calibration_bins must be >= 3");
  require(eval.calibration_min_count >= 1, "eval.calibration_min_count must be >= 1");
  require(eval.gsb_quantile >= 0.0 && eval.gsb_quantile <= 1.0,
          "eval.gsb_quantile must be in [0, 1]");
  require(eval.policy_shift_impressions >= 1, "eval.policy_shift_impressions must be >= 1");
}

RunConfig default_run_config() {
  RunConfig cfg;
  cfg.rm.train.lr = 3e-3;
  cfg.rm.train.epochs = 8;
  cfg.rm.train.lambda = 0.05;
  cfg.fusion.pareto_cfg.max_rounds = 3;
  return cfg;
}

RunConfig run_config_from_map(const std::map<std::string, std::string>& kv) {
  RunConfig cfg = default_run_config();
  KvReader r{kv};

  r.get("run.seed", cfg.seed);
  r.get("run.out_dir", cfg.out_dir);
  r.get("run.threads", cfg.threads);

  r.get("world.n_contexts", cfg.world.n_contexts);
  r.get("world.pool_size", cfg.world.pool_size);
  r.get("world.unsafe_fraction", cfg.world.unsafe_fraction);
  r.get("world.high_noise_fraction", cfg.world.high_noise_fraction);
  r.get("world.vocab_size", cfg.world.vocab_size);
  r.get_list("world.languages", cfg.world.languages);
  r.get("world.utility_sd", cfg.world.utility_sd);
  r.get("world.utility_mean", cfg.world.utility_mean);
  r.get("world.langmatch_gain", cfg.world.langmatch_gain);
  r.get("world.wordcount_gain", cfg.world.wordcount_gain);
  r.get("world.drift_step", cfg.world.drift_step);
  r.get("world.noise_sd_low", cfg.world.noise_sd_low);
  r.get("world.noise_sd_high", cfg.world.noise_sd_high);
  r.get("world.repeat_fraction", cfg.world.repeat_fraction);

  r.get("simulate.impressions", cfg.simulate.impressions);
  r.get("simulate.shift_week", cfg.simulate.shift_week);
  r.get("simulate.shift_impressions", cfg.simulate.shift_impressions);
  r.get("simulate.test_fraction", cfg.simulate.test_fraction);

  r.get("rm.hidden1", cfg.rm.hidden1);
  r.get("rm.hidden2", cfg.rm.hidden2);
  r.get("rm.epochs", cfg.rm.train.epochs);
  r.get("rm.batch_size", cfg.rm.train.batch_size);
  r.get("rm.lr", cfg.rm.train.lr);
  r.get("rm.beta1", cfg.rm.train.beta1);
  r.get("rm.beta2", cfg.rm.train.beta2);
  r.get("rm.clip_norm", cfg.rm.train.clip_norm);
  r.get("rm.lambda", cfg.rm.train.lambda);

  r.get("fusion.lambda_l2", cfg.fusion.lambda_l2);
  r.get("fusion.format_weight", cfg.fusion.format_weight);
  r.get("fusion.diversity_weight", cfg.fusion.diversity_weight);
  r.get("fusion.safety_weight", cfg.fusion.safety_weight);
  r.get("fusion.ppl_weight", cfg.fusion.ppl_weight);
  r.get("fusion.pareto", cfg.fusion.pareto);
  r.get("fusion.pareto_rounds", cfg.fusion.pareto_cfg.max_rounds);
  r.get("fusion.probe_steps", cfg.fusion.pareto_cfg.probe_steps);
  r.get("fusion.probe_window", cfg.fusion.pareto_cfg.window);
  r.get("fusion.alpha_up", cfg.fusion.pareto_cfg.alpha_up);
  r.get("fusion.alpha_down", cfg.fusion.pareto_cfg.alpha_down);
  r.get("fusion.dominance_share", cfg.fusion.pareto_cfg.dominance_share);
  r.get("fusion.trend_epsilon", cfg.fusion.pareto_cfg.trend_epsilon);
  r.get("fusion.probe_group_size", cfg.fusion.probe_group_size);
  r.get("fusion.probe_beta_kl", cfg.fusion.probe_beta_kl);

  r.get("sft.epochs", cfg.sft.epochs);
  r.get("sft.lr", cfg.sft.lr);
  r.get("sft.jaccard_max", cfg.sft.dedupe.jaccard_max);
  r.get("sft.cosine_max", cfg.sft.dedupe.cosine_max);

  r.get("grpo.group_size", cfg.grpo.group_size);
  r.get("grpo.beta_kl", cfg.grpo.beta_kl);
  r.get("grpo.clip_ratio", cfg.grpo.clip_ratio);
  r.get("grpo.lr", cfg.grpo.lr);
  r.get("grpo.steps", cfg.grpo.steps);
  r.get("grpo.refresh_every", cfg.grpo.refresh_every);
  r.get("grpo.standardize", cfg.grpo.standardize);
  r.get_anchor("grpo.anchor", cfg.grpo.anchor);

  r.get("rft.k", cfg.rft.k);
  r.get("rft.sft_epochs", cfg.rft.sft_epochs);
  r.get("rft.sft_lr", cfg.rft.sft_lr);
  r.get("rft.jaccard_max", cfg.rft.dedupe.jaccard_max);
  r.get("rft.cosine_max", cfg.rft.dedupe.cosine_max);

  r.get("eval.n_seeds", cfg.eval.n_seeds);
  r.get("eval.ctr_impressions", cfg.eval.ctr_impressions);
  r.get("eval.calibration_bins", cfg.eval.calibration_bins);
  r.get("eval.calibration_min_count", cfg.eval.calibration_min_count);
  r.get("eval.gsb_quantile", cfg.eval.gsb_quantile);
  r.get("eval.policy_shift_impressions", cfg.eval.policy_shift_impressions);

  r.done();
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  return run_config_from_map(parse_config_file(path));
}

std::string run_config_text(const RunConfig& cfg) {
  std::ostringstream out;
  out << "[run]\n";
  out << "seed = " << cfg.seed << "\n";
  out << "out_dir = " << cfg.out_dir << "\n";
  out << "threads = " << cfg.threads << "\n\n";

  out << "[world]\n";
  out << "n_contexts = " << cfg.world.n_contexts << "\n";
  out << "pool_size = " << cfg.world.pool_size << "\n";
  out << "unsafe_fraction = " << num(cfg.world.unsafe_fraction) << "\n";
  out << "high_noise_fraction = " << num(cfg.world.high_noise_fraction) << "\n";
  out << "vocab_size = " << cfg.world.vocab_size << "\n";
  out << "languages = ";
  for (std::size_t i = 0; i < cfg.world.languages.size(); ++i) {
    out << (i == 0 ? "" : ", ") << cfg.world.languages[i];
  }
  out << "\n";
  out << "utility_sd = " << num(cfg.world.utility_sd) << "\n";
  out << "utility_mean = " << num(cfg.world.utility_mean) << "\n";
  out << "langmatch_gain = " << num(cfg.world.langmatch_gain) << "\n";
  out << "wordcount_gain = " << num(cfg.world.wordcount_gain) << "\n";
  out << "drift_step = " << num(cfg.world.drift_step) << "\n";
  out << "noise_sd_low = " << num(cfg.world.noise_sd_low) << "\n";
  out << "noise_sd_high = " << num(cfg.world.noise_sd_high) << "\n";
  out << "repeat_fraction = " << num(cfg.world.repeat_fraction) << "\n\n";

  out << "[simulate]\n";
  out << "impressions = " << cfg.simulate.impressions << "\n";
  out << "shift_week = " << cfg.simulate.shift_week << "\n";
  out << "shift_impressions = " << cfg.simulate.shift_impressions << "\n";
  out << "test_fraction = " << num(cfg.simulate.test_fraction) << "\n\n";

  out << "[rm]\n";
  out << "hidden1 = " << cfg.rm.hidden1 << "\n";
  out << "hidden2 = " << cfg.rm.hidden2 << "\n";
  out << "epochs = " << cfg.rm.train.epochs << "\n";
  out << "batch_size = " << cfg.rm.train.batch_size << "\n";
  out << "lr = " << num(cfg.rm.train.lr) << "\n";
  out << "beta1 = " << num(cfg.rm.train.beta1) << "\n";
  out << "beta2 = " << num(cfg.rm.train.beta2) << "\n";
  out << "clip_norm = " << num(cfg.rm.train.clip_norm) << "\n";
  out << "lambda = " << num(cfg.rm.train.lambda) << "\n\n";

  out << "[fusion]\n";
  out << "lambda_l2 = " << num(cfg.fusion.lambda_l2) << "\n";
  out << "format_weight = " << num(cfg.fusion.format_weight) << "\n";
  out << "diversity_weight = " << num(cfg.fusion.diversity_weight) << "\n";
  out << "safety_weight = " << num(cfg.fusion.safety_weight) << "\n";
  out << "ppl_weight = " << num(cfg.fusion.ppl_weight) << "\n";
  out << "pareto = " << (cfg.fusion.pareto ? "true" : "false") << "\n";
  out << "pareto_rounds = " << cfg.fusion.pareto_cfg.max_rounds << "\n";
  out << "probe_steps = " << cfg.fusion.pareto_cfg.probe_steps << "\n";
  out << "probe_window = " << cfg.fusion.pareto_cfg.window << "\n";
  out << "alpha_up = " << num(cfg.fusion.pareto_cfg.alpha_up) << "\n";
  out << "alpha_down = " << num(cfg.fusion.pareto_cfg.alpha_down) << "\n";
  out << "dominance_share = " << num(cfg.fusion.pareto_cfg.dominance_share) << "\n";
  out << "trend_epsilon = " << num(cfg.fusion.pareto_cfg.trend_epsilon) << "\n";
  out << "probe_group_size = " << cfg.fusion.probe_group_size << "\n";
  out << "probe_beta_kl = " << num(cfg.fusion.probe_beta_kl) << "\n\n";

  out << "[sft]\n";
  out << "epochs = " << cfg.sft.epochs << "\n";
  out << "lr = " << num(cfg.sft.lr) << "\n";
  out << "jaccard_max = " << num(cfg.sft.dedupe.jaccard_max) << "\n";
  out << "cosine_max = " << num(cfg.sft.dedupe.cosine_max) << "\n\n";

  out << "[grpo]\n";
  out << "group_size = " << cfg.grpo.group_size << "\n";
  out << "beta_kl = " << num(cfg.grpo.beta_kl) << "\n";
  out << "clip_ratio = " << num(cfg.grpo.clip_ratio) << "\n";
  out << "lr = " << num(cfg.grpo.lr) << "\n";
  out << "steps = " << cfg.grpo.steps << "\n";
  out << "refresh_every = " << cfg.grpo.refresh_every << "\n";
  out << "standardize = " << (cfg.grpo.standardize ? "true" : "false") << "\n";
  out << "anchor = "
      << (cfg.grpo.anchor == GrpoConfig::Anchor::sft_reference ? "sft_reference"
                                                               : "old_policy")
      << "\n\n";

  out << "[rft]\n";
  out << "k = " << cfg.rft.k << "\n";
  out << "sft_epochs = " << cfg.rft.sft_epochs << "\n";
  out << "sft_lr = " << num(cfg.rft.sft_lr) << "\n";
  out << "jaccard_max = " << num(cfg.rft.dedupe.jaccard_max) << "\n";
  out << "cosine_max = " << num(cfg.rft.dedupe.cosine_max) << "\n\n";

  out << "[eval]\n";
  out << "n_seeds = " << cfg.eval.n_seeds << "\n";
  out << "ctr_impressions = " << cfg.eval.ctr_impressions << "\n";
  out << "calibration_bins = " << cfg.eval.calibration_bins << "\n";
  out << "calibration_min_count = " << cfg.eval.calibration_min_count << "\n";
  out << "gsb_quantile = " << num(cfg.eval.gsb_quantile) << "\n";
  out << "policy_shift_impressions = " << cfg.eval.policy_shift_impressions << "\n";
  return out.str();
}

std::string world_pool_fingerprint(const World& w) {
  std::string buf;
  for (const auto& pool : w.pools) {
    for (const auto& s : pool) {
      buf += std::to_string(s.id);
      buf += ':';
      buf += s.text;
      buf += ';';
      buf += s.language;
      buf += '\n';
    }
    buf += "--\n";
  }
  return fingerprint_bytes(buf);
}

// ----------------------------------------------------------- simulation

std::vector<ClickLogRecord> simulate_policy_logs(const World& w, const PolicyEnv& env,
                                                 const Policy& policy, std::int64_t n,
                                                 std::uint64_t seed,
                                                 const std::string& label) {
  if (n < 1) throw ConfigError("simulate_policy_logs: n must be >= 1");
  check_policy_matches(policy, w, "simulate_policy_logs");
  const auto n_ctx = static_cast<std::int64_t>(env.contexts.size());
  std::vector<ClickLogRecord> logs(static_cast<std::size_t>(n));
  const auto serve_one = [&](std::int64_t i) {
    const int ci = static_cast<int>(i % n_ctx);
    PolicyAction a;
    a.refuse = true;
    for (std::uint64_t t = 0; t < kRefuseRetries && a.refuse; ++t) {
      a = sample_action(policy, env, ci,
                        derive_stream(seed, 1, static_cast<std::uint64_t>(i), t))
              .action;
    }
    if (a.refuse) {  // policy refuses everything: serve a fixed fallback
      a.refuse = false;
      a.triple = {0, 1, 2};
    }
    ClickLogRecord rec =
        serve_and_click(w, env.contexts[static_cast<std::size_t>(ci)], a.triple,
                        derive_stream(seed, 2, static_cast<std::uint64_t>(i)));
    rec.serving_policy = label;
    logs[static_cast<std::size_t>(i)] = std::move(rec);
  };
  serve_one(0);  // validates the whole path before the parallel region
  par::for_each(n - 1, [&](std::int64_t i) { serve_one(i + 1); });
  return logs;
}

std::vector<PreferenceTriplet> policy_shift(const World& w, const PolicyEnv& env,
                                            const Policy& alt_policy, std::int64_t n,
                                            std::uint64_t seed) {
  const auto logs = simulate_policy_logs(w, env, alt_policy, n, seed, "rft_shifted");
  return curate_triplets(w, logs, Pos3Mode::two_negatives);
}

// ------------------------------------------------------------ rewarding

RewardFn make_fused_reward(const PolicyEnv& env, const FusionWeights& w,
                           const Scorer* rm, const ReferenceModel* ref) {
  if (rm != nullptr && rm->cfg.head == HeadKind::pair_logit) {
    throw std::invalid_argument(
        "make_fused_reward: the pair head cannot score single candidates");
  }
  // Score every candidate once up front; rollouts then average cached values.
  auto cache = std::make_shared<std::vector<std::vector<RmOutputs>>>();
  if (rm != nullptr) {
    cache->resize(env.cand_feats.size());
    for (std::size_t i = 0; i < env.cand_feats.size(); ++i) {
      (*cache)[i].resize(env.cand_feats[i].size());
    }
    if (!env.cand_feats.empty() && !env.cand_feats[0].empty()) {
      // Serial probe so a dimension mismatch fails before the parallel fill.
      if (rm->cfg.head == HeadKind::gaussian) {
        (void)garm_score(*rm, env.cand_feats[0][0]);
      } else {
        (void)btrm_score(*rm, env.cand_feats[0][0]);
      }
    }
    par::for_each(static_cast<std::int64_t>(env.cand_feats.size()), [&](std::int64_t i) {
      const auto ui = static_cast<std::size_t>(i);
      for (std::size_t j = 0; j < env.cand_feats[ui].size(); ++j) {
        if (rm->cfg.head == HeadKind::gaussian) {
          const GaussianScore g = garm_score(*rm, env.cand_feats[ui][j]);
          (*cache)[ui][j] = {g.mu, g.sigma};
        } else {
          (*cache)[ui][j] = {btrm_score(*rm, env.cand_feats[ui][j]), 0.0};
        }
      }
    });
  }
  const PolicyEnv* penv = &env;
  return [penv, w, cache, ref](const Context& ctx, int ctx_index,
                               const PolicyAction& a) -> RewardVector {
    const SuggestionGroup g = action_group(*penv, ctx_index, a);
    RmOutputs outs{};
    if (!a.refuse && !cache->empty()) {
      const auto& row = (*cache)[static_cast<std::size_t>(ctx_index)];
      for (int t = 0; t < 3; ++t) {
        const auto& o = row[static_cast<std::size_t>(a.triple[static_cast<std::size_t>(t)])];
        outs.rm += o.rm / 3.0;
        outs.rm_sigma += o.rm_sigma / 3.0;
      }
    }
    return composite_reward(w, ctx, g, outs, ref);
  };
}

SftAssembly assemble_teacher_sft(const World& w, const DedupeConfig& dedupe) {
  std::vector<std::vector<double>> scores;
  scores.reserve(w.contexts.size());
  for (const auto& ctx : w.contexts) scores.push_back(pool_utilities(w, ctx));
  return assemble_sft_data(w, scores, dedupe);
}

// ------------------------------------------------------------- commands

void cmd_simulate(const RunConfig& cfg) {
  cfg.validate();
  apply_threads(cfg);
  ensure_out_dir(cfg);
  const World w = gen_world(cfg.seed, cfg.world);
  save_world(w, path_in(cfg, kWorldFile));

  const Policy base = make_policy(cfg.world.featurizer());
  const PolicyEnv env = make_policy_env(w, w.contexts);
  save_click_logs(simulate_policy_logs(w, env, base, cfg.simulate.impressions,
                                       derive_stream(cfg.seed, 100), "base"),
                  path_in(cfg, kLogsFile));

  const PolicyEnv shifted_env =
      make_policy_env(w, temporal_shift(w, cfg.simulate.shift_week, w.cfg.drift_step));
  save_click_logs(simulate_policy_logs(w, shifted_env, base, cfg.simulate.shift_impressions,
                                       derive_stream(cfg.seed, 101), "base"),
                  path_in(cfg, kLogsShiftedFile));
}

void cmd_curate(const RunConfig& cfg) {
  cfg.validate();
  apply_threads(cfg);
  ensure_out_dir(cfg);
  const World w = load_world(path_in(cfg, kWorldFile));

  CurationStats base_stats{};
  const auto triplets = curate_triplets(w, load_click_logs(path_in(cfg, kLogsFile)),
                                        Pos3Mode::two_negatives, &base_stats);
  const int stride =
      std::max<int>(2, static_cast<int>(std::llround(1.0 / cfg.simulate.test_fraction)));
  std::vector<PreferenceTriplet> train, test;
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    (static_cast<int>(i % static_cast<std::size_t>(stride)) == stride - 1 ? test : train)
        .push_back(triplets[i]);
  }
  save_triplets(train, path_in(cfg, kTrainTripletsFile));
  save_triplets(test, path_in(cfg, kTestTripletsFile));

  CurationStats shift_stats{};
  save_triplets(curate_triplets(w, load_click_logs(path_in(cfg, kLogsShiftedFile)),
                                Pos3Mode::two_negatives, &shift_stats),
                path_in(cfg, kShiftedTripletsFile));

  std::ostringstream txt;
  const auto block = [&](const char* name, const CurationStats& st) {
    txt << name << ".records = " << st.records << "\n";
    txt << name << ".dropped_no_click = " << st.dropped_no_click << "\n";
    txt << name << ".dropped_position1 = " << st.dropped_position1 << "\n";
    txt << name << ".kept_records = " << st.kept_records << "\n";
    txt << name << ".triplets = " << st.triplets << "\n";
  };
  block("base", base_stats);
  block("shifted", shift_stats);
  txt << "split.train = " << train.size() << "\n";
  txt << "split.test = " << test.size() << "\n";
  write_text_file(path_in(cfg, kCurationFile), txt.str());
}

void cmd_train_rm(const RunConfig& cfg, HeadKind head) {
  cfg.validate();
  apply_threads(cfg);
  ensure_out_dir(cfg);
  const World w = load_world(path_in(cfg, kWorldFile));
  const FeaturizerConfig fc = w.cfg.featurizer();
  const std::string train_path = path_in(cfg, kTrainTripletsFile);
  const auto triplets = load_triplets(train_path);
  if (triplets.empty()) throw DataError(train_path + ": no training pairs");
  const auto pairs = featurize_triplets(w.contexts, triplets, fc);

  ScorerConfig sc;
  sc.head = head;
  sc.hidden1 = cfg.rm.hidden1;
  sc.hidden2 = cfg.rm.hidden2;
  sc.input_dim =
      head == HeadKind::pair_logit ? fc.context_dim + 2 * fc.dim() : fc.dim();
  const auto kind = static_cast<std::uint64_t>(head);
  Scorer s = make_scorer(sc, derive_stream(cfg.seed, 110, kind));
  TrainConfig tc = cfg.rm.train;
  tc.seed = derive_stream(cfg.seed, 111, kind);
  // Zero epochs checkpoints the freshly initialized scorer untouched.
  TrainResult res;
  if (tc.epochs > 0) {
    res = numeric_section([&] { return train_scorer(s, pairs, tc); });
  }

  save_scorer(s, {tc, fingerprint_file(train_path)}, rm_checkpoint_path(cfg, head));
  std::ostringstream csv;
  csv.precision(10);
  csv << "epoch,mean_loss,grad_norm\n";
  for (const auto& e : res.epochs) {
    csv << e.epoch << "," << e.mean_loss << "," << e.grad_norm << "\n";
  }
  write_text_file(path_in(cfg, "rm_" + std::string(rm_file_tag(head)) + "_trace.csv"),
                  csv.str());
}

void cmd_fuse(const RunConfig& cfg) {
  cfg.validate();
  apply_threads(cfg);
  ensure_out_dir(cfg);
  const World w = load_world(path_in(cfg, kWorldFile));
  const FeaturizerConfig fc = w.cfg.featurizer();

  // Reference model over the supervised corpus (utility-ranked triples).
  const SftAssembly assembly = assemble_teacher_sft(w, cfg.sft.dedupe);
  std::vector<std::string> corpus;
  for (const auto& ex : assembly.examples) {
    for (int t : ex.triple) {
      corpus.push_back(
          w.pools[static_cast<std::size_t>(ex.context_id)][static_cast<std::size_t>(t)].text);
    }
  }
  if (corpus.empty()) throw DataError("fuse: the supervised corpus is empty");
  const ReferenceModel ref = ReferenceModel::fit(corpus, kReferenceSmoothing);
  save_reference_model(ref, path_in(cfg, kReferenceFile));

  const Scorer rm = load_scorer(rm_checkpoint_path(cfg, HeadKind::gaussian));
  const auto triplets = load_triplets(path_in(cfg, kTrainTripletsFile));
  if (triplets.empty()) throw DataError("fuse: no training pairs");

  // Per-pair deltas of the per-suggestion components.  Group-level slots
  // (format, diversity, safety) cannot differ inside a pair, so their delta
  // is identically zero and the regularized fit returns ~0 for them; the
  // fluency delta exists but is click-blind noise (see FusionStageConfig).
  // Those four final weights come from the config below.
  std::vector<std::vector<double>> deltas(triplets.size(),
                                          std::vector<double>(kNumComponents, 0.0));
  const auto fill_delta = [&](std::int64_t i) {
    const auto& t = triplets[static_cast<std::size_t>(i)];
    const Context& ctx = w.contexts[static_cast<std::size_t>(t.context_id)];
    const auto parts = [&](const Suggestion& s) {
      std::array<double, kNumComponents> c{};
      SuggestionGroup solo;
      solo.suggestions.push_back(s);
      c[kLength] = length_reward(solo);
      c[kLanguage] = language_consistency_reward(ctx, solo);
      c[kRubric] = rubric_reward(ctx, s.text);
      c[kPpl] = ppl_reward(ref, s.text);
      const GaussianScore g = garm_score(rm, featurize(ctx, s, fc));
      c[kRm] = g.mu;
      c[kRmSigma] = g.sigma;
      return c;
    };
    const auto cw = parts(t.chosen);
    const auto cl = parts(t.rejected);
    for (int k = 0; k < kNumComponents; ++k) {
      deltas[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] =
          cw[static_cast<std::size_t>(k)] - cl[static_cast<std::size_t>(k)];
    }
  };
  fill_delta(0);  // validates dimensions before the parallel fill
  par::for_each(static_cast<std::int64_t>(triplets.size()) - 1,
                [&](std::int64_t i) { fill_delta(i + 1); });

  const FusionFitResult fit = numeric_section([&] {
    return fit_fusion_weights(deltas, cfg.fusion.lambda_l2, 1.0, 200,
                              derive_stream(cfg.seed, 120));
  });
  FusionWeights weights = fit.weights;
  weights.w[kFormat] = cfg.fusion.format_weight;
  weights.w[kDiversity] = cfg.fusion.diversity_weight;
  weights.w[kSafety] = cfg.fusion.safety_weight;
  weights.w[kPpl] = cfg.fusion.ppl_weight;
  // Spread is a penalty by contract: more-uncertain scores must never raise
  // the fused reward, whatever sign the delta fit produced.
  weights.w[kRmSigma] = -std::fabs(weights.w[kRmSigma]);

  if (cfg.fusion.pareto) {
    const PolicyEnv env = make_policy_env(w, w.contexts);
    const ProbeFn probe = [&](const FusionWeights& pw, int round) {
      GrpoConfig g = cfg.grpo;
      g.steps = cfg.fusion.pareto_cfg.probe_steps;
      g.group_size = cfg.fusion.probe_group_size;
      g.beta_kl = cfg.fusion.probe_beta_kl;
      g.anchor = GrpoConfig::Anchor::old_policy;
      g.seed = derive_stream(cfg.seed, 121, static_cast<std::uint64_t>(round));
      const RewardFn fn = make_fused_reward(env, pw, &rm, &ref);
      const GrpoTrainResult res =
          grpo_train(env, make_policy(fc), fn, g);
      std::vector<std::vector<double>> series;
      series.reserve(res.trace.size());
      for (const auto& tr : res.trace) {
        series.emplace_back(tr.stats.mean_components.begin(),
                            tr.stats.mean_components.end());
      }
      return series;
    };
    const ParetoResult tuned =
        numeric_section([&] { return pareto_tune(weights, probe, cfg.fusion.pareto_cfg); });
    weights = tuned.weights;
    write_text_file(path_in(cfg, kFusionLogFile), pareto_log_csv(tuned));
  }
  save_fusion_weights(weights, path_in(cfg, kFusionFile));
}

void cmd_train_rl(const RunConfig& cfg) {
  cfg.validate();
  apply_threads(cfg);
  ensure_out_dir(cfg);
  const World w = load_world(path_in(cfg, kWorldFile));
  const FeaturizerConfig fc = w.cfg.featurizer();
  const FusionWeights weights = load_fusion_weights(path_in(cfg, kFusionFile));
  const Scorer rm = load_scorer(rm_checkpoint_path(cfg, HeadKind::gaussian));
  const ReferenceModel ref = load_reference_model(path_in(cfg, kReferenceFile));
  const PolicyEnv env = make_policy_env(w, w.contexts);
  const std::string pool_fp = world_pool_fingerprint(w);

  const SftAssembly assembly = assemble_teacher_sft(w, cfg.sft.dedupe);
  if (assembly.examples.empty()) {
    throw DataError("train-rl: no supervised examples survived deduplication");
  }
  const SftFitResult sft = numeric_section([&] {
    return sft_fit(env, make_policy(fc), assembly.examples, cfg.sft.epochs, cfg.sft.lr,
                   derive_stream(cfg.seed, 130));
  });
  save_policy(sft.policy, pool_fp, path_in(cfg, kSftPolicyFile));
  save_sft_examples(assembly.examples, path_in(cfg, kSftDatasetFile));

  const RewardFn fn = make_fused_reward(env, weights, &rm, &ref);
  GrpoConfig g = cfg.grpo;
  g.seed = derive_stream(cfg.seed, 131);
  const GrpoTrainResult res = numeric_section(
      [&] { return grpo_train(env, sft.policy, fn, g, &sft.policy); });
  save_policy(res.policy, pool_fp, path_in(cfg, kRlPolicyFile));
  write_text_file(path_in(cfg, kRlTraceFile), grpo_trace_csv(res.trace));
}

void cmd_rft(const RunConfig& cfg) {
  cfg.validate();
  apply_threads(cfg);
  ensure_out_dir(cfg);
  const World w = load_world(path_in(cfg, kWorldFile));
  const Scorer rm = load_scorer(rm_checkpoint_path(cfg, HeadKind::gaussian));
  const PolicyEnv env = make_policy_env(w, w.contexts);

  Policy start = fs::exists(path_in(cfg, kSftPolicyFile))
                     ? load_policy(path_in(cfg, kSftPolicyFile))
                     : make_policy(w.cfg.featurizer());
  check_policy_matches(start, w, "rft");
  const RftResult res = numeric_section([&] {
    return rft_round(env, std::move(start), rm, cfg.rft.k, cfg.rft.dedupe,
                     cfg.rft.sft_epochs, cfg.rft.sft_lr, derive_stream(cfg.seed, 140));
  });
  save_policy(res.policy, world_pool_fingerprint(w), path_in(cfg, kRftPolicyFile));
  save_sft_examples(res.dataset, path_in(cfg, kRftDatasetFile));
}

void cmd_report(const RunConfig& cfg) {
  cfg.validate();
  apply_threads(cfg);
  ensure_out_dir(cfg);
  const World w = load_world(path_in(cfg, kWorldFile));
  const FeaturizerConfig fc = w.cfg.featurizer();
  const PolicyEnv env = make_policy_env(w, w.contexts);

  EvalReport rep;
  // Fingerprint the run semantics only: where artifacts land and how many
  // threads computed them cannot change any result byte.
  RunConfig semantic = cfg;
  semantic.out_dir = "run";
  semantic.threads = 0;
  rep.config_fingerprint = fingerprint_bytes(run_config_text(semantic));
  for (int s = 1; s <= cfg.eval.n_seeds; ++s) rep.seeds.push_back(s);

  std::vector<std::pair<std::string, Policy>> policies;
  policies.emplace_back("uniform", make_policy(fc));
  for (const char* name : {kSftPolicyFile, kRlPolicyFile, kRftPolicyFile}) {
    if (!fs::exists(path_in(cfg, name))) continue;
    Policy p = load_policy(path_in(cfg, name));
    check_policy_matches(p, w, "report");
    const std::string tag = std::string(name).substr(0, std::string(name).find('_'));
    policies.emplace_back(tag, std::move(p));
  }

  for (const auto& [tag, p] : policies) {
    for (int s = 1; s <= cfg.eval.n_seeds; ++s) {
      rep.ctr.push_back(
          {tag, s,
           ctr_estimate(p, env, cfg.eval.ctr_impressions,
                        derive_stream(cfg.seed, 160, static_cast<std::uint64_t>(s),
                                      fnv1a(tag)))});
    }
  }

  // Held-out preference datasets: matched, temporally drifted, and (when an
  // alternative policy exists) served by that policy.
  std::vector<std::pair<std::string, std::vector<PrefPair>>> datasets;
  if (fs::exists(path_in(cfg, kTestTripletsFile))) {
    const auto test = load_triplets(path_in(cfg, kTestTripletsFile));
    if (!test.empty()) {
      datasets.emplace_back("iid", featurize_triplets(w.contexts, test, fc));
    }
  }
  if (fs::exists(path_in(cfg, kShiftedTripletsFile))) {
    const auto shifted = load_triplets(path_in(cfg, kShiftedTripletsFile));
    if (!shifted.empty()) {
      const auto shifted_ctx = temporal_shift(w, cfg.simulate.shift_week, w.cfg.drift_step);
      datasets.emplace_back("temporal_shift", featurize_triplets(shifted_ctx, shifted, fc));
    }
  }
  if (fs::exists(path_in(cfg, kRftPolicyFile))) {
    Policy alt = load_policy(path_in(cfg, kRftPolicyFile));
    check_policy_matches(alt, w, "report");
    const auto shifted = policy_shift(w, env, alt, cfg.eval.policy_shift_impressions,
                                      derive_stream(cfg.seed, 150));
    if (!shifted.empty()) {
      datasets.emplace_back("policy_shift", featurize_triplets(w.contexts, shifted, fc));
    }
  }

  for (const HeadKind head : {HeadKind::scalar, HeadKind::pair_logit, HeadKind::gaussian}) {
    const std::string path = rm_checkpoint_path(cfg, head);
    if (!fs::exists(path) || datasets.empty()) continue;
    const Scorer s = load_scorer(path);
    const auto rows = ood_eval(s, datasets);
    for (const auto& row : rows) {
      rep.accuracy.push_back({std::string(rm_file_tag(head)) + ":" + row.dataset, 0, row});
    }
    if (head == HeadKind::gaussian && datasets.front().first == "iid" &&
        static_cast<std::int64_t>(datasets.front().second.size()) >=
            cfg.eval.calibration_min_count) {
      const auto bins = calibration_bins(s, datasets.front().second,
                                         cfg.eval.calibration_bins,
                                         cfg.eval.calibration_min_count);
      for (std::size_t b = 0; b < bins.size(); ++b) {
        rep.calibration.push_back({0, static_cast<int>(b), bins[b]});
      }
    }
  }

  // Side-by-side usefulness: sampled suggestion groups per policy, scored
  // against the utility-quantile threshold.
  const double threshold = utility_quantile(w, cfg.eval.gsb_quantile);
  const auto groups_for = [&](const Policy& p, const std::string& tag, int s) {
    std::vector<SuggestionGroup> gs;
    gs.reserve(env.contexts.size());
    for (std::size_t i = 0; i < env.contexts.size(); ++i) {
      const auto a =
          sample_action(p, env, static_cast<int>(i),
                        derive_stream(cfg.seed, 161, static_cast<std::uint64_t>(s),
                                      fnv1a(tag), static_cast<std::uint64_t>(i)))
              .action;
      gs.push_back(action_group(env, static_cast<int>(i), a));
    }
    return gs;
  };
  const auto find_policy = [&](const std::string& tag) -> const Policy* {
    for (const auto& [name, p] : policies) {
      if (name == tag) return &p;
    }
    return nullptr;
  };
  const std::pair<std::string, std::string> comparisons[] = {
      {"rl", "sft"}, {"rl", "uniform"}, {"rft", "sft"}};
  for (const auto& [a_tag, b_tag] : comparisons) {
    const Policy* pa = find_policy(a_tag);
    const Policy* pb = find_policy(b_tag);
    if (pa == nullptr || pb == nullptr) continue;
    for (int s = 1; s <= cfg.eval.n_seeds; ++s) {
      const auto ga = groups_for(*pa, a_tag, s);
      const auto gb = groups_for(*pb, b_tag, s);
      rep.gsb.push_back({a_tag + "_vs_" + b_tag, s,
                         gsb_proxy(w, env.contexts, ga, gb, threshold),
                         static_cast<std::int64_t>(env.contexts.size())});
    }
  }

  write_report(rep, cfg.out_dir + "/report");
}

void run_all(const RunConfig& cfg) {
  cmd_simulate(cfg);
  cmd_curate(cfg);
  cmd_train_rm(cfg, HeadKind::gaussian);
  cmd_fuse(cfg);
  cmd_train_rl(cfg);
  cmd_rft(cfg);
  cmd_report(cfg);
}

}  // namespace qs
