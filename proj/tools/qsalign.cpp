// Command-line front end for the alignment pipeline.
//
// Subcommands mirror the stage functions in qs/pipeline.hpp; global flags
// override the corresponding config keys.  Exit codes: 0 success, 2
// configuration error (bad flags, keys or values), 3 data error (missing or
// malformed artifacts), 4 numeric failure (non-finite training state).

#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "qs/io.hpp"
#include "qs/pipeline.hpp"

namespace {

struct Overrides {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out_dir;
  int threads = -1;
};

qs::RunConfig resolve_config(const Overrides& ov) {
  qs::RunConfig cfg = ov.config_path.empty() ? qs::default_run_config()
                                             : qs::load_run_config(ov.config_path);
  if (ov.seed_set) cfg.seed = ov.seed;
  if (!ov.out_dir.empty()) cfg.out_dir = ov.out_dir;
  if (ov.threads >= 0) cfg.threads = ov.threads;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"query-suggestion alignment pipeline"};
  app.require_subcommand(1);

  Overrides ov;
  app.add_option("--config", ov.config_path, "path to a key = value config file");
  app.add_option("--seed", ov.seed, "override run.seed")
      ->each([&](const std::string&) { ov.seed_set = true; });
  app.add_option("--out", ov.out_dir, "override run.out_dir");
  app.add_option("--threads", ov.threads, "override run.threads (0 = library default)");

  std::string rm_kind = "garm";
  int command = -1;
  const auto add = [&](const char* name, const char* desc, int id) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->callback([&command, id] { command = id; });
    return sub;
  };
  add("simulate", "generate the world snapshot and click logs", 0);
  add("curate", "turn click logs into preference pairs", 1);
  add("train-rm", "train a reward model on curated pairs", 2)
      ->add_option("--kind", rm_kind, "bt, paired, or garm")
      ->check(CLI::IsMember({"bt", "paired", "garm"}));
  add("fuse", "fit and tune reward-fusion weights", 3);
  add("train-rl", "fit the supervised baseline and optimize the policy", 4);
  add("rft", "run one rejection fine-tuning round", 5);
  add("report", "evaluate policies and reward models, write report tables", 6);
  add("run-all", "run the full chain in order", 7);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // help exits clean; every parse failure is a config error
  }

  try {
    const qs::RunConfig cfg = resolve_config(ov);
    switch (command) {
      case 0: qs::cmd_simulate(cfg); break;
      case 1: qs::cmd_curate(cfg); break;
      case 2: {
        const qs::HeadKind head = rm_kind == "bt"       ? qs::HeadKind::scalar
                                  : rm_kind == "paired" ? qs::HeadKind::pair_logit
                                                        : qs::HeadKind::gaussian;
        qs::cmd_train_rm(cfg, head);
        break;
      }
      case 3: qs::cmd_fuse(cfg); break;
      case 4: qs::cmd_train_rl(cfg); break;
      case 5: qs::cmd_rft(cfg); break;
      case 6: qs::cmd_report(cfg); break;
      case 7: qs::run_all(cfg); break;
      default: std::fprintf(stderr, "error: no command selected\n"); return 2;
    }
  } catch (const qs::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const qs::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 4;
  } catch (const qs::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  }
  return 0;
}
