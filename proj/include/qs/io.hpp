#pragma once
// Persistence and configuration plumbing: versioned JSON checkpoints
// (scorers, policies, fusion weights, reference models, world snapshots),
// JSONL datasets (click logs, preference triplets, supervised triples), a
// strict line-oriented configuration format, and dataset fingerprints.
//
// Every writer produces byte-identical output for identical inputs: JSON
// objects are emitted with sorted keys and shortest round-trip number
// formatting, JSONL rows in input order, and no file carries timestamps,
// hostnames or other environment residue.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "qs/grpo.hpp"
#include "qs/rmodels.hpp"
#include "qs/textrewards.hpp"
#include "qs/types.hpp"
#include "qs/world.hpp"

namespace qs {

// Error taxonomy used for the command-line tool's exit codes: configuration
// problems (bad keys/values/flags), data problems (missing or malformed
// files), and numeric failures (non-finite training state).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// FNV-1a over the byte string, rendered as 16 lowercase hex digits.  Used
// to stamp checkpoints with the identity of the data they were fit on.
std::string fingerprint_bytes(const std::string& bytes);
std::string fingerprint_file(const std::string& path);  // throws DataError

// Reads a whole file; throws DataError naming the path when unreadable.
std::string read_text_file(const std::string& path);
// Writes bytes exactly; throws DataError naming the path on failure.
void write_text_file(const std::string& path, const std::string& bytes);

// ------------------------------------------------------ JSON checkpoints
// All checkpoint loaders validate a "format" tag and "version" number and
// throw DataError on anything unexpected, so stale or foreign files fail
// loudly instead of half-loading.

struct ScorerCheckpointMeta {
  TrainConfig train;             // echo of the training configuration
  std::string data_fingerprint;  // fingerprint of the training dataset file
};

void save_scorer(const Scorer& s, const ScorerCheckpointMeta& meta,
                 const std::string& path);
Scorer load_scorer(const std::string& path, ScorerCheckpointMeta* meta = nullptr);

// The pool fingerprint ties a policy to the world snapshot it was trained
// against; loaders hand it back so callers can refuse mismatched worlds.
void save_policy(const Policy& p, const std::string& pool_fingerprint,
                 const std::string& path);
Policy load_policy(const std::string& path, std::string* pool_fingerprint = nullptr);

// Component names are stored alongside the weights and checked on load
// against kComponentNames, so a reordering of the reward vector cannot
// silently reinterpret a weights file.
void save_fusion_weights(const FusionWeights& w, const std::string& path);
FusionWeights load_fusion_weights(const std::string& path);

void save_reference_model(const ReferenceModel& m, const std::string& path);
ReferenceModel load_reference_model(const std::string& path);

void save_world(const World& w, const std::string& path);
World load_world(const std::string& path);

// -------------------------------------------------------- JSONL datasets

void save_click_logs(const std::vector<ClickLogRecord>& logs, const std::string& path);
std::vector<ClickLogRecord> load_click_logs(const std::string& path);

void save_triplets(const std::vector<PreferenceTriplet>& ts, const std::string& path);
std::vector<PreferenceTriplet> load_triplets(const std::string& path);

void save_sft_examples(const std::vector<SftExample>& xs, const std::string& path);
std::vector<SftExample> load_sft_examples(const std::string& path);

// ----------------------------------------------------------- config text
// Line-oriented "[section]" / "key = value" format, '#' starts a comment,
// blank lines ignored.  Returned keys are flattened to "section.key".
// Malformed lines, empty keys/values and duplicate keys raise ConfigError
// naming the offender; validation of *which* keys are allowed lives with
// the consumer (see run_config_from_map in pipeline.hpp).
std::map<std::string, std::string> parse_config_text(const std::string& text);
std::map<std::string, std::string> parse_config_file(const std::string& path);

}  // namespace qs
