#pragma once
// Synthetic conversational world: contexts with candidate suggestion pools,
// a latent-utility click model with positional bias, click-log generation,
// preference-triplet curation, diversity-aware top-3 assembly for the
// supervised baseline, and temporal drift.
//
// Ground truth: utility(ctx, s) = dot(w, featurize(ctx, s)) + bias, with w
// calibrated at generation time so utilities have a configured mean/spread.
// A user examines position k with probability position_bias[k], clicks an
// examined suggestion with probability sigmoid(utility + noise), and stops
// at the first click.  Curation keeps clicks at positions 2 and 3, pairing
// the clicked suggestion against earlier-positioned ones.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "qs/features.hpp"
#include "qs/types.hpp"

namespace qs {

struct WorldConfig {
  int n_contexts = 200;
  int pool_size = 8;          // >= 6 so every texture slot fits
  int context_dim = 16;
  int hash_dim = 46;
  double unsafe_fraction = 0.03;
  double high_noise_fraction = 0.5;
  int vocab_size = 160;       // words per language
  std::vector<std::string> languages = {"en", "fr"};
  double utility_sd = 1.5;    // calibrated spread of pool utilities
  double utility_mean = -0.5;
  double langmatch_gain = 2.0;   // utility lost by a language-mismatched text
  double wordcount_gain = 1.0;   // utility slope against the length coordinate
  double drift_step = 0.1;       // weekly mean shift of ambient coordinates
  double noise_sd_low = 0.5;     // click-noise regimes
  double noise_sd_high = 2.0;
  std::array<double, 3> position_bias{{1.0, 0.6, 0.4}};
  double repeat_fraction = 0.2;  // chance a pool member repeats a prior query

  FeaturizerConfig featurizer() const { return {hash_dim, context_dim}; }
  void validate() const;  // throws std::invalid_argument on degenerate values
};

struct UserModel {
  std::vector<double> utility_weights;  // over featurize() coordinates
  double utility_bias = 0.0;
  double noise_sd_low = 0.5;
  double noise_sd_high = 2.0;
  std::array<double, 3> position_bias{{1.0, 0.6, 0.4}};

  double noise_sd(const Context& ctx) const {
    return ctx.high_noise ? noise_sd_high : noise_sd_low;
  }
};

struct World {
  WorldConfig cfg;
  std::uint64_t seed = 0;
  std::vector<Context> contexts;
  std::vector<std::vector<Suggestion>> pools;  // indexed by context id
  UserModel um;
  std::map<std::string, std::vector<std::string>> vocab;  // language -> words
};

// Deterministic world generation; identical (seed, cfg) gives identical
// worlds.  Every pool contains a paraphrase pair, one overlong suggestion,
// and one language-mismatched distractor among regular candidates.
World gen_world(std::uint64_t seed, const WorldConfig& cfg);

double utility(const World& w, const Context& ctx, const Suggestion& s);
std::vector<double> pool_utilities(const World& w, const Context& ctx);

// Serves a triple of pool members to the simulated user.  Deterministic
// given seed; throws std::invalid_argument on malformed triples.
ClickLogRecord serve_and_click(const World& w, const Context& ctx,
                               const std::array<int, 3>& triple, std::uint64_t seed);

// How clicked-at-position-3 records turn into pairs: both earlier positions
// as negatives (default), or only position 2.
enum class Pos3Mode : std::uint8_t { two_negatives, position2_only };

struct CurationStats {
  std::int64_t records = 0;
  std::int64_t dropped_no_click = 0;
  std::int64_t dropped_position1 = 0;
  std::int64_t kept_records = 0;
  std::int64_t triplets = 0;
};

// Keeps records clicked at positions 2 or 3; chosen = clicked suggestion,
// rejected = earlier-positioned one(s) per mode.
std::vector<PreferenceTriplet> curate_triplets(const World& w,
                                               const std::vector<ClickLogRecord>& logs,
                                               Pos3Mode mode,
                                               CurationStats* stats = nullptr);

// Contexts re-sampled with every ambient coordinate's mean shifted by
// week * drift_step; regime/unsafe coordinates, flags, languages, pools and
// ground-truth weights are unchanged.  week >= 1.
std::vector<Context> temporal_shift(const World& w, int week, double drift_step);

struct DedupeConfig {
  double jaccard_max = 0.5;   // max pairwise 1-gram Jaccard within a triple
  double cosine_max = 0.98;   // max pairwise suggestion-feature cosine
};

struct SftExample {
  int context_id = 0;
  std::array<int, 3> triple{{-1, -1, -1}};  // pool ids, teacher-score order
};

struct SftAssembly {
  std::vector<SftExample> examples;
  std::int64_t dropped_contexts = 0;  // fewer than 3 survivors after dedup
};

// Ranks each context's pool by teacher score (the ground-truth utility in
// the default pipeline), greedily keeps candidates under both dedup
// thresholds, and emits the top 3.  scores[ctx][cand] must match pool shape.
SftAssembly assemble_sft_data(const World& w,
                              const std::vector<std::vector<double>>& teacher_scores,
                              const DedupeConfig& cfg);

// ------------------------------------------------------------- oracles
// E[sigmoid(u + noise)], noise ~ N(0, sd), by trapezoid quadrature; exact
// sigmoid(u) when sd = 0.  Used by the enumeration oracles and tests.
double examined_click_prob(double u, double noise_sd);

// Exact scan-tree probabilities for one served triple:
// {P(click at 1), P(click at 2), P(click at 3), P(no click)}.
std::array<double, 4> scan_click_probs(const World& w, const Context& ctx,
                                       const std::array<int, 3>& triple);

}  // namespace qs
