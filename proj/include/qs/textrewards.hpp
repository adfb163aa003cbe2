#pragma once
// Composite reward suite for suggestion groups: rule-based checks (format,
// length, language consistency, diversity, safety), a deterministic quality
// rubric, a smoothed-bigram reference model whose mean log-probability acts
// as an in-distribution reward, and the weighted fusion into one scalar.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "qs/types.hpp"

namespace qs {

// Component order is the contract for weight vectors, CSV columns and
// checkpoint files; keep kComponentNames aligned with RewardVector fields.
inline constexpr int kNumComponents = 9;
inline constexpr std::array<const char*, kNumComponents> kComponentNames = {
    "format", "length", "language", "diversity", "safety",
    "rubric", "ppl",    "rm",       "rm_sigma"};

struct RewardVector {
  double format = 0.0;     // {0,1}: exactly three nonempty suggestions
  double length = 0.0;     // [0,1]: mean per-suggestion length score
  double language = 0.0;   // [0,1]: fraction matching the context language
  double diversity = 0.0;  // [0,1]: 1 - mean pairwise 1-gram Jaccard
  double safety = 0.0;     // {+1, 0, -5}: refusal correctness
  double rubric = 0.0;     // [0,1]: mean binary quality rubric
  double ppl = 0.0;        // <= 0: mean log-prob under the reference model
  double rm = 0.0;         // learned reward model output (mu or score)
  double rm_sigma = 0.0;   // >= 0: model sigma; its fusion weight is negative
  double fused = 0.0;      // dot(weights, components)

  std::array<double, kNumComponents> components() const {
    return {format, length, language, diversity, safety, rubric, ppl, rm, rm_sigma};
  }
};

// Weights over RewardVector components.  Lives here rather than with the
// fitting code because composite_reward consumes it.
struct FusionWeights {
  std::vector<double> w;  // size kNumComponents
  double lambda_l2 = 0.0;
  enum class Provenance : std::uint8_t { initial_lr, pareto_tuned } provenance =
      Provenance::initial_lr;
};

// ------------------------------------------------------------ rule rewards

// 1.0 iff the group has exactly 3 nonempty suggestions and is not a refusal;
// no partial credit.
double format_reward(const SuggestionGroup& g);

// Per suggestion min(1, max(0, 1 - (words - 12)/5)), averaged over the
// group.  Throws std::invalid_argument on an empty group.
double length_reward(const SuggestionGroup& g);

// Fraction of suggestions whose language tag matches the context tag;
// a missing tag on either side counts 0.5 (ambiguous).
double language_consistency_reward(const Context& ctx, const SuggestionGroup& g);

// 1 - mean of the three pairwise 1-gram Jaccard similarities; requires
// exactly 3 suggestions.
double diversity_reward(const SuggestionGroup& g);

// unsafe+refusal +1, unsafe+normal -5, safe+refusal -5, safe+normal 0.
double safety_reward(const Context& ctx, const SuggestionGroup& g);

// Deterministic binary rubric on one suggestion: fails on single-token
// stubs, near-verbatim repetition of a prior query (case/spacing
// insensitive), and texts longer than 95 characters counting spaces.
double rubric_reward(const Context& ctx, const std::string& text);

// Mean rubric over the group's suggestions (0 for empty/refusal groups).
double rubric_group_reward(const Context& ctx, const SuggestionGroup& g);

// -------------------------------------------------------- reference model

// Conditioning id used for the begin-of-text position; spelled "<s>" in the
// string-facing API.  Real tokens get ids >= 0 (0 is <unk>).
inline constexpr int kBeginId = -1;

// Add-k smoothed bigram model over suggestion texts, with a begin-of-text
// token and an <unk> bucket so every query scores finitely.
class ReferenceModel {
 public:
  // Fits on a corpus of suggestion texts (the assembled supervised data in
  // the pipeline).  k >= 0; an unseen conditioning token falls back to the
  // uniform distribution when k = 0.  Throws on an empty corpus.
  static ReferenceModel fit(const std::vector<std::string>& corpus, double k);

  // P(token | prev); both are mapped to <unk> when out of vocabulary.
  double cond_prob(const std::string& prev, const std::string& token) const;

  // Mean per-token log-probability of the text, <= 0; begin-of-text is the
  // first conditioning token.  Throws on empty text.
  double mean_logprob(const std::string& text) const;

  std::size_t vocab_size() const { return vocab_.size(); }
  double smoothing_k() const { return k_; }

  const std::map<std::string, int>& vocab() const { return vocab_; }
  const std::map<std::pair<int, int>, std::int64_t>& bigram_counts() const { return bigrams_; }
  const std::map<int, std::int64_t>& prev_counts() const { return prev_totals_; }

  // Rebuilds a fitted model from serialized pieces (checkpoint loading).
  static ReferenceModel from_parts(std::map<std::string, int> vocab,
                                   std::map<std::pair<int, int>, std::int64_t> bigrams,
                                   std::map<int, std::int64_t> prev_totals, double k);

 private:
  ReferenceModel() = default;
  int token_id(const std::string& t) const;

  std::map<std::string, int> vocab_;  // token -> id; includes <unk>
  std::map<std::pair<int, int>, std::int64_t> bigrams_;
  std::map<int, std::int64_t> prev_totals_;
  double k_ = 0.5;
};

// Mean log-probability reward of one suggestion (alias with the reward
// suite's naming); group reward is the mean over suggestions.
double ppl_reward(const ReferenceModel& m, const std::string& text);
double ppl_group_reward(const ReferenceModel& m, const SuggestionGroup& g);

// ------------------------------------------------------------- composition

struct RmOutputs {
  double rm = 0.0;
  double rm_sigma = 0.0;
};

// Fills every component for the group and fuses them under `weights`.
// Refusal groups: the text-derived components read 0 and only safety (and
// the weights) decide the fused value.  `ref` may be null (ppl reads 0).
RewardVector composite_reward(const FusionWeights& weights, const Context& ctx,
                              const SuggestionGroup& g, const RmOutputs& rm_outputs,
                              const ReferenceModel* ref);

}  // namespace qs
