#pragma once
// Shared data model: contexts, candidate suggestions, click-log records,
// preference triplets, and suggestion groups.  These are plain structs; the
// behavior lives in world.hpp (simulator), features.hpp (representation),
// and the reward/policy modules.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace qs {

// Context feature-block layout (filled by gen_world): coordinate 0 encodes
// the click-noise regime (+1 high, -1 low), coordinate 1 the unsafe flag
// (0/1); the remaining "ambient" coordinates are N(mean, 1) draws whose mean
// drifts across weeks.  Models see this block verbatim via featurize().
inline constexpr int kRegimeCoord = 0;
inline constexpr int kUnsafeCoord = 1;
inline constexpr int kAmbientStart = 2;

struct Context {
  int id = 0;
  std::vector<double> features;            // dim = WorldConfig::context_dim
  std::string language;                    // tag such as "en"
  bool unsafe = false;                     // should be refused
  bool high_noise = false;                 // click-noise regime
  int week = 0;                            // 0 = training-time distribution
  std::vector<std::string> prior_queries;  // conversation history analog
};

struct Suggestion {
  int id = 0;            // index within its context's candidate pool
  std::string text;
  std::string language;  // tag of the text itself
};

// One served triple with its examination/click outcome.
struct ClickLogRecord {
  int context_id = 0;
  std::array<int, 3> triple{{-1, -1, -1}};     // suggestion ids by position
  std::array<bool, 3> examined{{false, false, false}};
  std::optional<int> clicked_position;         // 1-based, absent = no click
  int week = 0;
  std::string serving_policy = "base";
};

enum class SourcePolicy : std::uint8_t { base, rft_shifted };

// Curated preference pair: the clicked suggestion beat an earlier-positioned
// one.  Full suggestion records are kept so features can be recomputed.
struct PreferenceTriplet {
  int context_id = 0;
  Suggestion chosen;
  Suggestion rejected;
  int week = 0;
  SourcePolicy source_policy = SourcePolicy::base;
};

// What a policy emits for one context: three ordered suggestions, or a
// refusal (empty list, is_refusal set).
struct SuggestionGroup {
  std::vector<Suggestion> suggestions;
  bool is_refusal = false;
};

}  // namespace qs
