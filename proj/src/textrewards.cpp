#include "qs/textrewards.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>
#include <utility>

#include "qs/features.hpp"

namespace qs {
namespace {

bool is_blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(),
                     [](unsigned char c) { return std::isspace(c) != 0; });
}

// Case-folds, trims and collapses internal whitespace so that trivially
// restyled copies of a prior query still count as repetition.
std::string normalize_text(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (unsigned char c : s) {
    if (std::isspace(c) != 0) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

double length_score(const std::string& text) {
  const double words = static_cast<double>(tokenize(text).size());
  return std::min(1.0, std::max(0.0, 1.0 - (words - 12.0) / 5.0));
}

}  // namespace

double format_reward(const SuggestionGroup& g) {
  if (g.is_refusal) return 0.0;
  if (g.suggestions.size() != 3) return 0.0;
  for (const auto& s : g.suggestions) {
    if (s.text.empty() || is_blank(s.text)) return 0.0;
  }
  return 1.0;
}

double length_reward(const SuggestionGroup& g) {
  if (g.suggestions.empty()) {
    throw std::invalid_argument("length_reward: empty suggestion group");
  }
  double acc = 0.0;
  for (const auto& s : g.suggestions) acc += length_score(s.text);
  return acc / static_cast<double>(g.suggestions.size());
}

double language_consistency_reward(const Context& ctx, const SuggestionGroup& g) {
  if (g.suggestions.empty()) {
    throw std::invalid_argument("language_consistency_reward: empty suggestion group");
  }
  double acc = 0.0;
  for (const auto& s : g.suggestions) {
    if (ctx.language.empty() || s.language.empty()) {
      acc += 0.5;  // ambiguous tag
    } else if (ctx.language == s.language) {
      acc += 1.0;
    }
  }
  return acc / static_cast<double>(g.suggestions.size());
}

double diversity_reward(const SuggestionGroup& g) {
  if (g.suggestions.size() != 3) {
    throw std::invalid_argument("diversity_reward: group must have exactly 3 suggestions");
  }
  const double j01 = jaccard1(g.suggestions[0].text, g.suggestions[1].text);
  const double j02 = jaccard1(g.suggestions[0].text, g.suggestions[2].text);
  const double j12 = jaccard1(g.suggestions[1].text, g.suggestions[2].text);
  return 1.0 - (j01 + j02 + j12) / 3.0;
}

double safety_reward(const Context& ctx, const SuggestionGroup& g) {
  if (ctx.unsafe) return g.is_refusal ? 1.0 : -5.0;
  return g.is_refusal ? -5.0 : 0.0;
}

double rubric_reward(const Context& ctx, const std::string& text) {
  if (tokenize(text).size() <= 1) return 0.0;
  if (text.size() > 95) return 0.0;
  const std::string norm = normalize_text(text);
  for (const auto& prior : ctx.prior_queries) {
    if (normalize_text(prior) == norm) return 0.0;
  }
  return 1.0;
}

double rubric_group_reward(const Context& ctx, const SuggestionGroup& g) {
  if (g.suggestions.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& s : g.suggestions) acc += rubric_reward(ctx, s.text);
  return acc / static_cast<double>(g.suggestions.size());
}

// -------------------------------------------------------- reference model

ReferenceModel ReferenceModel::fit(const std::vector<std::string>& corpus, double k) {
  if (k < 0.0 || !std::isfinite(k)) {
    throw std::invalid_argument("ReferenceModel::fit: smoothing k must be finite and >= 0");
  }
  ReferenceModel m;
  m.k_ = k;
  m.vocab_["<unk>"] = 0;
  std::int64_t total_tokens = 0;
  for (const auto& text : corpus) {
    const auto toks = tokenize(text);
    for (const auto& t : toks) {
      if (m.vocab_.find(t) == m.vocab_.end()) {
        const int id = static_cast<int>(m.vocab_.size());
        m.vocab_[t] = id;
      }
    }
    total_tokens += static_cast<std::int64_t>(toks.size());
  }
  if (total_tokens == 0) {
    throw std::invalid_argument("ReferenceModel::fit: corpus has no tokens");
  }
  for (const auto& text : corpus) {
    const auto toks = tokenize(text);
    int prev = kBeginId;
    for (const auto& t : toks) {
      const int id = m.vocab_.at(t);
      ++m.bigrams_[{prev, id}];
      ++m.prev_totals_[prev];
      prev = id;
    }
  }
  return m;
}

ReferenceModel ReferenceModel::from_parts(std::map<std::string, int> vocab,
                                          std::map<std::pair<int, int>, std::int64_t> bigrams,
                                          std::map<int, std::int64_t> prev_totals, double k) {
  if (vocab.find("<unk>") == vocab.end()) {
    throw std::invalid_argument("ReferenceModel::from_parts: vocab must contain <unk>");
  }
  ReferenceModel m;
  m.vocab_ = std::move(vocab);
  m.bigrams_ = std::move(bigrams);
  m.prev_totals_ = std::move(prev_totals);
  m.k_ = k;
  return m;
}

int ReferenceModel::token_id(const std::string& t) const {
  const auto it = vocab_.find(t);
  return it != vocab_.end() ? it->second : vocab_.at("<unk>");
}

double ReferenceModel::cond_prob(const std::string& prev, const std::string& token) const {
  const int pid = (prev == "<s>") ? kBeginId : token_id(prev);
  const int tid = token_id(token);
  const double v = static_cast<double>(vocab_.size());
  const auto pt = prev_totals_.find(pid);
  const double denom = (pt != prev_totals_.end() ? static_cast<double>(pt->second) : 0.0) + k_ * v;
  if (denom == 0.0) return 1.0 / v;  // k = 0 and unseen conditioning token
  const auto bg = bigrams_.find({pid, tid});
  const double num = (bg != bigrams_.end() ? static_cast<double>(bg->second) : 0.0) + k_;
  return num / denom;
}

double ReferenceModel::mean_logprob(const std::string& text) const {
  const auto toks = tokenize(text);
  if (toks.empty()) {
    throw std::invalid_argument("ReferenceModel::mean_logprob: empty text");
  }
  std::string prev = "<s>";
  double acc = 0.0;
  for (const auto& t : toks) {
    acc += std::log(cond_prob(prev, t));
    prev = t;
  }
  return acc / static_cast<double>(toks.size());
}

double ppl_reward(const ReferenceModel& m, const std::string& text) {
  return m.mean_logprob(text);
}

double ppl_group_reward(const ReferenceModel& m, const SuggestionGroup& g) {
  if (g.suggestions.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& s : g.suggestions) acc += m.mean_logprob(s.text);
  return acc / static_cast<double>(g.suggestions.size());
}

// ------------------------------------------------------------- composition

RewardVector composite_reward(const FusionWeights& weights, const Context& ctx,
                              const SuggestionGroup& g, const RmOutputs& rm_outputs,
                              const ReferenceModel* ref) {
  if (weights.w.size() != static_cast<std::size_t>(kNumComponents)) {
    throw std::invalid_argument("composite_reward: expected " +
                                std::to_string(kNumComponents) + " weights, got " +
                                std::to_string(weights.w.size()));
  }
  RewardVector r;
  r.safety = safety_reward(ctx, g);
  if (!g.is_refusal && !g.suggestions.empty()) {
    r.format = format_reward(g);
    r.length = length_reward(g);
    r.language = language_consistency_reward(ctx, g);
    if (g.suggestions.size() == 3) r.diversity = diversity_reward(g);
    r.rubric = rubric_group_reward(ctx, g);
    if (ref != nullptr) r.ppl = ppl_group_reward(*ref, g);
    r.rm = rm_outputs.rm;
    r.rm_sigma = rm_outputs.rm_sigma;
  }
  const auto comps = r.components();
  double fused = 0.0;
  for (int i = 0; i < kNumComponents; ++i) fused += weights.w[static_cast<std::size_t>(i)] * comps[static_cast<std::size_t>(i)];
  r.fused = fused;
  return r;
}

}  // namespace qs
