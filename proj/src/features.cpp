#include "qs/features.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace qs {

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    if (j > i) out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

double jaccard1(const std::string& a, const std::string& b) {
  const std::vector<std::string> ta = tokenize(a);
  const std::vector<std::string> tb = tokenize(b);
  const std::unordered_set<std::string> sa(ta.begin(), ta.end());
  const std::unordered_set<std::string> sb(tb.begin(), tb.end());
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t inter = 0;
  for (const auto& t : sa) inter += sb.count(t);
  const std::size_t uni = sa.size() + sb.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<double> featurize(const Context& ctx, const Suggestion& s,
                              const FeaturizerConfig& cfg) {
  if (s.text.empty()) {
    throw std::invalid_argument("featurize: empty suggestion text (context " +
                                std::to_string(ctx.id) + ")");
  }
  if (static_cast<int>(ctx.features.size()) != cfg.context_dim) {
    throw std::invalid_argument("featurize: context block has dimension " +
                                std::to_string(ctx.features.size()) + ", expected " +
                                std::to_string(cfg.context_dim));
  }
  std::vector<double> f(static_cast<std::size_t>(cfg.dim()), 0.0);
  const std::vector<std::string> toks = tokenize(s.text);
  const auto bucket = [&](const std::string& gram) {
    return static_cast<std::size_t>(fnv1a(gram) % static_cast<std::uint64_t>(cfg.hash_dim));
  };
  for (std::size_t i = 0; i < toks.size(); ++i) {
    f[bucket(toks[i])] += 1.0;
    if (i + 1 < toks.size()) f[bucket(toks[i] + " " + toks[i + 1])] += 1.0;
  }
  const double words = static_cast<double>(std::min<std::size_t>(toks.size(), 20));
  f[static_cast<std::size_t>(cfg.word_count_coord())] = words / 12.0;
  double match = 0.5;  // ambiguous when either tag is missing
  if (!ctx.language.empty() && !s.language.empty()) {
    match = (ctx.language == s.language) ? 1.0 : 0.0;
  }
  f[static_cast<std::size_t>(cfg.lang_match_coord())] = match;
  std::copy(ctx.features.begin(), ctx.features.end(),
            f.begin() + cfg.context_start());
  return f;
}

double suggestion_cosine(const std::vector<double>& fa, const std::vector<double>& fb,
                         const FeaturizerConfig& cfg) {
  const std::size_t n = static_cast<std::size_t>(cfg.context_start());
  if (fa.size() < n || fb.size() < n) {
    throw std::invalid_argument("suggestion_cosine: feature vectors too short");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += fa[i] * fb[i];
    na += fa[i] * fa[i];
    nb += fb[i] * fb[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

}  // namespace qs
