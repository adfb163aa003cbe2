#pragma once
// Joint (context, suggestion) feature representation.
//
// Layout of one feature vector, dimension = hash_dim + 2 + context_dim:
//   [0, hash_dim)        hashed token 1-gram and 2-gram counts (FNV-1a)
//   [hash_dim]           normalized word count, min(words, 20) / 12
//   [hash_dim + 1]       language match: 1 match, 0 mismatch, 0.5 ambiguous
//   [hash_dim + 2, ...)  the context feature block, copied verbatim
// The simulator's ground-truth utility is linear in this same vector, which
// keeps the reward-model learning problem well-posed by construction.

#include <cstdint>
#include <string>
#include <vector>

#include "qs/types.hpp"

namespace qs {

struct FeaturizerConfig {
  int hash_dim = 46;
  int context_dim = 16;
  int dim() const { return hash_dim + 2 + context_dim; }
  int word_count_coord() const { return hash_dim; }
  int lang_match_coord() const { return hash_dim + 1; }
  int context_start() const { return hash_dim + 2; }
};

// Whitespace tokenization; a "word" is any maximal non-space run.
std::vector<std::string> tokenize(const std::string& text);

// FNV-1a 64-bit; platform-independent bucket hashing for the n-gram block.
std::uint64_t fnv1a(const std::string& s);

// 1-gram Jaccard similarity of two texts' token sets; 1.0 when both empty.
double jaccard1(const std::string& a, const std::string& b);

// Deterministic feature vector; throws std::invalid_argument on empty text
// or a context block of the wrong dimension.
std::vector<double> featurize(const Context& ctx, const Suggestion& s,
                              const FeaturizerConfig& cfg);

// Cosine similarity restricted to the suggestion-derived slice (hash block,
// word count, language match).  The shared context block is excluded so the
// value reflects the two texts, not the context they have in common.
double suggestion_cosine(const std::vector<double>& fa, const std::vector<double>& fb,
                         const FeaturizerConfig& cfg);

}  // namespace qs
