#include "qs/world.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <stdexcept>
#include <string>

#include "qs/probcore.hpp"
#include "qs/rng.hpp"

namespace qs {

namespace {

// Stream ids for derive_stream(seed, ...); fixed so a world is a pure
// function of (seed, cfg).
constexpr std::uint64_t kVocabStream = 101;
constexpr std::uint64_t kWeightStream = 102;
constexpr std::uint64_t kContextStream = 103;
constexpr std::uint64_t kPoolStream = 104;
constexpr std::uint64_t kShiftStream = 105;

// Two syllable banks give the languages visibly different surface texture;
// extra languages cycle through the banks with distinct word streams.
const std::vector<std::string>& syllable_bank(std::size_t lang_idx) {
  static const std::vector<std::string> a = {
      "al", "ben", "cor", "dim", "el",  "fan", "gor", "hin", "ir",  "jes", "kol",
      "lum", "mar", "nor", "ol",  "pra", "quin", "rel", "sot", "tur", "ul", "ven",
      "wor", "yel", "zan"};
  static const std::vector<std::string> b = {
      "eau", "bel", "cre", "deu", "es",  "fleu", "gra", "hui", "il",  "jou", "lu",
      "mon", "ne",  "ou",  "pre", "que", "ri",   "sou", "tre", "une", "vau", "yeu",
      "zo",  "che", "oi"};
  return (lang_idx % 2 == 0) ? a : b;
}

std::vector<std::string> make_vocab(std::uint64_t stream, std::size_t lang_idx, int size) {
  const std::vector<std::string>& syl = syllable_bank(lang_idx);
  Rng r(stream);
  std::vector<std::string> words;
  std::set<std::string> seen;
  while (static_cast<int>(words.size()) < size) {
    const int n = 2 + static_cast<int>(r.index(2));  // 2-3 syllables
    std::string w;
    for (int i = 0; i < n; ++i) w += syl[r.index(syl.size())];
    if (seen.insert(w).second) words.push_back(w);
  }
  return words;
}

// Zipf-flavored vocabulary sampling: squaring the uniform biases draws
// toward the head of the word list.
const std::string& sample_word(Rng& r, const std::vector<std::string>& vocab) {
  const double u = r.uniform();
  const std::size_t idx =
      std::min(vocab.size() - 1, static_cast<std::size_t>(u * u * vocab.size()));
  return vocab[idx];
}

std::string sample_text(Rng& r, const std::vector<std::string>& vocab, int min_words,
                        int max_words) {
  const int n = min_words + static_cast<int>(r.index(max_words - min_words + 1));
  std::string out;
  for (int i = 0; i < n; ++i) {
    if (i) out += ' ';
    out += sample_word(r, vocab);
  }
  return out;
}

void check_triple(const World& w, const Context& ctx, const std::array<int, 3>& triple) {
  const int pool = static_cast<int>(w.pools.at(static_cast<std::size_t>(ctx.id)).size());
  for (int id : triple) {
    if (id < 0 || id >= pool) {
      throw std::invalid_argument("serve_and_click: suggestion id " + std::to_string(id) +
                                  " outside pool of size " + std::to_string(pool));
    }
  }
  if (triple[0] == triple[1] || triple[0] == triple[2] || triple[1] == triple[2]) {
    throw std::invalid_argument("serve_and_click: triple has repeated suggestion ids");
  }
}

}  // namespace

void WorldConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("WorldConfig: " + msg); };
  if (n_contexts < 1) fail("n_contexts must be >= 1");
  if (pool_size < 6) fail("pool_size must be >= 6 (texture slots + a triple)");
  if (context_dim < kAmbientStart + 1) fail("context_dim too small");
  if (hash_dim < 8) fail("hash_dim must be >= 8");
  if (unsafe_fraction < 0.0 || unsafe_fraction >= 1.0) fail("unsafe_fraction outside [0,1)");
  if (high_noise_fraction < 0.0 || high_noise_fraction > 1.0) fail("high_noise_fraction outside [0,1]");
  if (vocab_size < 20) fail("vocab_size must be >= 20");
  if (languages.size() < 2) fail("need at least 2 languages for mismatch distractors");
  if (!(utility_sd > 0.0)) fail("utility_sd must be positive");
  if (noise_sd_low < 0.0 || noise_sd_high < 0.0) fail("noise sds must be >= 0");
  double prev = 1.0;
  for (double b : position_bias) {
    if (!(b > 0.0) || b > 1.0) fail("position_bias entries must be in (0,1]");
    if (b > prev) fail("position_bias must be non-increasing");
    prev = b;
  }
  if (repeat_fraction < 0.0 || repeat_fraction > 1.0) fail("repeat_fraction outside [0,1]");
}

World gen_world(std::uint64_t seed, const WorldConfig& cfg) {
  cfg.validate();
  World w;
  w.cfg = cfg;
  w.seed = seed;
  w.um.noise_sd_low = cfg.noise_sd_low;
  w.um.noise_sd_high = cfg.noise_sd_high;
  w.um.position_bias = cfg.position_bias;

  for (std::size_t li = 0; li < cfg.languages.size(); ++li) {
    w.vocab[cfg.languages[li]] =
        make_vocab(derive_stream(seed, kVocabStream, li), li, cfg.vocab_size);
  }

  // Contexts: language, safety flag, noise regime, feature block, history.
  w.contexts.resize(static_cast<std::size_t>(cfg.n_contexts));
  for (int i = 0; i < cfg.n_contexts; ++i) {
    Rng rc(derive_stream(seed, kContextStream, static_cast<std::uint64_t>(i)));
    Context& c = w.contexts[static_cast<std::size_t>(i)];
    c.id = i;
    const std::size_t li = rc.index(cfg.languages.size());
    c.language = cfg.languages[li];
    c.unsafe = rc.bernoulli(cfg.unsafe_fraction);
    c.high_noise = rc.bernoulli(cfg.high_noise_fraction);
    c.week = 0;
    c.features.assign(static_cast<std::size_t>(cfg.context_dim), 0.0);
    c.features[kRegimeCoord] = c.high_noise ? 1.0 : -1.0;
    c.features[kUnsafeCoord] = c.unsafe ? 1.0 : 0.0;
    for (int d = kAmbientStart; d < cfg.context_dim; ++d) {
      c.features[static_cast<std::size_t>(d)] = rc.normal();
    }
    const std::vector<std::string>& vc = w.vocab.at(c.language);
    const int n_prior = 1 + static_cast<int>(rc.index(2));
    for (int q = 0; q < n_prior; ++q) c.prior_queries.push_back(sample_text(rc, vc, 3, 5));
  }

  // Pools: regular candidates plus a paraphrase pair, one overlong text and
  // one language-mismatched distractor; order shuffled, ids = final index.
  w.pools.resize(static_cast<std::size_t>(cfg.n_contexts));
  for (int i = 0; i < cfg.n_contexts; ++i) {
    Rng rp(derive_stream(seed, kPoolStream, static_cast<std::uint64_t>(i)));
    const Context& c = w.contexts[static_cast<std::size_t>(i)];
    const std::vector<std::string>& vc = w.vocab.at(c.language);
    const std::size_t li = static_cast<std::size_t>(
        std::find(cfg.languages.begin(), cfg.languages.end(), c.language) -
        cfg.languages.begin());
    const std::string& other_lang = cfg.languages[(li + 1) % cfg.languages.size()];
    const std::vector<std::string>& vo = w.vocab.at(other_lang);

    std::vector<Suggestion> pool;
    // Paraphrase pair: one token swapped.
    {
      const std::string base = sample_text(rp, vc, 4, 6);
      std::vector<std::string> toks = tokenize(base);
      std::string& slot = toks[rp.index(toks.size())];
      const std::string original = slot;
      do {
        slot = sample_word(rp, vc);
      } while (slot == original);  // twin must differ in its swapped token
      std::string twin;
      for (std::size_t t = 0; t < toks.size(); ++t) {
        if (t) twin += ' ';
        twin += toks[t];
      }
      pool.push_back({0, base, c.language});
      pool.push_back({0, twin, c.language});
    }
    pool.push_back({0, sample_text(rp, vc, 14, 18), c.language});   // overlong
    pool.push_back({0, sample_text(rp, vo, 3, 7), other_lang});     // mismatch
    const bool repeat = rp.bernoulli(cfg.repeat_fraction) && !c.prior_queries.empty();
    for (int s = 4; s < cfg.pool_size; ++s) {
      if (s == 4 && repeat) {
        pool.push_back({0, c.prior_queries.front(), c.language});
      } else {
        pool.push_back({0, sample_text(rp, vc, 3, 7), c.language});
      }
    }
    rp.shuffle(pool);
    for (std::size_t s = 0; s < pool.size(); ++s) pool[s].id = static_cast<int>(s);
    w.pools[static_cast<std::size_t>(i)] = std::move(pool);
  }

  // Ground-truth utility weights: random over the hashed-text and ambient
  // context coordinates, rescaled to the target utility spread, then fixed
  // slopes for the word-count and language-match coordinates, then a bias
  // for the target mean.  The regime/unsafe indicator coordinates carry no
  // utility so noise level and safety stay orthogonal to quality.
  const FeaturizerConfig fc = cfg.featurizer();
  Rng rw(derive_stream(seed, kWeightStream));
  std::vector<double>& wt = w.um.utility_weights;
  wt.assign(static_cast<std::size_t>(fc.dim()), 0.0);
  for (int d = 0; d < fc.hash_dim; ++d) wt[static_cast<std::size_t>(d)] = rw.normal();
  for (int d = kAmbientStart; d < cfg.context_dim; ++d) {
    wt[static_cast<std::size_t>(fc.context_start() + d)] = rw.normal();
  }

  auto raw_stats = [&]() {
    double s1 = 0.0, s2 = 0.0;
    std::int64_t n = 0;
    for (const Context& c : w.contexts) {
      for (const Suggestion& s : w.pools[static_cast<std::size_t>(c.id)]) {
        const double u = utility(w, c, s);
        s1 += u;
        s2 += u * u;
        ++n;
      }
    }
    const double mean = s1 / static_cast<double>(n);
    return std::pair<double, double>{mean, std::sqrt(std::max(0.0, s2 / n - mean * mean))};
  };

  const auto [m0, s0] = raw_stats();
  (void)m0;
  if (s0 < 1e-9) throw std::runtime_error("gen_world: degenerate utility spread");
  for (double& x : wt) x *= cfg.utility_sd / s0;
  wt[static_cast<std::size_t>(fc.word_count_coord())] = -cfg.wordcount_gain;
  wt[static_cast<std::size_t>(fc.lang_match_coord())] = cfg.langmatch_gain;
  const auto [m1, s1] = raw_stats();
  (void)s1;
  w.um.utility_bias = cfg.utility_mean - m1;
  return w;
}

double utility(const World& w, const Context& ctx, const Suggestion& s) {
  const std::vector<double> f = featurize(ctx, s, w.cfg.featurizer());
  double u = w.um.utility_bias;
  for (std::size_t d = 0; d < f.size(); ++d) u += w.um.utility_weights[d] * f[d];
  return u;
}

std::vector<double> pool_utilities(const World& w, const Context& ctx) {
  const std::vector<Suggestion>& pool = w.pools.at(static_cast<std::size_t>(ctx.id));
  std::vector<double> out(pool.size());
  for (std::size_t s = 0; s < pool.size(); ++s) out[s] = utility(w, ctx, pool[s]);
  return out;
}

ClickLogRecord serve_and_click(const World& w, const Context& ctx,
                               const std::array<int, 3>& triple, std::uint64_t seed) {
  check_triple(w, ctx, triple);
  const std::vector<Suggestion>& pool = w.pools.at(static_cast<std::size_t>(ctx.id));
  Rng r(seed);
  ClickLogRecord rec;
  rec.context_id = ctx.id;
  rec.triple = triple;
  rec.week = ctx.week;
  for (int k = 0; k < 3; ++k) {
    if (!r.bernoulli(w.um.position_bias[static_cast<std::size_t>(k)])) continue;
    rec.examined[static_cast<std::size_t>(k)] = true;
    const double u = utility(w, ctx, pool[static_cast<std::size_t>(triple[static_cast<std::size_t>(k)])]);
    const double eps = r.normal(0.0, w.um.noise_sd(ctx));
    if (r.bernoulli(sigmoid(u + eps))) {
      rec.clicked_position = k + 1;
      break;  // first click wins; later positions never reached
    }
  }
  return rec;
}

std::vector<PreferenceTriplet> curate_triplets(const World& w,
                                               const std::vector<ClickLogRecord>& logs,
                                               Pos3Mode mode, CurationStats* stats) {
  CurationStats local;
  std::vector<PreferenceTriplet> out;
  for (const ClickLogRecord& rec : logs) {
    ++local.records;
    if (!rec.clicked_position.has_value()) {
      ++local.dropped_no_click;
      continue;
    }
    const int pos = *rec.clicked_position;
    if (pos == 1) {
      ++local.dropped_position1;
      continue;
    }
    ++local.kept_records;
    const std::vector<Suggestion>& pool = w.pools.at(static_cast<std::size_t>(rec.context_id));
    auto emit = [&](int neg_pos) {
      PreferenceTriplet t;
      t.context_id = rec.context_id;
      t.chosen = pool[static_cast<std::size_t>(rec.triple[static_cast<std::size_t>(pos - 1)])];
      t.rejected = pool[static_cast<std::size_t>(rec.triple[static_cast<std::size_t>(neg_pos - 1)])];
      t.week = rec.week;
      t.source_policy =
          rec.serving_policy == "rft_shifted" ? SourcePolicy::rft_shifted : SourcePolicy::base;
      out.push_back(std::move(t));
      ++local.triplets;
    };
    if (pos == 2) {
      emit(1);
    } else if (mode == Pos3Mode::two_negatives) {
      emit(1);
      emit(2);
    } else {
      emit(2);
    }
  }
  if (stats) *stats = local;
  return out;
}

std::vector<Context> temporal_shift(const World& w, int week, double drift_step) {
  if (week < 1) throw std::invalid_argument("temporal_shift: week must be >= 1");
  std::vector<Context> out = w.contexts;
  for (Context& c : out) {
    Rng rt(derive_stream(w.seed, kShiftStream, static_cast<std::uint64_t>(week),
                         static_cast<std::uint64_t>(c.id)));
    for (int d = kAmbientStart; d < w.cfg.context_dim; ++d) {
      c.features[static_cast<std::size_t>(d)] = week * drift_step + rt.normal();
    }
    c.week = week;
  }
  return out;
}

SftAssembly assemble_sft_data(const World& w,
                              const std::vector<std::vector<double>>& teacher_scores,
                              const DedupeConfig& cfg) {
  if (teacher_scores.size() != w.pools.size()) {
    throw std::invalid_argument("assemble_sft_data: scores/context count mismatch");
  }
  const FeaturizerConfig fc = w.cfg.featurizer();
  SftAssembly out;
  for (const Context& c : w.contexts) {
    const std::vector<Suggestion>& pool = w.pools[static_cast<std::size_t>(c.id)];
    const std::vector<double>& score = teacher_scores[static_cast<std::size_t>(c.id)];
    if (score.size() != pool.size()) {
      throw std::invalid_argument("assemble_sft_data: scores/pool size mismatch at context " +
                                  std::to_string(c.id));
    }
    std::vector<int> order(pool.size());
    for (std::size_t s = 0; s < pool.size(); ++s) order[s] = static_cast<int>(s);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(b)];
    });
    std::vector<std::vector<double>> feats(pool.size());
    std::vector<int> kept;
    for (int cand : order) {
      if (feats[static_cast<std::size_t>(cand)].empty()) {
        feats[static_cast<std::size_t>(cand)] = featurize(c, pool[static_cast<std::size_t>(cand)], fc);
      }
      bool ok = true;
      for (int prev : kept) {
        if (jaccard1(pool[static_cast<std::size_t>(cand)].text,
                     pool[static_cast<std::size_t>(prev)].text) > cfg.jaccard_max ||
            suggestion_cosine(feats[static_cast<std::size_t>(cand)],
                              feats[static_cast<std::size_t>(prev)], fc) > cfg.cosine_max) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      kept.push_back(cand);
      if (kept.size() == 3) break;
    }
    if (kept.size() < 3) {
      ++out.dropped_contexts;
      continue;
    }
    out.examples.push_back({c.id, {kept[0], kept[1], kept[2]}});
  }
  return out;
}

double examined_click_prob(double u, double noise_sd) {
  if (noise_sd == 0.0) return sigmoid(u);
  const int n = 8000;
  const double lo = -10.0, hi = 10.0;
  const double h = (hi - lo) / n;
  auto f = [&](double z) {
    return sigmoid(u + noise_sd * z) * std::exp(-0.5 * z * z) /
           std::sqrt(2.0 * std::numbers::pi);
  };
  double sum = 0.5 * (f(lo) + f(hi));
  for (int i = 1; i < n; ++i) sum += f(lo + i * h);
  return sum * h;
}

std::array<double, 4> scan_click_probs(const World& w, const Context& ctx,
                                       const std::array<int, 3>& triple) {
  check_triple(w, ctx, triple);
  const std::vector<Suggestion>& pool = w.pools.at(static_cast<std::size_t>(ctx.id));
  std::array<double, 4> out{};
  double reach = 1.0;  // P(no click so far)
  for (int k = 0; k < 3; ++k) {
    const double u = utility(w, ctx, pool[static_cast<std::size_t>(triple[static_cast<std::size_t>(k)])]);
    const double p = w.um.position_bias[static_cast<std::size_t>(k)] *
                     examined_click_prob(u, w.um.noise_sd(ctx));
    out[static_cast<std::size_t>(k)] = reach * p;
    reach *= 1.0 - p;
  }
  out[3] = reach;
  return out;
}

}  // namespace qs
