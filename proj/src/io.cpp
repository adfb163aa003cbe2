#include "qs/io.hpp"

#include <fstream>
#include <sstream>
#include <utility>

#include "json.hpp"

namespace qs {

using nlohmann::json;

namespace {

constexpr int kCheckpointVersion = 1;

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

json parse_json_checkpoint(const std::string& path, const std::string& format) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw DataError(path + ": not valid JSON: " + e.what());
  }
  if (!j.is_object() || j.value("format", "") != format) {
    throw DataError(path + ": expected a \"" + format + "\" checkpoint");
  }
  if (j.value("version", -1) != kCheckpointVersion) {
    throw DataError(path + ": unsupported checkpoint version");
  }
  return j;
}

void write_json(const json& j, const std::string& path) {
  write_text_file(path, j.dump(2) + "\n");
}

// Wraps nlohmann's typed accessors so a missing or mistyped field reports
// the file and field instead of a bare type error.
template <class T>
T field(const json& j, const std::string& path, const std::string& name) {
  if (!j.contains(name)) throw DataError(path + ": missing field \"" + name + "\"");
  try {
    return j.at(name).get<T>();
  } catch (const json::exception&) {
    throw DataError(path + ": field \"" + name + "\" has the wrong type");
  }
}

const char* source_policy_name(SourcePolicy p) {
  return p == SourcePolicy::rft_shifted ? "rft_shifted" : "base";
}

SourcePolicy source_policy_from(const std::string& s, const std::string& path) {
  if (s == "base") return SourcePolicy::base;
  if (s == "rft_shifted") return SourcePolicy::rft_shifted;
  throw DataError(path + ": unknown source_policy \"" + s + "\"");
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      lines.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) lines.push_back(cur);
  return lines;
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::string fingerprint_bytes(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return hex64(h);
}

std::string fingerprint_file(const std::string& path) {
  return fingerprint_bytes(read_text_file(path));
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw DataError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw DataError("read failed on " + path);
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out.good()) throw DataError("cannot write " + path);
  out << bytes;
  out.flush();
  if (!out.good()) throw DataError("write failed on " + path);
}

// ------------------------------------------------------- scorer checkpoint

namespace {

json train_config_json(const TrainConfig& tc) {
  return json{{"epochs", tc.epochs},       {"batch_size", tc.batch_size},
              {"lr", tc.lr},               {"beta1", tc.beta1},
              {"beta2", tc.beta2},         {"adam_eps", tc.adam_eps},
              {"clip_norm", tc.clip_norm}, {"lambda", tc.lambda},
              {"seed", tc.seed},           {"parallel", tc.parallel}};
}

TrainConfig train_config_from(const json& j, const std::string& path) {
  TrainConfig tc;
  tc.epochs = field<int>(j, path, "epochs");
  tc.batch_size = field<int>(j, path, "batch_size");
  tc.lr = field<double>(j, path, "lr");
  tc.beta1 = field<double>(j, path, "beta1");
  tc.beta2 = field<double>(j, path, "beta2");
  tc.adam_eps = field<double>(j, path, "adam_eps");
  tc.clip_norm = field<double>(j, path, "clip_norm");
  tc.lambda = field<double>(j, path, "lambda");
  tc.seed = field<std::uint64_t>(j, path, "seed");
  tc.parallel = field<bool>(j, path, "parallel");
  return tc;
}

}  // namespace

void save_scorer(const Scorer& s, const ScorerCheckpointMeta& meta,
                 const std::string& path) {
  json j{{"format", "qsalign.scorer"},
         {"version", kCheckpointVersion},
         {"head", head_name(s.cfg.head)},
         {"input_dim", s.cfg.input_dim},
         {"hidden1", s.cfg.hidden1},
         {"hidden2", s.cfg.hidden2},
         {"params", s.params},
         {"train_config", train_config_json(meta.train)},
         {"data_fingerprint", meta.data_fingerprint}};
  write_json(j, path);
}

Scorer load_scorer(const std::string& path, ScorerCheckpointMeta* meta) {
  const json j = parse_json_checkpoint(path, "qsalign.scorer");
  Scorer s;
  s.cfg.head = head_from_name(field<std::string>(j, path, "head"));
  s.cfg.input_dim = field<int>(j, path, "input_dim");
  s.cfg.hidden1 = field<int>(j, path, "hidden1");
  s.cfg.hidden2 = field<int>(j, path, "hidden2");
  s.cfg.validate();
  s.params = field<std::vector<double>>(j, path, "params");
  if (s.params.size() != s.cfg.param_count()) {
    throw DataError(path + ": parameter count does not match the architecture");
  }
  if (meta != nullptr) {
    meta->train = train_config_from(field<json>(j, path, "train_config"), path);
    meta->data_fingerprint = field<std::string>(j, path, "data_fingerprint");
  }
  return s;
}

// ------------------------------------------------------- policy checkpoint

void save_policy(const Policy& p, const std::string& pool_fingerprint,
                 const std::string& path) {
  json j{{"format", "qsalign.policy"},
         {"version", kCheckpointVersion},
         {"select_w", p.select_w},
         {"refuse_w", p.refuse_w},
         {"refuse_b", p.refuse_b},
         {"temperature", p.temperature},
         {"pool_fingerprint", pool_fingerprint}};
  write_json(j, path);
}

Policy load_policy(const std::string& path, std::string* pool_fingerprint) {
  const json j = parse_json_checkpoint(path, "qsalign.policy");
  Policy p;
  p.select_w = field<std::vector<double>>(j, path, "select_w");
  p.refuse_w = field<std::vector<double>>(j, path, "refuse_w");
  p.refuse_b = field<double>(j, path, "refuse_b");
  p.temperature = field<double>(j, path, "temperature");
  if (p.select_w.empty() || p.refuse_w.empty() || !(p.temperature > 0.0)) {
    throw DataError(path + ": degenerate policy parameters");
  }
  if (pool_fingerprint != nullptr) {
    *pool_fingerprint = field<std::string>(j, path, "pool_fingerprint");
  }
  return p;
}

// ------------------------------------------------------- fusion weights

void save_fusion_weights(const FusionWeights& w, const std::string& path) {
  std::vector<std::string> names(kComponentNames.begin(), kComponentNames.end());
  json j{{"format", "qsalign.fusion"},
         {"version", kCheckpointVersion},
         {"components", names},
         {"weights", w.w},
         {"lambda_l2", w.lambda_l2},
         {"provenance", w.provenance == FusionWeights::Provenance::pareto_tuned
                            ? "pareto_tuned"
                            : "initial_lr"}};
  write_json(j, path);
}

FusionWeights load_fusion_weights(const std::string& path) {
  const json j = parse_json_checkpoint(path, "qsalign.fusion");
  const auto names = field<std::vector<std::string>>(j, path, "components");
  if (names.size() != static_cast<std::size_t>(kNumComponents)) {
    throw DataError(path + ": wrong component count");
  }
  for (int i = 0; i < kNumComponents; ++i) {
    if (names[static_cast<std::size_t>(i)] != kComponentNames[static_cast<std::size_t>(i)]) {
      throw DataError(path + ": component order mismatch at \"" +
                      names[static_cast<std::size_t>(i)] + "\"");
    }
  }
  FusionWeights w;
  w.w = field<std::vector<double>>(j, path, "weights");
  if (w.w.size() != static_cast<std::size_t>(kNumComponents)) {
    throw DataError(path + ": wrong weight count");
  }
  w.lambda_l2 = field<double>(j, path, "lambda_l2");
  const std::string prov = field<std::string>(j, path, "provenance");
  if (prov == "pareto_tuned") {
    w.provenance = FusionWeights::Provenance::pareto_tuned;
  } else if (prov == "initial_lr") {
    w.provenance = FusionWeights::Provenance::initial_lr;
  } else {
    throw DataError(path + ": unknown provenance \"" + prov + "\"");
  }
  return w;
}

// ----------------------------------------------------- reference model

void save_reference_model(const ReferenceModel& m, const std::string& path) {
  json bigrams = json::array();
  for (const auto& [key, count] : m.bigram_counts()) {
    bigrams.push_back(json::array({key.first, key.second, count}));
  }
  json prev = json::array();
  for (const auto& [id, count] : m.prev_counts()) {
    prev.push_back(json::array({id, count}));
  }
  json j{{"format", "qsalign.reference_model"},
         {"version", kCheckpointVersion},
         {"k", m.smoothing_k()},
         {"vocab", m.vocab()},
         {"bigrams", bigrams},
         {"prev_totals", prev}};
  write_json(j, path);
}

ReferenceModel load_reference_model(const std::string& path) {
  const json j = parse_json_checkpoint(path, "qsalign.reference_model");
  auto vocab = field<std::map<std::string, int>>(j, path, "vocab");
  std::map<std::pair<int, int>, std::int64_t> bigrams;
  for (const auto& row : field<json>(j, path, "bigrams")) {
    if (!row.is_array() || row.size() != 3) {
      throw DataError(path + ": malformed bigram row");
    }
    bigrams[{row[0].get<int>(), row[1].get<int>()}] = row[2].get<std::int64_t>();
  }
  std::map<int, std::int64_t> prev;
  for (const auto& row : field<json>(j, path, "prev_totals")) {
    if (!row.is_array() || row.size() != 2) {
      throw DataError(path + ": malformed prev_totals row");
    }
    prev[row[0].get<int>()] = row[1].get<std::int64_t>();
  }
  return ReferenceModel::from_parts(std::move(vocab), std::move(bigrams),
                                    std::move(prev), field<double>(j, path, "k"));
}

// -------------------------------------------------------- world snapshot

namespace {

json context_json(const Context& c) {
  return json{{"id", c.id},
              {"features", c.features},
              {"language", c.language},
              {"unsafe", c.unsafe},
              {"high_noise", c.high_noise},
              {"week", c.week},
              {"prior_queries", c.prior_queries}};
}

Context context_from(const json& j, const std::string& path) {
  Context c;
  c.id = field<int>(j, path, "id");
  c.features = field<std::vector<double>>(j, path, "features");
  c.language = field<std::string>(j, path, "language");
  c.unsafe = field<bool>(j, path, "unsafe");
  c.high_noise = field<bool>(j, path, "high_noise");
  c.week = field<int>(j, path, "week");
  c.prior_queries = field<std::vector<std::string>>(j, path, "prior_queries");
  return c;
}

}  // namespace

void save_world(const World& w, const std::string& path) {
  json cfg{{"n_contexts", w.cfg.n_contexts},
           {"pool_size", w.cfg.pool_size},
           {"context_dim", w.cfg.context_dim},
           {"hash_dim", w.cfg.hash_dim},
           {"unsafe_fraction", w.cfg.unsafe_fraction},
           {"high_noise_fraction", w.cfg.high_noise_fraction},
           {"vocab_size", w.cfg.vocab_size},
           {"languages", w.cfg.languages},
           {"utility_sd", w.cfg.utility_sd},
           {"utility_mean", w.cfg.utility_mean},
           {"langmatch_gain", w.cfg.langmatch_gain},
           {"wordcount_gain", w.cfg.wordcount_gain},
           {"drift_step", w.cfg.drift_step},
           {"noise_sd_low", w.cfg.noise_sd_low},
           {"noise_sd_high", w.cfg.noise_sd_high},
           {"position_bias", w.cfg.position_bias},
           {"repeat_fraction", w.cfg.repeat_fraction}};
  json contexts = json::array();
  for (const auto& c : w.contexts) contexts.push_back(context_json(c));
  json pools = json::array();
  for (const auto& pool : w.pools) {
    json p = json::array();
    for (const auto& s : pool) {
      p.push_back(json{{"id", s.id}, {"text", s.text}, {"language", s.language}});
    }
    pools.push_back(std::move(p));
  }
  json um{{"utility_weights", w.um.utility_weights},
          {"utility_bias", w.um.utility_bias},
          {"noise_sd_low", w.um.noise_sd_low},
          {"noise_sd_high", w.um.noise_sd_high},
          {"position_bias", w.um.position_bias}};
  json j{{"format", "qsalign.world"},
         {"version", kCheckpointVersion},
         {"seed", w.seed},
         {"cfg", cfg},
         {"contexts", contexts},
         {"pools", pools},
         {"um", um},
         {"vocab", w.vocab}};
  write_json(j, path);
}

World load_world(const std::string& path) {
  const json j = parse_json_checkpoint(path, "qsalign.world");
  World w;
  w.seed = field<std::uint64_t>(j, path, "seed");
  const json cfg = field<json>(j, path, "cfg");
  w.cfg.n_contexts = field<int>(cfg, path, "n_contexts");
  w.cfg.pool_size = field<int>(cfg, path, "pool_size");
  w.cfg.context_dim = field<int>(cfg, path, "context_dim");
  w.cfg.hash_dim = field<int>(cfg, path, "hash_dim");
  w.cfg.unsafe_fraction = field<double>(cfg, path, "unsafe_fraction");
  w.cfg.high_noise_fraction = field<double>(cfg, path, "high_noise_fraction");
  w.cfg.vocab_size = field<int>(cfg, path, "vocab_size");
  w.cfg.languages = field<std::vector<std::string>>(cfg, path, "languages");
  w.cfg.utility_sd = field<double>(cfg, path, "utility_sd");
  w.cfg.utility_mean = field<double>(cfg, path, "utility_mean");
  w.cfg.langmatch_gain = field<double>(cfg, path, "langmatch_gain");
  w.cfg.wordcount_gain = field<double>(cfg, path, "wordcount_gain");
  w.cfg.drift_step = field<double>(cfg, path, "drift_step");
  w.cfg.noise_sd_low = field<double>(cfg, path, "noise_sd_low");
  w.cfg.noise_sd_high = field<double>(cfg, path, "noise_sd_high");
  w.cfg.position_bias = field<std::array<double, 3>>(cfg, path, "position_bias");
  w.cfg.repeat_fraction = field<double>(cfg, path, "repeat_fraction");
  for (const auto& cj : field<json>(j, path, "contexts")) {
    w.contexts.push_back(context_from(cj, path));
  }
  for (const auto& pj : field<json>(j, path, "pools")) {
    std::vector<Suggestion> pool;
    for (const auto& sj : pj) {
      Suggestion s;
      s.id = field<int>(sj, path, "id");
      s.text = field<std::string>(sj, path, "text");
      s.language = field<std::string>(sj, path, "language");
      pool.push_back(std::move(s));
    }
    w.pools.push_back(std::move(pool));
  }
  const json um = field<json>(j, path, "um");
  w.um.utility_weights = field<std::vector<double>>(um, path, "utility_weights");
  w.um.utility_bias = field<double>(um, path, "utility_bias");
  w.um.noise_sd_low = field<double>(um, path, "noise_sd_low");
  w.um.noise_sd_high = field<double>(um, path, "noise_sd_high");
  w.um.position_bias = field<std::array<double, 3>>(um, path, "position_bias");
  w.vocab = field<std::map<std::string, std::vector<std::string>>>(j, path, "vocab");
  if (w.pools.size() != w.contexts.size()) {
    throw DataError(path + ": context/pool count mismatch");
  }
  return w;
}

// -------------------------------------------------------- JSONL datasets

namespace {

// Shared JSONL writer/reader scaffolding: one compact JSON object per line.
template <class T, class ToJson>
void save_jsonl(const std::vector<T>& rows, const std::string& path, ToJson&& to_json) {
  std::string out;
  for (const auto& r : rows) {
    out += to_json(r).dump();
    out += '\n';
  }
  write_text_file(path, out);
}

template <class FromJson>
void load_jsonl(const std::string& path, FromJson&& from_json) {
  const std::string text = read_text_file(path);
  std::size_t line_no = 0;
  for (const auto& line : split_lines(text)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": bad JSON: " + e.what());
    }
    from_json(j, line_no);
  }
}

}  // namespace

void save_click_logs(const std::vector<ClickLogRecord>& logs, const std::string& path) {
  save_jsonl(logs, path, [](const ClickLogRecord& r) {
    json j{{"context_id", r.context_id},
           {"triple", r.triple},
           {"examined", r.examined},
           {"week", r.week},
           {"serving_policy", r.serving_policy}};
    j["clicked_position"] =
        r.clicked_position.has_value() ? json(*r.clicked_position) : json(nullptr);
    return j;
  });
}

std::vector<ClickLogRecord> load_click_logs(const std::string& path) {
  std::vector<ClickLogRecord> logs;
  load_jsonl(path, [&](const json& j, std::size_t) {
    ClickLogRecord r;
    r.context_id = field<int>(j, path, "context_id");
    r.triple = field<std::array<int, 3>>(j, path, "triple");
    r.examined = field<std::array<bool, 3>>(j, path, "examined");
    if (!j.contains("clicked_position")) {
      throw DataError(path + ": missing field \"clicked_position\"");
    }
    if (!j.at("clicked_position").is_null()) {
      r.clicked_position = j.at("clicked_position").get<int>();
    }
    r.week = field<int>(j, path, "week");
    r.serving_policy = field<std::string>(j, path, "serving_policy");
    logs.push_back(std::move(r));
  });
  return logs;
}

void save_triplets(const std::vector<PreferenceTriplet>& ts, const std::string& path) {
  save_jsonl(ts, path, [](const PreferenceTriplet& t) {
    return json{{"context_id", t.context_id},
                {"chosen_id", t.chosen.id},
                {"chosen_text", t.chosen.text},
                {"chosen_lang", t.chosen.language},
                {"rejected_id", t.rejected.id},
                {"rejected_text", t.rejected.text},
                {"rejected_lang", t.rejected.language},
                {"week", t.week},
                {"source_policy", source_policy_name(t.source_policy)}};
  });
}

std::vector<PreferenceTriplet> load_triplets(const std::string& path) {
  std::vector<PreferenceTriplet> ts;
  load_jsonl(path, [&](const json& j, std::size_t) {
    PreferenceTriplet t;
    t.context_id = field<int>(j, path, "context_id");
    t.chosen.id = field<int>(j, path, "chosen_id");
    t.chosen.text = field<std::string>(j, path, "chosen_text");
    t.chosen.language = field<std::string>(j, path, "chosen_lang");
    t.rejected.id = field<int>(j, path, "rejected_id");
    t.rejected.text = field<std::string>(j, path, "rejected_text");
    t.rejected.language = field<std::string>(j, path, "rejected_lang");
    t.week = field<int>(j, path, "week");
    t.source_policy = source_policy_from(field<std::string>(j, path, "source_policy"), path);
    ts.push_back(std::move(t));
  });
  return ts;
}

void save_sft_examples(const std::vector<SftExample>& xs, const std::string& path) {
  save_jsonl(xs, path, [](const SftExample& x) {
    return json{{"context_id", x.context_id}, {"triple", x.triple}};
  });
}

std::vector<SftExample> load_sft_examples(const std::string& path) {
  std::vector<SftExample> xs;
  load_jsonl(path, [&](const json& j, std::size_t) {
    SftExample x;
    x.context_id = field<int>(j, path, "context_id");
    x.triple = field<std::array<int, 3>>(j, path, "triple");
    xs.push_back(x);
  });
  return xs;
}

// ----------------------------------------------------------- config text

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::string section;
  std::size_t line_no = 0;
  for (const auto& raw : split_lines(text)) {
    ++line_no;
    std::string line = raw;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw ConfigError(where + ": malformed section header \"" + line + "\"");
      }
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError(where + ": empty section name");
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(where + ": expected key = value, got \"" + line + "\"");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (value.empty()) throw ConfigError(where + ": empty value for key \"" + key + "\"");
    const std::string full = section.empty() ? key : section + "." + key;
    if (kv.count(full) != 0) {
      throw ConfigError(where + ": duplicate key \"" + full + "\"");
    }
    kv[full] = value;
  }
  return kv;
}

std::map<std::string, std::string> parse_config_file(const std::string& path) {
  try {
    return parse_config_text(read_text_file(path));
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace qs
