#include "sgtm/experiment.hpp"

#include <cstdlib>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace sgtm {

nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},     {"d_model", c.d_model},       {"d_mlp", c.d_mlp},
          {"n_heads", c.n_heads},       {"vocab_size", c.vocab_size}, {"context_len", c.context_len},
          {"tie_embeddings", c.tie_embeddings}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.d_mlp = j.value("d_mlp", c.d_mlp);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.context_len = j.value("context_len", c.context_len);
  c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
  return c;
}

nlohmann::json to_json(const PartitionSpec& s) {
  return {{"h_forget", s.h_forget},
          {"d_forget", s.d_forget},
          {"variant", to_string(s.variant)},
          {"embeddings_joint", s.embeddings_joint}};
}

PartitionSpec partition_from_json(const nlohmann::json& j) {
  PartitionSpec s;
  s.h_forget = j.value("h_forget", s.h_forget);
  s.d_forget = j.value("d_forget", s.d_forget);
  s.variant = variant_from_string(j.value("variant", std::string(to_string(s.variant))));
  s.embeddings_joint = j.value("embeddings_joint", s.embeddings_joint);
  return s;
}

namespace {

nlohmann::json opt_string(const std::optional<std::string>& s) {
  return s ? nlohmann::json(*s) : nlohmann::json(nullptr);
}

std::optional<std::string> read_opt_string(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<std::string>();
}

// Keys of j that the schema (a default-valued config) does not have.
void unknown_keys(const nlohmann::json& j, const nlohmann::json& schema, const std::string& prefix,
                  std::vector<std::string>& out) {
  if (!j.is_object() || !schema.is_object()) return;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!schema.contains(it.key())) {
      out.push_back(path);
    } else {
      unknown_keys(it.value(), schema.at(it.key()), path, out);
    }
  }
}

}  // namespace

nlohmann::json DataSpec::to_json() const {
  return {{"grammar", grammar.to_json()},
          {"tokens_per_domain", tokens_per_domain},
          {"test_tokens_per_domain", test_tokens_per_domain},
          {"eval_batch_size", eval_batch_size},
          {"text_forget", opt_string(text_forget)},
          {"text_retain", opt_string(text_retain)},
          {"tokenizer", tokenizer},
          {"text_test_fraction", text_test_fraction}};
}

DataSpec DataSpec::from_json(const nlohmann::json& j) {
  DataSpec d;
  if (j.contains("grammar")) d.grammar = GrammarSpec::from_json(j.at("grammar"));
  d.tokens_per_domain = j.value("tokens_per_domain", d.tokens_per_domain);
  d.test_tokens_per_domain = j.value("test_tokens_per_domain", d.test_tokens_per_domain);
  d.eval_batch_size = j.value("eval_batch_size", d.eval_batch_size);
  d.text_forget = read_opt_string(j, "text_forget");
  d.text_retain = read_opt_string(j, "text_retain");
  d.tokenizer = j.value("tokenizer", d.tokenizer);
  d.text_test_fraction = j.value("text_test_fraction", d.text_test_fraction);
  return d;
}

nlohmann::json AnalysisSpec::to_json() const {
  nlohmann::json sizes = nlohmann::json::array();
  for (const SizeSpec& s : model_sizes) {
    sizes.push_back({{"n_layers", s.n_layers}, {"d_model", s.d_model}, {"d_mlp", s.d_mlp}, {"n_heads", s.n_heads}});
  }
  nlohmann::json grid = nlohmann::json::array();
  for (auto [t, f] : tpr_fpr_grid) grid.push_back({t, f});
  return {{"calibration",
           {{"alpha", calibration.alpha},
            {"lr", calibration.lr},
            {"max_iters", calibration.max_iters},
            {"tolerance", calibration.tolerance},
            {"precondition", calibration.precondition},
            {"damping", calibration.damping}}},
          {"leakage_grid", leakage_grid},
          {"undiscovered_rates", undiscovered_rates},
          {"tpr_fpr_grid", grid},
          {"model_sizes", sizes},
          {"finetune", finetune.to_json()},
          {"rmu", rmu.to_json()},
          {"histogram_bins", histogram_bins},
          {"grad_norm_examples", grad_norm_examples}};
}

AnalysisSpec AnalysisSpec::from_json(const nlohmann::json& j) {
  AnalysisSpec a;
  if (j.contains("calibration")) {
    const auto& c = j.at("calibration");
    a.calibration.alpha = c.value("alpha", a.calibration.alpha);
    a.calibration.lr = c.value("lr", a.calibration.lr);
    a.calibration.max_iters = c.value("max_iters", a.calibration.max_iters);
    a.calibration.tolerance = c.value("tolerance", a.calibration.tolerance);
    a.calibration.precondition = c.value("precondition", a.calibration.precondition);
    a.calibration.damping = c.value("damping", a.calibration.damping);
  }
  a.leakage_grid = j.value("leakage_grid", a.leakage_grid);
  a.undiscovered_rates = j.value("undiscovered_rates", a.undiscovered_rates);
  if (j.contains("tpr_fpr_grid")) {
    a.tpr_fpr_grid.clear();
    for (const auto& p : j.at("tpr_fpr_grid")) {
      a.tpr_fpr_grid.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
    }
  }
  if (j.contains("model_sizes")) {
    for (const auto& s : j.at("model_sizes")) {
      SizeSpec z;
      z.n_layers = s.value("n_layers", z.n_layers);
      z.d_model = s.value("d_model", z.d_model);
      z.d_mlp = s.value("d_mlp", z.d_mlp);
      z.n_heads = s.value("n_heads", z.n_heads);
      a.model_sizes.push_back(z);
    }
  }
  if (j.contains("finetune")) a.finetune = FinetunePlan::from_json(j.at("finetune"));
  if (j.contains("rmu")) a.rmu = RmuPlan::from_json(j.at("rmu"));
  a.histogram_bins = j.value("histogram_bins", a.histogram_bins);
  a.grad_norm_examples = j.value("grad_norm_examples", a.grad_norm_examples);
  return a;
}

// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  if (schema_version != kSchemaVersion) {
    throw ConfigError("config schema_version " + std::to_string(schema_version) +
                      " does not match supported version " + std::to_string(kSchemaVersion));
  }
  if (precision != "f32" && precision != "f64") throw ConfigError("precision must be f32 or f64");
  model.validate();
  partition.validate(model);
  train_plan().validate();
  labels.validate();
  const bool text = data.text_forget || data.text_retain;
  if (text) {
    if (!data.text_forget || !data.text_retain) {
      throw ConfigError("text ingestion needs both text_forget and text_retain");
    }
    if (model.vocab_size < ByteTokenizer::kVocabSize) {
      throw ConfigError("byte tokenizer needs vocab_size >= " + std::to_string(ByteTokenizer::kVocabSize));
    }
  } else {
    data.grammar.validate();
    if (data.grammar.vocab_size != model.vocab_size) {
      throw ConfigError("data.grammar.vocab_size must equal model.vocab_size");
    }
  }
  if (data.eval_batch_size == 0) throw ConfigError("eval_batch_size must be positive");
  for (double r : analysis.undiscovered_rates) {
    if (r < 0 || r > 1) throw ConfigError("undiscovered rates must be in [0, 1]");
  }
  for (double r : analysis.leakage_grid) {
    if (r < 0 || r > 1) throw ConfigError("leakage grid fractions must be in [0, 1]");
  }
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json t = train.to_json();
  for (const char* k : {"variant", "h_forget", "d_forget", "embeddings_joint", "seed"}) t.erase(k);
  return {{"schema_version", schema_version},
          {"seed", seed},
          {"precision", precision},
          {"model", sgtm::to_json(model)},
          {"partition", sgtm::to_json(partition)},
          {"train", t},
          {"data", data.to_json()},
          {"labels", {{"tpr", labels.tpr},
                      {"fpr", labels.fpr},
                      {"confident_retain_fraction", labels.confident_retain_fraction},
                      {"seed", labels.seed}}},
          {"analysis", analysis.to_json()}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (!j.contains("schema_version")) throw ConfigError("config is missing schema_version");
  const int version = j.at("schema_version").get<int>();
  if (version != kSchemaVersion) {
    throw ConfigError("config schema_version " + std::to_string(version) +
                      " does not match supported version " + std::to_string(kSchemaVersion));
  }
  std::vector<std::string> unknown;
  unknown_keys(j, ExperimentConfig{}.to_json(), "", unknown);
  if (!unknown.empty()) {
    std::string msg = "config has keys outside schema version " + std::to_string(kSchemaVersion) + ":";
    for (const std::string& k : unknown) msg += "\n  + " + k;
    throw ConfigError(msg);
  }
  ExperimentConfig c;
  try {
    c.schema_version = version;
    c.seed = j.value("seed", c.seed);
    c.precision = j.value("precision", c.precision);
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("partition")) c.partition = partition_from_json(j.at("partition"));
    if (j.contains("train")) c.train = TrainPlan::from_json(j.at("train"));
    if (j.contains("data")) c.data = DataSpec::from_json(j.at("data"));
    if (j.contains("labels")) c.labels = LabelNoiseSpec::from_json(j.at("labels"));
    if (j.contains("analysis")) c.analysis = AnalysisSpec::from_json(j.at("analysis"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config value has the wrong type: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

TrainPlan ExperimentConfig::train_plan() const {
  TrainPlan p = train;
  p.partition = partition;
  p.seed = seed;
  return p;
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

std::string ExperimentConfig::hash() const { return hex64(fnv1a(to_json().dump())); }

void apply_env_overrides(std::uint64_t& seed, std::filesystem::path& out_root) {
  if (const char* s = std::getenv("SGTM_SEED"); s && *s) {
    try {
      seed = std::stoull(s);
    } catch (const std::exception&) {
      throw ConfigError(std::string("SGTM_SEED is not an unsigned integer: ") + s);
    }
  }
  if (const char* o = std::getenv("SGTM_OUT_ROOT"); o && *o) out_root = o;
}

std::vector<std::string> json_diff(const nlohmann::json& a, const nlohmann::json& b,
                                   const std::string& prefix) {
  std::vector<std::string> out;
  if (a.is_object() && b.is_object()) {
    std::set<std::string> keys;
    for (auto it = a.begin(); it != a.end(); ++it) keys.insert(it.key());
    for (auto it = b.begin(); it != b.end(); ++it) keys.insert(it.key());
    for (const std::string& k : keys) {
      const std::string path = prefix.empty() ? k : prefix + "." + k;
      if (!a.contains(k)) {
        out.push_back(path + ": <absent> -> " + b.at(k).dump());
      } else if (!b.contains(k)) {
        out.push_back(path + ": " + a.at(k).dump() + " -> <absent>");
      } else {
        auto sub = json_diff(a.at(k), b.at(k), path);
        out.insert(out.end(), sub.begin(), sub.end());
      }
    }
  } else if (a != b) {
    out.push_back((prefix.empty() ? "<root>" : prefix) + ": " + a.dump() + " -> " + b.dump());
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct RawData {
  std::vector<LabeledExample> corpus, test;
  std::vector<std::int32_t> shared_tokens;
  nlohmann::json header;
};

nlohmann::json data_header(const ExperimentConfig& config) {
  nlohmann::json h;
  if (config.data.text_forget) {
    h = {{"source", "text"},
         {"text_forget", *config.data.text_forget},
         {"text_retain", *config.data.text_retain},
         {"tokenizer", config.data.tokenizer},
         {"text_test_fraction", config.data.text_test_fraction}};
  } else {
    h = {{"source", "grammar"},
         {"grammar", config.data.grammar.to_json()},
         {"tokens_per_domain", config.data.tokens_per_domain},
         {"test_tokens_per_domain", config.data.test_tokens_per_domain}};
  }
  h["seed"] = config.seed;
  h["context_len"] = config.model.context_len;
  h["vocab_size"] = config.model.vocab_size;
  return h;
}

RawData generate_raw(const ExperimentConfig& config) {
  RawData d;
  d.header = data_header(config);
  const std::size_t ctx = config.model.context_len;
  if (config.data.text_forget) {
    auto f = ingest_text(*config.data.text_forget, Domain::kForget, config.data.tokenizer, ctx, 0);
    auto r = ingest_text(*config.data.text_retain, Domain::kRetain, config.data.tokenizer, ctx,
                         f.size());
    for (auto* docs : {&f, &r}) {
      const auto n_test = static_cast<std::size_t>(config.data.text_test_fraction * static_cast<double>(docs->size()));
      const std::size_t split = docs->size() - n_test;
      d.corpus.insert(d.corpus.end(), docs->begin(), docs->begin() + static_cast<std::ptrdiff_t>(split));
      d.test.insert(d.test.end(), docs->begin() + static_cast<std::ptrdiff_t>(split), docs->end());
    }
    std::vector<std::uint8_t> seen_f(config.model.vocab_size, 0), seen_r(config.model.vocab_size, 0);
    for (const LabeledExample& ex : d.corpus) {
      for (std::int32_t t : ex.tokens) (ex.true_domain == Domain::kForget ? seen_f : seen_r)[t] = 1;
    }
    for (std::size_t t = kNumSpecialTokens; t < config.model.vocab_size; ++t) {
      if (seen_f[t] && seen_r[t]) d.shared_tokens.push_back(static_cast<std::int32_t>(t));
    }
  } else {
    auto [gf, gr] = make_grammar_pair(config.data.grammar);
    d.corpus = generate_corpus(gf, gr, config.data.tokens_per_domain, mix_seed(config.seed, 0x636f7270), ctx);
    d.test = generate_corpus(gf, gr, config.data.test_tokens_per_domain, mix_seed(config.seed, 0x74657374), ctx);
    d.shared_tokens = shared_tokens(gf, gr);
  }
  return d;
}

RawData cached_raw(const ExperimentConfig& config, const std::filesystem::path& dir) {
  const nlohmann::json header = data_header(config);
  const std::string key = hex64(fnv1a(header.dump()));
  const auto corpus_path = dir / ("corpus-" + key + ".bin");
  const auto test_path = dir / ("test-" + key + ".bin");
  if (std::filesystem::exists(corpus_path) && std::filesystem::exists(test_path)) {
    auto [hc, corpus] = read_corpus_cache(corpus_path);
    auto [ht, test] = read_corpus_cache(test_path);
    if (hc.value("data", nlohmann::json()) != header || ht.value("data", nlohmann::json()) != header) {
      throw IoError("corpus cache " + corpus_path.string() + " does not match its key");
    }
    RawData d;
    d.header = header;
    d.corpus = std::move(corpus);
    d.test = std::move(test);
    d.shared_tokens = hc.at("shared_tokens").get<std::vector<std::int32_t>>();
    return d;
  }
  RawData d = generate_raw(config);
  std::filesystem::create_directories(dir);
  const nlohmann::json h = {{"data", header}, {"shared_tokens", d.shared_tokens}};
  // Concurrent writers each use their own temporary and rename over the
  // target; identical keys produce identical bytes.
  const std::string suffix = ".tmp" + hex64(std::random_device{}() ^ reinterpret_cast<std::uintptr_t>(&d));
  for (auto [path, examples] : {std::pair{test_path, &d.test}, std::pair{corpus_path, &d.corpus}}) {
    auto tmp = path;
    tmp += suffix;
    write_corpus_cache(tmp, h, *examples);
    std::filesystem::rename(tmp, path);
  }
  return d;
}

}  // namespace

ExperimentData build_experiment_data(const ExperimentConfig& config,
                                     const std::optional<std::filesystem::path>& cache_dir) {
  config.validate();
  RawData raw = cache_dir ? cached_raw(config, *cache_dir) : generate_raw(config);
  ExperimentData d;
  d.corpus = std::move(raw.corpus);
  d.test = std::move(raw.test);
  d.shared_tokens = std::move(raw.shared_tokens);
  d.corpus_header = std::move(raw.header);

  LabelNoiseSpec labels = config.labels;
  labels.seed = mix_seed(config.seed, 0x6c61626c, config.labels.seed);
  d.train = assign_labels(d.corpus, labels, config.model.context_len);
  d.eval = EvalSuite::build(d.test, config.data.eval_batch_size, d.shared_tokens, config.model.vocab_size);
  return d;
}

std::uint64_t init_seed(const ExperimentConfig& config) { return mix_seed(config.seed, 0x696e6974); }

template <class T>
TrainedRun<T> train_experiment(const ExperimentConfig& config, const ExperimentData& data,
                               const TrainHooks<T>* hooks) {
  config.validate();
  TrainedRun<T> out{{}, Transformer<T>::initialized(config.model, init_seed(config))};
  out.record = train(config.train_plan(), data.train, data.eval, out.model, hooks);
  return out;
}

template TrainedRun<float> train_experiment(const ExperimentConfig&, const ExperimentData&,
                                            const TrainHooks<float>*);
template TrainedRun<double> train_experiment(const ExperimentConfig&, const ExperimentData&,
                                             const TrainHooks<double>*);

ExperimentConfig with_undiscovered_rate(ExperimentConfig config, double rate) {
  if (rate < 0 || rate > 1) throw ConfigError("undiscovered rate must be in [0, 1]");
  config.labels.tpr = 1.0 - rate;
  return config;
}

ExperimentConfig with_tpr_fpr(ExperimentConfig config, double tpr, double fpr) {
  config.labels.tpr = tpr;
  config.labels.fpr = fpr;
  config.labels.validate();
  return config;
}

ExperimentConfig with_size(ExperimentConfig config, const SizeSpec& size) {
  config.model.n_layers = size.n_layers;
  config.model.d_model = size.d_model;
  config.model.d_mlp = size.d_mlp;
  config.model.n_heads = size.n_heads;
  config.model.validate();
  return config;
}

}  // namespace sgtm
