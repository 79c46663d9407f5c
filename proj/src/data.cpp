#include "sgtm/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "binary_io.hpp"

namespace sgtm {

const char* to_string(Domain d) { return d == Domain::kForget ? "forget" : "retain"; }

Domain domain_from_string(const std::string& s) {
  if (s == "forget") return Domain::kForget;
  if (s == "retain") return Domain::kRetain;
  throw ConfigError("unknown domain '" + s + "'");
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer applied to a running combination
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

// ---------------------------------------------------------------------------
// Grammars

void GrammarSpec::validate() const {
  if (vocab_size <= static_cast<std::size_t>(kNumSpecialTokens) + 4) {
    throw ConfigError("grammar vocab_size too small");
  }
  if (overlap_fraction < 0.0 || overlap_fraction > 1.0) {
    throw ConfigError("overlap_fraction must be in [0, 1]");
  }
  if (branching == 0) throw ConfigError("branching must be positive");
  if (mean_length < 2.0) throw ConfigError("mean_length must be at least 2");
  if (concentration <= 0.0) throw ConfigError("concentration must be positive");
}

nlohmann::json GrammarSpec::to_json() const {
  return {{"vocab_size", vocab_size},   {"overlap_fraction", overlap_fraction},
          {"branching", branching},     {"mean_length", mean_length},
          {"concentration", concentration}, {"seed", seed}};
}

GrammarSpec GrammarSpec::from_json(const nlohmann::json& j) {
  GrammarSpec s;
  s.vocab_size = j.value("vocab_size", s.vocab_size);
  s.overlap_fraction = j.value("overlap_fraction", s.overlap_fraction);
  s.branching = j.value("branching", s.branching);
  s.mean_length = j.value("mean_length", s.mean_length);
  s.concentration = j.value("concentration", s.concentration);
  s.seed = j.value("seed", s.seed);
  return s;
}

DomainGrammar::DomainGrammar(Domain domain, std::size_t vocab_size, std::vector<std::int32_t> vocab,
                             std::vector<Transition> start,
                             std::vector<std::vector<Transition>> rows, double overlap_fraction)
    : domain_(domain),
      vocab_(std::move(vocab)),
      row_of_(vocab_size, -1),
      start_(std::move(start)),
      rows_(std::move(rows)),
      overlap_fraction_(overlap_fraction) {
  if (rows_.size() != vocab_.size()) throw ConfigError("grammar needs one row per vocabulary token");
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    const std::int32_t t = vocab_[i];
    if (t < kNumSpecialTokens || static_cast<std::size_t>(t) >= vocab_size) {
      throw ConfigError("grammar token id out of range");
    }
    row_of_[t] = static_cast<std::int32_t>(i);
  }
  auto check_row = [](const std::vector<Transition>& row) {
    double total = 0;
    for (const Transition& tr : row) total += tr.prob;
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("grammar transition row does not sum to 1");
  };
  check_row(start_);
  for (const auto& row : rows_) check_row(row);
}

bool DomainGrammar::contains(std::int32_t token) const {
  return token >= 0 && static_cast<std::size_t>(token) < row_of_.size() && row_of_[token] >= 0;
}

const std::vector<DomainGrammar::Transition>& DomainGrammar::successors(std::int32_t token) const {
  if (!contains(token)) throw IndexError("token " + std::to_string(token) + " not in grammar");
  return rows_[row_of_[token]];
}

namespace {

std::int32_t draw(const std::vector<DomainGrammar::Transition>& row, std::mt19937_64& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0;
  for (const auto& tr : row) {
    acc += tr.prob;
    if (u < acc) return tr.token;
  }
  return row.back().token;
}

std::vector<double> dirichlet(std::size_t n, double alpha, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> w(n);
  double total = 0;
  for (double& x : w) {
    x = gamma(rng) + 1e-12;
    total += x;
  }
  for (double& x : w) x /= total;
  return w;
}

std::vector<DomainGrammar::Transition> random_row(const std::vector<std::int32_t>& vocab,
                                                  std::size_t k, double alpha, double p_stop,
                                                  std::mt19937_64& rng) {
  k = std::min(k, vocab.size());
  std::vector<std::int32_t> picked;
  std::sample(vocab.begin(), vocab.end(), std::back_inserter(picked), k, rng);
  std::vector<double> w = dirichlet(k, alpha, rng);
  std::vector<DomainGrammar::Transition> row;
  double total = 0;
  for (std::size_t i = 0; i < k; ++i) {
    row.push_back({picked[i], w[i] * (1.0 - p_stop)});
    total += row.back().prob;
  }
  if (p_stop > 0) {
    row.push_back({kEosToken, 1.0 - total});
  } else {
    row.back().prob += 1.0 - total;
  }
  return row;
}

}  // namespace

std::vector<std::int32_t> DomainGrammar::sample(std::mt19937_64& rng, std::size_t max_len) const {
  std::vector<std::int32_t> out{kBosToken};
  std::int32_t cur = draw(start_, rng);
  while (out.size() < max_len) {
    out.push_back(cur);
    if (cur == kEosToken) break;
    cur = draw(rows_[row_of_[cur]], rng);
  }
  return out;
}

std::pair<DomainGrammar, DomainGrammar> make_grammar_pair(const GrammarSpec& spec) {
  spec.validate();
  const std::size_t available = spec.vocab_size - kNumSpecialTokens;
  // 2K - S = available, S = overlap * K
  const auto per_domain =
      static_cast<std::size_t>(std::floor(static_cast<double>(available) / (2.0 - spec.overlap_fraction)));
  const auto n_shared =
      static_cast<std::size_t>(std::llround(spec.overlap_fraction * static_cast<double>(per_domain)));
  const std::size_t n_own = per_domain - n_shared;

  std::vector<std::int32_t> ids(available);
  std::iota(ids.begin(), ids.end(), kNumSpecialTokens);
  std::vector<std::int32_t> forget_vocab(ids.begin(), ids.begin() + n_shared + n_own);
  std::vector<std::int32_t> retain_vocab(ids.begin(), ids.begin() + n_shared);
  retain_vocab.insert(retain_vocab.end(), ids.begin() + n_shared + n_own,
                      ids.begin() + n_shared + 2 * n_own);

  const double p_stop = 1.0 / spec.mean_length;
  auto build = [&](Domain domain, const std::vector<std::int32_t>& vocab) {
    std::mt19937_64 rng(mix_seed(spec.seed, 0x6772616d, static_cast<std::uint64_t>(domain)));
    auto start = random_row(vocab, spec.branching * 4, spec.concentration, 0.0, rng);
    std::vector<std::vector<DomainGrammar::Transition>> rows;
    rows.reserve(vocab.size());
    for (std::size_t i = 0; i < vocab.size(); ++i) {
      rows.push_back(random_row(vocab, spec.branching, spec.concentration, p_stop, rng));
    }
    return DomainGrammar(domain, spec.vocab_size, vocab, std::move(start), std::move(rows),
                         spec.overlap_fraction);
  };
  return {build(Domain::kForget, forget_vocab), build(Domain::kRetain, retain_vocab)};
}

std::vector<std::int32_t> shared_tokens(const DomainGrammar& a, const DomainGrammar& b) {
  std::vector<std::int32_t> out;
  for (std::int32_t t : a.vocab()) {
    if (b.contains(t)) out.push_back(t);
  }
  return out;
}

std::vector<LabeledExample> generate_corpus(const DomainGrammar& forget, const DomainGrammar& retain,
                                            std::size_t n_tokens_each, std::uint64_t seed,
                                            std::size_t context_len) {
  if (context_len < 2) throw ConfigError("context_len must be at least 2");
  std::vector<LabeledExample> out;
  std::uint64_t next_id = 0;
  for (const DomainGrammar* g : {&forget, &retain}) {
    std::size_t produced = 0;
    std::uint64_t index = 0;
    while (produced < n_tokens_each) {
      std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(g->domain()) + 1, index++));
      LabeledExample ex;
      ex.id = next_id++;
      ex.tokens = g->sample(rng, context_len);
      ex.true_domain = g->domain();
      produced += ex.tokens.size();
      out.push_back(std::move(ex));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Labels and datasets

void LabelNoiseSpec::validate() const {
  for (double p : {tpr, fpr, confident_retain_fraction}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("label noise probabilities must be in [0, 1]");
  }
}

nlohmann::json LabelNoiseSpec::to_json() const {
  return {{"tpr", tpr},
          {"fpr", fpr},
          {"confident_retain_fraction", confident_retain_fraction},
          {"seed", seed}};
}

LabelNoiseSpec LabelNoiseSpec::from_json(const nlohmann::json& j) {
  LabelNoiseSpec s;
  s.tpr = j.value("tpr", s.tpr);
  s.fpr = j.value("fpr", s.fpr);
  s.confident_retain_fraction = j.value("confident_retain_fraction", s.confident_retain_fraction);
  s.seed = j.value("seed", s.seed);
  return s;
}

LabeledDataset::LabeledDataset(std::vector<LabeledExample> examples, std::size_t context_len)
    : examples_(std::move(examples)), context_len_(context_len) {
  for (std::size_t i = 0; i < examples_.size(); ++i) {
    const LabeledExample& ex = examples_[i];
    if (ex.tokens.empty() || ex.tokens.size() > context_len_) {
      throw ContractError("example " + std::to_string(ex.id) + " has length " +
                          std::to_string(ex.tokens.size()) + " outside [1, context_len]");
    }
    by_label_[static_cast<int>(ex.assigned_label)].push_back(i);
  }
}

const std::vector<std::size_t>& LabeledDataset::indices(BatchLabel label) const {
  return by_label_[static_cast<int>(label)];
}

std::size_t LabeledDataset::tokens(BatchLabel label) const {
  std::size_t n = 0;
  for (std::size_t i : indices(label)) n += examples_[i].tokens.size();
  return n;
}

std::size_t LabeledDataset::tokens(BatchLabel label, Domain domain) const {
  std::size_t n = 0;
  for (std::size_t i : indices(label)) {
    if (examples_[i].true_domain == domain) n += examples_[i].tokens.size();
  }
  return n;
}

std::size_t LabeledDataset::tokens(Domain domain) const {
  std::size_t n = 0;
  for (const LabeledExample& ex : examples_) {
    if (ex.true_domain == domain) n += ex.tokens.size();
  }
  return n;
}

std::size_t LabeledDataset::total_tokens() const {
  std::size_t n = 0;
  for (const LabeledExample& ex : examples_) n += ex.tokens.size();
  return n;
}

LabeledDataset LabeledDataset::without_label(BatchLabel label) const {
  std::vector<LabeledExample> kept;
  std::copy_if(examples_.begin(), examples_.end(), std::back_inserter(kept),
               [label](const LabeledExample& ex) { return ex.assigned_label != label; });
  return LabeledDataset(std::move(kept), context_len_);
}

LabeledDataset LabeledDataset::without_domain(Domain domain) const {
  std::vector<LabeledExample> kept;
  std::copy_if(examples_.begin(), examples_.end(), std::back_inserter(kept),
               [domain](const LabeledExample& ex) { return ex.true_domain != domain; });
  return LabeledDataset(std::move(kept), context_len_);
}

LabeledDataset LabeledDataset::only_domain(Domain domain) const {
  std::vector<LabeledExample> kept;
  std::copy_if(examples_.begin(), examples_.end(), std::back_inserter(kept),
               [domain](const LabeledExample& ex) { return ex.true_domain == domain; });
  return LabeledDataset(std::move(kept), context_len_);
}

LabeledDataset assign_labels(std::vector<LabeledExample> examples, const LabelNoiseSpec& spec,
                             std::size_t context_len) {
  spec.validate();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (LabeledExample& ex : examples) {
    // Fixed per-example draws: label sets are nested as tpr or fpr vary.
    std::mt19937_64 rng(mix_seed(spec.seed, 0x6c6162656c, ex.id));
    const double flag = unit(rng);
    const double confident = unit(rng);
    if (ex.true_domain == Domain::kForget) {
      ex.assigned_label = flag < spec.tpr ? BatchLabel::kForget : BatchLabel::kUnlabeled;
    } else if (flag < spec.fpr) {
      ex.assigned_label = BatchLabel::kForget;
    } else {
      ex.assigned_label =
          confident < spec.confident_retain_fraction ? BatchLabel::kRetain : BatchLabel::kUnlabeled;
    }
  }
  return LabeledDataset(std::move(examples), context_len);
}

TokenBatch make_batch(const LabeledDataset& dataset, const std::vector<std::size_t>& which) {
  if (which.empty()) throw ContractError("make_batch: no examples selected");
  std::size_t seq = 0;
  for (std::size_t i : which) seq = std::max(seq, dataset.examples().at(i).tokens.size());
  seq = std::max<std::size_t>(seq, 2);
  TokenBatch batch;
  batch.batch = which.size();
  batch.seq = seq;
  batch.ids.assign(batch.batch * seq, kPadToken);
  for (std::size_t b = 0; b < which.size(); ++b) {
    const auto& toks = dataset.examples()[which[b]].tokens;
    std::copy(toks.begin(), toks.end(), batch.ids.begin() + static_cast<std::ptrdiff_t>(b * seq));
  }
  return batch;
}

std::optional<TokenBatch> sample_batch(const LabeledDataset& dataset, BatchLabel label,
                                       std::size_t batch_size, std::mt19937_64& rng) {
  const auto& subset = dataset.indices(label);
  if (subset.empty() || batch_size == 0) return std::nullopt;
  std::uniform_int_distribution<std::size_t> pick(0, subset.size() - 1);
  std::vector<std::size_t> which(batch_size);
  for (std::size_t& w : which) w = subset[pick(rng)];
  return make_batch(dataset, which);
}

std::vector<PlannedBatch> plan_epoch(const LabeledDataset& dataset, std::size_t batch_size,
                                     std::uint64_t seed) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  std::mt19937_64 rng(mix_seed(seed, 0x65706f6368));
  std::vector<PlannedBatch> batches;
  for (BatchLabel label : {BatchLabel::kForget, BatchLabel::kRetain, BatchLabel::kUnlabeled}) {
    std::vector<std::size_t> order = dataset.indices(label);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
      PlannedBatch pb;
      pb.label = label;
      pb.examples.assign(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(i + batch_size, order.size())));
      batches.push_back(std::move(pb));
    }
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

// ---------------------------------------------------------------------------
// Text ingestion

std::vector<std::int32_t> ByteTokenizer::encode(const std::string& text) const {
  std::vector<std::int32_t> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<std::int32_t>(c) + kNumSpecialTokens);
  return out;
}

std::string ByteTokenizer::decode(const std::vector<std::int32_t>& ids) const {
  std::string out;
  for (std::int32_t id : ids) {
    if (id >= kNumSpecialTokens && id < static_cast<std::int32_t>(kVocabSize)) {
      out.push_back(static_cast<char>(id - kNumSpecialTokens));
    }
  }
  return out;
}

std::vector<LabeledExample> ingest_text(const std::filesystem::path& path, Domain domain,
                                        const std::string& tokenizer, std::size_t context_len,
                                        std::uint64_t first_id) {
  if (tokenizer != "byte") throw ConfigError("unknown tokenizer '" + tokenizer + "'");
  if (context_len < 2) throw ConfigError("context_len must be at least 2");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();

  std::vector<std::string> docs;
  std::string current;
  std::istringstream lines(text);
  std::string line;
  auto flush = [&] {
    if (!current.empty()) docs.push_back(current);
    current.clear();
  };
  while (std::getline(lines, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) {
      flush();
      continue;
    }
    if (!current.empty()) current.push_back('\n');
    current += line;
  }
  flush();

  ByteTokenizer tok;
  std::vector<LabeledExample> out;
  for (const std::string& doc : docs) {
    LabeledExample ex;
    ex.id = first_id++;
    ex.true_domain = domain;
    ex.tokens.push_back(kBosToken);
    for (std::int32_t id : tok.encode(doc)) ex.tokens.push_back(id);
    ex.tokens.push_back(kEosToken);
    if (ex.tokens.size() > context_len) ex.tokens.resize(context_len);
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {
constexpr char kCorpusMagic[9] = "SGTMCORP";
}

void write_corpus_cache(const std::filesystem::path& path, const nlohmann::json& header,
                        const std::vector<LabeledExample>& examples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  nlohmann::json h = header;
  h["n_examples"] = examples.size();
  const std::string text = h.dump();
  detail::write_magic(out, kCorpusMagic);
  detail::write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const LabeledExample& ex : examples) {
    detail::write_le<std::uint64_t>(out, ex.id);
    detail::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(ex.true_domain));
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(ex.tokens.size()));
    for (std::int32_t t : ex.tokens) detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t));
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::pair<nlohmann::json, std::vector<LabeledExample>> read_corpus_cache(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  detail::expect_magic(in, kCorpusMagic, path.string());
  const auto len = detail::read_le<std::uint64_t>(in);
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw IoError("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": corrupt header: " + e.what());
  }
  const auto n = header.at("n_examples").get<std::size_t>();
  std::vector<LabeledExample> examples(n);
  for (std::size_t i = 0; i < n; ++i) {
    examples[i].id = detail::read_le<std::uint64_t>(in);
    examples[i].true_domain = static_cast<Domain>(detail::read_le<std::uint8_t>(in));
    const auto m = detail::read_le<std::uint32_t>(in);
    examples[i].tokens.resize(m);
    for (auto& t : examples[i].tokens) t = static_cast<std::int32_t>(detail::read_le<std::uint32_t>(in));
  }
  return {header, std::move(examples)};
}

void write_label_csv(const std::filesystem::path& path, const LabeledDataset& dataset) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "example_id,true_domain,assigned_label\n";
  for (const LabeledExample& ex : dataset.examples()) {
    out << ex.id << ',' << to_string(ex.true_domain) << ',' << to_string(ex.assigned_label) << '\n';
  }
}

}  // namespace sgtm
