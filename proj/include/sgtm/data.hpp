#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgtm/interventions.hpp"
#include "sgtm/model.hpp"

namespace sgtm {

enum class Domain : std::uint8_t { kForget, kRetain };

const char* to_string(Domain d);
Domain domain_from_string(const std::string& s);

// Mixes a seed with stream identifiers into an independent 64-bit seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

struct GrammarSpec {
  std::size_t vocab_size = 512;
  double overlap_fraction = 0.25;
  std::size_t branching = 8;    // successors per token
  double mean_length = 48.0;    // expected document length (geometric stop)
  double concentration = 1.0;   // Dirichlet concentration of transition weights
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static GrammarSpec from_json(const nlohmann::json& j);
};

// First-order Markov chain over a token subset, with start and stop states.
class DomainGrammar {
 public:
  struct Transition {
    std::int32_t token;  // kEosToken marks the stop state
    double prob;
  };

  DomainGrammar(Domain domain, std::size_t vocab_size, std::vector<std::int32_t> vocab,
                std::vector<Transition> start, std::vector<std::vector<Transition>> rows,
                double overlap_fraction);

  Domain domain() const noexcept { return domain_; }
  const std::vector<std::int32_t>& vocab() const noexcept { return vocab_; }
  double overlap_fraction() const noexcept { return overlap_fraction_; }
  bool contains(std::int32_t token) const;
  const std::vector<Transition>& start() const noexcept { return start_; }
  // Successor distribution after token (which must be in the vocabulary).
  const std::vector<Transition>& successors(std::int32_t token) const;

  // [BOS, t1, ..., EOS], cut at max_len tokens.
  std::vector<std::int32_t> sample(std::mt19937_64& rng, std::size_t max_len) const;

 private:
  Domain domain_;
  std::vector<std::int32_t> vocab_;
  std::vector<std::int32_t> row_of_;  // token id -> row, -1 if absent
  std::vector<Transition> start_;
  std::vector<std::vector<Transition>> rows_;
  double overlap_fraction_;
};

// Forget and retain grammars sharing overlap_fraction of each vocabulary.
std::pair<DomainGrammar, DomainGrammar> make_grammar_pair(const GrammarSpec& spec);
// Token ids present in both grammars.
std::vector<std::int32_t> shared_tokens(const DomainGrammar& a, const DomainGrammar& b);

struct LabeledExample {
  std::uint64_t id = 0;
  std::vector<std::int32_t> tokens;  // unpadded, at most context_len long
  Domain true_domain = Domain::kRetain;
  BatchLabel assigned_label = BatchLabel::kUnlabeled;
};

// Generates examples from each grammar until each domain holds at least
// n_tokens_each tokens. Forget examples come first. Deterministic in seed.
std::vector<LabeledExample> generate_corpus(const DomainGrammar& forget, const DomainGrammar& retain,
                                            std::size_t n_tokens_each, std::uint64_t seed,
                                            std::size_t context_len);

struct LabelNoiseSpec {
  double tpr = 1.0;  // P(labelled FORGET | forget domain)
  double fpr = 0.0;  // P(labelled FORGET | retain domain)
  double confident_retain_fraction = 0.25;  // P(RETAIN | retain domain, not flagged)
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static LabelNoiseSpec from_json(const nlohmann::json& j);
};

class LabeledDataset {
 public:
  LabeledDataset() = default;
  LabeledDataset(std::vector<LabeledExample> examples, std::size_t context_len);

  const std::vector<LabeledExample>& examples() const noexcept { return examples_; }
  std::size_t size() const noexcept { return examples_.size(); }
  std::size_t context_len() const noexcept { return context_len_; }
  const std::vector<std::size_t>& indices(BatchLabel label) const;
  std::size_t tokens(BatchLabel label) const;
  std::size_t tokens(BatchLabel label, Domain domain) const;
  std::size_t tokens(Domain domain) const;
  std::size_t total_tokens() const;

  // Drops every example whose assigned label is label (weak filtering).
  LabeledDataset without_label(BatchLabel label) const;
  // Drops every example of a ground-truth domain (perfect filtering).
  LabeledDataset without_domain(Domain domain) const;
  // Examples of one domain, labels untouched.
  LabeledDataset only_domain(Domain domain) const;

 private:
  std::vector<LabeledExample> examples_;
  std::size_t context_len_ = 0;
  std::vector<std::size_t> by_label_[3];
};

LabeledDataset assign_labels(std::vector<LabeledExample> examples, const LabelNoiseSpec& spec,
                             std::size_t context_len);

// Right-pads the selected examples to the longest one.
TokenBatch make_batch(const LabeledDataset& dataset, const std::vector<std::size_t>& which);

// Uniform draw (with replacement) from one label subset; nullopt when empty.
std::optional<TokenBatch> sample_batch(const LabeledDataset& dataset, BatchLabel label,
                                       std::size_t batch_size, std::mt19937_64& rng);

struct PlannedBatch {
  BatchLabel label = BatchLabel::kUnlabeled;
  std::vector<std::size_t> examples;
};

// One pass without replacement: each label subset is shuffled and chunked
// into homogeneous batches, then the batch order is shuffled, so subsets are
// drawn in proportion to their size over the epoch.
std::vector<PlannedBatch> plan_epoch(const LabeledDataset& dataset, std::size_t batch_size,
                                     std::uint64_t seed);

// Byte-level tokenizer: byte b -> b + kNumSpecialTokens.
struct ByteTokenizer {
  static constexpr std::size_t kVocabSize = 256 + kNumSpecialTokens;
  std::vector<std::int32_t> encode(const std::string& text) const;
  std::string decode(const std::vector<std::int32_t>& ids) const;
};

// One document per blank-line-separated block; each becomes
// [BOS, bytes..., EOS] truncated to context_len.
std::vector<LabeledExample> ingest_text(const std::filesystem::path& path, Domain domain,
                                        const std::string& tokenizer, std::size_t context_len,
                                        std::uint64_t first_id = 0);

// Corpus cache: "SGTMCORP", u64 header length, JSON header, then per example
// u64 id, u8 domain, u32 length, length x i32 tokens (little endian).
void write_corpus_cache(const std::filesystem::path& path, const nlohmann::json& header,
                        const std::vector<LabeledExample>& examples);
std::pair<nlohmann::json, std::vector<LabeledExample>> read_corpus_cache(
    const std::filesystem::path& path);

// CSV with columns example_id,true_domain,assigned_label.
void write_label_csv(const std::filesystem::path& path, const LabeledDataset& dataset);

}  // namespace sgtm
