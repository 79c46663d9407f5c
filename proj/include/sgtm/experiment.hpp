#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgtm/data.hpp"
#include "sgtm/eval.hpp"
#include "sgtm/model.hpp"
#include "sgtm/partition.hpp"
#include "sgtm/trainer.hpp"

namespace sgtm {

inline constexpr int kSchemaVersion = 1;

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PartitionSpec& s);
PartitionSpec partition_from_json(const nlohmann::json& j);

struct DataSpec {
  GrammarSpec grammar;
  std::size_t tokens_per_domain = 400000;
  std::size_t test_tokens_per_domain = 16000;
  std::size_t eval_batch_size = 32;
  // Plain-text corpora replace the grammars when both are set.
  std::optional<std::string> text_forget;
  std::optional<std::string> text_retain;
  std::string tokenizer = "byte";
  double text_test_fraction = 0.1;

  nlohmann::json to_json() const;
  static DataSpec from_json(const nlohmann::json& j);
};

struct SizeSpec {
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t d_mlp = 256;
  std::size_t n_heads = 4;
  friend bool operator==(const SizeSpec&, const SizeSpec&) = default;
};

struct AnalysisSpec {
  CalibrationOptions calibration;
  // Forget-token fractions of the baseline curve used for leakage.
  std::vector<double> leakage_grid{0.0, 0.0025, 0.01, 0.04, 0.16, 1.0};
  std::vector<double> undiscovered_rates{0.0, 0.01, 0.05, 0.2};
  std::vector<std::pair<double, double>> tpr_fpr_grid{{1.0, 0.0}, {0.9, 0.0}, {1.0, 0.1}, {0.9, 0.1}};
  std::vector<SizeSpec> model_sizes;
  FinetunePlan finetune;
  RmuPlan rmu;
  std::size_t histogram_bins = 100;
  std::size_t grad_norm_examples = 200;

  nlohmann::json to_json() const;
  static AnalysisSpec from_json(const nlohmann::json& j);
};

// Everything a run depends on besides the seed.
struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::uint64_t seed = 0;
  std::string precision = "f32";
  ModelConfig model;
  PartitionSpec partition;
  TrainPlan train;  // partition fields are taken from `partition`
  DataSpec data;
  LabelNoiseSpec labels;
  AnalysisSpec analysis;

  void validate() const;
  nlohmann::json to_json() const;
  // Strict: unknown keys and schema-version mismatches throw ConfigError
  // naming every offending key.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);

  // TrainPlan with partition and seed filled in.
  TrainPlan train_plan() const;
  // 16 hex digits of FNV-1a over the canonical JSON.
  std::string hash() const;
};

// Applies SGTM_SEED and SGTM_OUT_ROOT when set.
void apply_env_overrides(std::uint64_t& seed, std::filesystem::path& out_root);

// Lines "path: a -> b" for every leaf that differs.
std::vector<std::string> json_diff(const nlohmann::json& a, const nlohmann::json& b,
                                   const std::string& prefix = "");

std::uint64_t fnv1a(const std::string& bytes);
std::string hex64(std::uint64_t v);

struct ExperimentData {
  std::vector<LabeledExample> corpus;  // unlabelled training examples
  LabeledDataset train;
  std::vector<LabeledExample> test;
  EvalSuite eval;
  std::vector<std::int32_t> shared_tokens;
  nlohmann::json corpus_header;
};

// Corpus, labels and evaluation suite of a config (all seeded from it). With
// a cache directory the generated corpus and test set are stored there
// (corpus-<key>.bin, test-<key>.bin) and reused by later calls.
ExperimentData build_experiment_data(const ExperimentConfig& config,
                                     const std::optional<std::filesystem::path>& cache_dir = std::nullopt);

// Seed of the initial weights; shared by every method of a config.
std::uint64_t init_seed(const ExperimentConfig& config);

template <class T>
struct TrainedRun {
  RunRecord record;
  Transformer<T> model;  // as trained, before ablation
};

// Initializes a model from the config and trains it with config.train.method.
template <class T>
TrainedRun<T> train_experiment(const ExperimentConfig& config, const ExperimentData& data,
                               const TrainHooks<T>* hooks = nullptr);

// Copy of config with a different label spec / model size.
ExperimentConfig with_undiscovered_rate(ExperimentConfig config, double rate);
ExperimentConfig with_tpr_fpr(ExperimentConfig config, double tpr, double fpr);
ExperimentConfig with_size(ExperimentConfig config, const SizeSpec& size);

}  // namespace sgtm
