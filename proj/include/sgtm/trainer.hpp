#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgtm/data.hpp"
#include "sgtm/eval.hpp"
#include "sgtm/interventions.hpp"
#include "sgtm/model.hpp"
#include "sgtm/partition.hpp"
#include "sgtm/run_record.hpp"

namespace sgtm {

enum class Method : std::uint8_t { kSgtm, kFilterWeak, kFilterNone, kFilterPerfect };

const char* to_string(Method m);
Method method_from_string(const std::string& s);

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;  // matrices only
  // Masked groups skip the whole update (moments, decay, step count). When
  // false the masked gradient is fed to AdamW like any other (diagnostic).
  bool skip_masked_groups = true;

  nlohmann::json to_json() const;
  static OptimizerConfig from_json(const nlohmann::json& j);
};

// AdamW with decoupled weight decay and one step counter per designation
// group. Without a designation every element belongs to the joint group.
template <class T>
class AdamW {
 public:
  AdamW(const ParamSet<T>& params, const ParamDesignation* designation, OptimizerConfig config,
        std::vector<bool> trainable = {});

  // skip: group whose elements are left untouched by this step.
  void step(ParamSet<T>& params, const ParamGrads<T>& grads, double lr,
            std::optional<Tag> skip = std::nullopt);

  std::uint64_t step_count(Tag group) const { return steps_[static_cast<int>(group)]; }
  const Tensor<T>& first_moment(std::size_t i) const { return m_.at(i); }
  const Tensor<T>& second_moment(std::size_t i) const { return v_.at(i); }
  const OptimizerConfig& config() const noexcept { return config_; }

 private:
  OptimizerConfig config_;
  std::vector<std::vector<Tag>> tags_;  // empty inner vector: all joint
  std::vector<bool> trainable_;
  std::vector<bool> decays_;
  std::vector<Tensor<T>> m_, v_;
  std::uint64_t steps_[3] = {0, 0, 0};
};

// Linear warmup to peak at step == warmup, then cosine to 0 at step == total.
// Steps count from 1.
double cosine_lr(std::size_t step, std::size_t total, std::size_t warmup, double peak);

struct TrainPlan {
  Method method = Method::kSgtm;
  PartitionSpec partition;
  std::vector<bool> gated_layers;  // routing variants; empty = all blocks
  std::size_t steps = 0;           // 0: one pass over the training set
  std::size_t warmup_steps = 10;
  std::size_t batch_size = 16;
  double peak_lr = 5e-3;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0: evaluate only at the last step
  bool keep_snapshots = true;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainPlan from_json(const nlohmann::json& j);
};

// Training view of a dataset for a method.
LabeledDataset training_view(const LabeledDataset& data, Method method);

template <class T>
struct TrainHooks {
  std::function<void(std::size_t step, BatchLabel, const TokenBatch&, const Transformer<T>&)> before_step;
  std::function<void(std::size_t step, BatchLabel, const TokenBatch&, const Transformer<T>&)> after_step;
};

// Trains model in place. Reported losses of ablating methods are measured on
// the ablated model; snapshots hold the unablated parameters.
template <class T>
RunRecord train(const TrainPlan& plan, const LabeledDataset& data, const EvalSuite& eval,
                Transformer<T>& model, const TrainHooks<T>* hooks = nullptr);

// Model weights as reported for a method: ablated for routing methods.
template <class T>
Transformer<T> reported_model(const Transformer<T>& model, const TrainPlan& plan);

// ---------------------------------------------------------------------------
// RMU

struct RmuPlan {
  std::size_t steps = 250;
  double alpha = 100.0;
  double steering_coefficient = 20.0;
  std::optional<std::size_t> unlearn_layer;  // default: last block
  std::vector<std::size_t> update_layers;    // default: unlearn layer and the two below
  std::size_t batch_size = 4;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;

  void resolve(const ModelConfig& config);  // fills defaults, validates
  nlohmann::json to_json() const;
  static RmuPlan from_json(const nlohmann::json& j);
};

// Forget batches pull the unlearn layer's output toward c*u, retain batches
// hold it at a frozen copy's output (weighted by alpha). Only MLP weights and
// biases of update_layers change. Forget batches come from examples labelled
// FORGET, retain batches from RETAIN (UNLABELED if there are none).
template <class T>
RunRecord run_rmu(const RmuPlan& plan, Transformer<T>& model, const LabeledDataset& data,
                  const EvalSuite& eval);

// ---------------------------------------------------------------------------
// Fine-tuning attack

struct FinetunePlan {
  std::size_t steps = 200;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double mix = 0.5;  // forget share of each batch
  std::size_t eval_every = 10;
  double tolerance = 0.05;  // nats above the baseline that count as recovered
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static FinetunePlan from_json(const nlohmann::json& j);
};

struct RelearnPoint {
  std::size_t step = 0;
  std::uint64_t forget_tokens = 0;
  double loss_forget = 0;
  double loss_retain = 0;
};

struct RelearnCurve {
  double baseline_forget_loss = 0;
  std::vector<RelearnPoint> points;
  // First evaluated step with forget loss <= baseline + tolerance; empty
  // when the step budget ran out first.
  std::optional<std::size_t> steps_to_baseline;
  std::optional<std::uint64_t> tokens_to_baseline;
};

// Full-parameter AdamW fine-tuning on batches mixing forget-domain and
// retain-domain examples, no interventions, constant lr.
template <class T>
RelearnCurve finetune_attack(const FinetunePlan& plan, Transformer<T> model,
                             const LabeledDataset& data, const EvalSuite& eval,
                             double baseline_forget_loss);

}  // namespace sgtm
