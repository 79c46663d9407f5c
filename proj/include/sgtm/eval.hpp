#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgtm/data.hpp"
#include "sgtm/model.hpp"
#include "sgtm/partition.hpp"
#include "sgtm/run_record.hpp"

namespace sgtm {

// Fixed held-out batches per domain. "Related" positions are retain-domain
// positions whose input token belongs to the shared vocabulary.
struct EvalSuite {
  std::vector<TokenBatch> forget;
  std::vector<TokenBatch> retain;
  std::vector<std::uint8_t> shared;  // per token id

  static EvalSuite build(const std::vector<LabeledExample>& test_examples, std::size_t batch_size,
                         const std::vector<std::int32_t>& shared_tokens, std::size_t vocab_size);
};

struct EvalLosses {
  double forget = 0;
  double retain = 0;
  double related = 0;
};

// Token-weighted mean next-token losses. bias is added to every logit row.
template <class T>
EvalLosses evaluate(const Transformer<T>& model, const EvalSuite& suite,
                    const std::vector<double>* bias = nullptr);

// Logits and targets of every non-pad position of a batch list.
struct LogitCache {
  std::size_t vocab = 0;
  std::vector<float> logits;  // rows x vocab
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> related;

  std::size_t rows() const { return targets.size(); }
};

template <class T>
LogitCache collect_logits(const Transformer<T>& model, const std::vector<TokenBatch>& batches,
                          const std::vector<std::uint8_t>* shared = nullptr);

// Mean cross entropy of cached logits plus bias. Optionally the gradient wrt
// bias and the diagonal of its Hessian, mean p_j (1 - p_j).
double cached_loss(const LogitCache& cache, const std::vector<double>& bias,
                   std::vector<double>* grad = nullptr, bool related_only = false,
                   std::vector<double>* curvature = nullptr);

// ---------------------------------------------------------------------------
// Logit calibration

struct CalibrationOptions {
  double alpha = 100.0;
  double lr = 0.1;
  std::size_t max_iters = 2000;
  double tolerance = 1e-5;
  // Scale each coordinate by its inverse curvature (plus damping). Biases of
  // tokens the model never predicts have almost no curvature and barely move
  // under plain gradient descent.
  bool precondition = true;
  double damping = 1e-4;
};

struct CalibrationResult {
  std::vector<double> logit_bias;
  double alpha = 100.0;
  EvalLosses before;
  EvalLosses after;
  double objective_before = 0;  // forget + alpha * retain
  double objective_after = 0;
  std::vector<double> objective_trace;  // one entry per accepted iterate
  std::size_t iterations = 0;
  bool converged = false;

  nlohmann::json to_json() const;
};

// Descent on the bias vector for forget + alpha * retain, stopping once an
// iteration lowers the objective by less than tolerance. The step is taken
// on the objective divided by (1 + alpha); a rejected step is halved and
// retried, an accepted one grows the step by 1.5, so the trace never rises.
CalibrationResult calibrate(const LogitCache& forget, const LogitCache& retain,
                            const CalibrationOptions& options = {});

template <class T>
CalibrationResult calibrate(const Transformer<T>& model, const EvalSuite& suite,
                            const CalibrationOptions& options = {});

// ---------------------------------------------------------------------------
// Per-token losses

struct LossHistogram {
  double lo = 0;
  double hi = 0;
  std::vector<std::size_t> counts;
  std::vector<double> values;  // raw per-token losses
  double mean = 0;
  double median = 0;
};

LossHistogram make_histogram(std::vector<double> values, std::size_t vocab_size,
                             std::size_t bins = 100);

template <class T>
LossHistogram per_token_losses(const Transformer<T>& model, const std::vector<TokenBatch>& batches,
                               const std::vector<double>* bias = nullptr, std::size_t bins = 100);

// ---------------------------------------------------------------------------
// Gradient-norm study

struct GradNormSample {
  std::uint64_t example_id = 0;
  Domain domain = Domain::kRetain;
  double forget_relative = 0;  // |grad theta_forget| / |theta_forget|
  double retain_relative = 0;
};

struct GradNormSummary {
  double forget_params_on_forget = 0;
  double forget_params_on_retain = 0;
  double retain_params_on_forget = 0;
  double retain_params_on_retain = 0;
};

// One unmasked backward per example (unlabeled treatment). Throws
// ContractError if the forget or retain group has zero norm.
template <class T>
std::vector<GradNormSample> grad_norm_study(const Transformer<T>& model,
                                            const ParamDesignation& designation,
                                            const std::vector<LabeledExample>& examples);

GradNormSummary summarize(const std::vector<GradNormSample>& samples);

// ---------------------------------------------------------------------------
// Leakage

struct BaselinePoint {
  double forget_tokens = 0;
  double forget_loss = 0;
};

struct LeakageReport {
  double undiscovered_forget_tokens = 0;
  double forget_loss = 0;
  bool in_range = false;
  std::optional<double> equivalent_forget_tokens;
  std::optional<double> leakage;
  // Always set: exact value when in range, otherwise the open side is
  // 0 (lower) or +infinity (upper).
  double equivalent_lower = 0;
  double equivalent_upper = 0;
  double leakage_lower = 0;
  double leakage_upper = 0;
  std::optional<std::pair<BaselinePoint, BaselinePoint>> bracket;

  nlohmann::json to_json() const;
};

// Piecewise-linear interpolation of loss -> tokens along the baseline curve
// (sorted by token count). Requires at least two points.
LeakageReport leakage(double forget_loss, double undiscovered_forget_tokens,
                      std::vector<BaselinePoint> curve);
LeakageReport leakage(const RunRecord& run, const std::vector<BaselinePoint>& curve);

// Final (tokens_forget, loss_forget_test) of each run.
std::vector<BaselinePoint> baseline_curve(const std::vector<const RunRecord*>& runs);

// ---------------------------------------------------------------------------
// Scaling

struct ScalingFit {
  double alpha = 0;
  double beta = 0;
  double residual = 0;  // RMSE of log loss
  std::size_t n_points = 0;
  bool low_confidence = false;

  double loss_at(double compute) const;
  double compute_for(double loss) const;
};

enum class TestSubset : std::uint8_t { kRetain, kForget, kRelated };
const char* to_string(TestSubset s);
TestSubset subset_from_string(const std::string& s);

// Least squares of log loss on log compute. Flags low confidence when loss
// does not decrease with compute.
ScalingFit fit_scaling(const std::vector<std::pair<double, double>>& compute_loss);
ScalingFit fit_scaling(const std::vector<const RunRecord*>& runs, TestSubset subset);

// 1 - C_equiv / C_full with C_equiv the compute the fitted baseline needs
// to reach loss.
double compute_penalty(double loss, double full_compute, const ScalingFit& fit);

}  // namespace sgtm
