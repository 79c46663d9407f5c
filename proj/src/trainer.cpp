#include "sgtm/trainer.hpp"

#include <cmath>
#include <numbers>

namespace sgtm {

const char* to_string(Method m) {
  switch (m) {
    case Method::kSgtm: return "sgtm";
    case Method::kFilterWeak: return "filter_weak";
    case Method::kFilterNone: return "filter_none";
    case Method::kFilterPerfect: return "filter_perfect";
  }
  return "unknown";
}

Method method_from_string(const std::string& s) {
  for (Method m : {Method::kSgtm, Method::kFilterWeak, Method::kFilterNone, Method::kFilterPerfect}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown method '" + s + "'");
}

nlohmann::json OptimizerConfig::to_json() const {
  return {{"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"weight_decay", weight_decay},
          {"skip_masked_groups", skip_masked_groups}};
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& j) {
  OptimizerConfig c;
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.skip_masked_groups = j.value("skip_masked_groups", c.skip_masked_groups);
  return c;
}

// ---------------------------------------------------------------------------

template <class T>
AdamW<T>::AdamW(const ParamSet<T>& params, const ParamDesignation* designation,
                OptimizerConfig config, std::vector<bool> trainable)
    : config_(config), trainable_(std::move(trainable)) {
  if (trainable_.empty()) trainable_.assign(params.size(), true);
  if (trainable_.size() != params.size()) throw ContractError("AdamW: trainable flags mismatch");
  if (designation) {
    designation->check_matches(params);
    tags_ = designation->element_tags();
  } else {
    tags_.assign(params.size(), {});
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_.emplace_back(params[i].shape());
    v_.emplace_back(params[i].shape());
    decays_.push_back(params[i].rank() == 2);
  }
}

template <class T>
void AdamW<T>::step(ParamSet<T>& params, const ParamGrads<T>& grads, double lr,
                    std::optional<Tag> skip) {
  if (grads.size() != params.size()) throw ContractError("AdamW: gradient count mismatch");
  bool active[3];
  double c1[3], c2[3];
  for (int g = 0; g < 3; ++g) {
    active[g] = !(skip && static_cast<int>(*skip) == g);
    if (active[g]) ++steps_[g];
    const auto t = static_cast<double>(std::max<std::uint64_t>(steps_[g], 1));
    c1[g] = 1.0 - std::pow(config_.beta1, t);
    c2[g] = 1.0 - std::pow(config_.beta2, t);
  }
  const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
  const T eps = static_cast<T>(config_.eps);
  const T step_lr = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!trainable_[i]) continue;
    if (grads[i].shape() != params[i].shape()) throw DimensionError("AdamW: gradient shape mismatch");
    T* p = params[i].raw();
    const T* d = grads[i].raw();
    T* m = m_[i].raw();
    T* v = v_[i].raw();
    const T decay = decays_[i] ? static_cast<T>(1.0 - lr * config_.weight_decay) : T(1);
    const std::vector<Tag>& tags = tags_[i];
    for (std::size_t e = 0; e < params[i].numel(); ++e) {
      const int g = tags.empty() ? static_cast<int>(Tag::kJoint) : static_cast<int>(tags[e]);
      if (!active[g]) continue;
      m[e] = b1 * m[e] + (T(1) - b1) * d[e];
      v[e] = b2 * v[e] + (T(1) - b2) * d[e] * d[e];
      const T mhat = m[e] / static_cast<T>(c1[g]);
      const T vhat = v[e] / static_cast<T>(c2[g]);
      p[e] = p[e] * decay - step_lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

double cosine_lr(std::size_t step, std::size_t total, std::size_t warmup, double peak) {
  if (total == 0) throw ConfigError("cosine_lr: total steps must be positive");
  if (step <= warmup && warmup > 0) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (total <= warmup) return peak;
  const double progress =
      static_cast<double>(std::min(step, total) - warmup) / static_cast<double>(total - warmup);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------

void TrainPlan::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (steps > 0 && warmup_steps >= steps) throw ConfigError("warmup_steps must be below steps");
  if (!(peak_lr > 0)) throw ConfigError("peak_lr must be positive");
  if (optimizer.beta1 < 0 || optimizer.beta1 >= 1 || optimizer.beta2 < 0 || optimizer.beta2 >= 1) {
    throw ConfigError("AdamW betas must be in [0, 1)");
  }
}

nlohmann::json TrainPlan::to_json() const {
  return {{"method", to_string(method)},
          {"variant", to_string(partition.variant)},
          {"h_forget", partition.h_forget},
          {"d_forget", partition.d_forget},
          {"embeddings_joint", partition.embeddings_joint},
          {"gated_layers", gated_layers},
          {"steps", steps},
          {"warmup_steps", warmup_steps},
          {"batch_size", batch_size},
          {"peak_lr", peak_lr},
          {"optimizer", optimizer.to_json()},
          {"seed", seed},
          {"eval_every", eval_every},
          {"keep_snapshots", keep_snapshots}};
}

TrainPlan TrainPlan::from_json(const nlohmann::json& j) {
  TrainPlan p;
  p.method = method_from_string(j.value("method", std::string(to_string(p.method))));
  p.partition.variant = variant_from_string(j.value("variant", std::string(to_string(p.partition.variant))));
  p.partition.h_forget = j.value("h_forget", p.partition.h_forget);
  p.partition.d_forget = j.value("d_forget", p.partition.d_forget);
  p.partition.embeddings_joint = j.value("embeddings_joint", p.partition.embeddings_joint);
  p.gated_layers = j.value("gated_layers", p.gated_layers);
  p.steps = j.value("steps", p.steps);
  p.warmup_steps = j.value("warmup_steps", p.warmup_steps);
  p.batch_size = j.value("batch_size", p.batch_size);
  p.peak_lr = j.value("peak_lr", p.peak_lr);
  if (j.contains("optimizer")) p.optimizer = OptimizerConfig::from_json(j.at("optimizer"));
  p.seed = j.value("seed", p.seed);
  p.eval_every = j.value("eval_every", p.eval_every);
  p.keep_snapshots = j.value("keep_snapshots", p.keep_snapshots);
  return p;
}

LabeledDataset training_view(const LabeledDataset& data, Method method) {
  switch (method) {
    case Method::kFilterWeak: return data.without_label(BatchLabel::kForget);
    case Method::kFilterPerfect: return data.without_domain(Domain::kForget);
    case Method::kSgtm:
    case Method::kFilterNone: break;
  }
  return data;
}

template <class T>
Transformer<T> reported_model(const Transformer<T>& model, const TrainPlan& plan) {
  if (plan.method != Method::kSgtm) return model;
  return ablate(model, build_designation(model.config(), plan.partition));
}

namespace {

std::vector<PlannedBatch> schedule_batches(const LabeledDataset& data, const TrainPlan& plan) {
  std::vector<PlannedBatch> out = plan_epoch(data, plan.batch_size, plan.seed);
  if (plan.steps == 0) return out;
  if (out.empty()) throw ContractError("training set is empty");
  for (std::uint64_t epoch = 1; out.size() < plan.steps; ++epoch) {
    auto more = plan_epoch(data, plan.batch_size, mix_seed(plan.seed, 0x6570, epoch));
    out.insert(out.end(), more.begin(), more.end());
  }
  out.resize(plan.steps);
  return out;
}

template <class T>
MetricsRow metrics_row(const Transformer<T>& reported, const EvalSuite& eval, std::size_t step,
                       std::uint64_t tok_r, std::uint64_t tok_f, std::size_t n_params) {
  const EvalLosses l = evaluate(reported, eval);
  MetricsRow row;
  row.step = step;
  row.tokens_retain = tok_r;
  row.tokens_forget = tok_f;
  row.flops = 6.0 * static_cast<double>(n_params) * static_cast<double>(tok_r + tok_f);
  row.loss_retain_test = l.retain;
  row.loss_forget_test = l.forget;
  row.loss_related_test = l.related;
  return row;
}

}  // namespace

template <class T>
RunRecord train(const TrainPlan& plan, const LabeledDataset& data, const EvalSuite& eval,
                Transformer<T>& model, const TrainHooks<T>* hooks) {
  plan.validate();
  const ModelConfig& cfg = model.config();
  std::optional<Interventions> iv;
  if (plan.method == Method::kSgtm) {
    plan.partition.validate(cfg);
    iv.emplace(cfg, plan.partition, plan.gated_layers);
  }
  const LabeledDataset view = training_view(data, plan.method);
  const std::vector<PlannedBatch> batches = schedule_batches(view, plan);
  const std::size_t total = batches.size();
  if (total == 0) throw ContractError("training set is empty");
  if (plan.warmup_steps >= total && total > 1) {
    throw ConfigError("warmup_steps (" + std::to_string(plan.warmup_steps) +
                      ") must be below the number of steps (" + std::to_string(total) + ")");
  }

  RunRecord rec;
  rec.method = to_string(plan.method);
  if (iv) rec.method += std::string(":") + to_string(plan.partition.variant);
  rec.model = cfg;
  if (iv) rec.partition = plan.partition;
  rec.seed = plan.seed;
  rec.n_params = model.params().total_elements();

  AdamW<T> opt(model.params(), iv ? &iv->designation() : nullptr, plan.optimizer);
  std::uint64_t tok_r = 0, tok_f = 0;

  for (std::size_t s = 1; s <= total; ++s) {
    const PlannedBatch& pb = batches[s - 1];
    // Filter baselines train without interventions.
    const BatchLabel label = iv ? pb.label : BatchLabel::kUnlabeled;
    const TokenBatch batch = make_batch(view, pb.examples);
    if (hooks && hooks->before_step) hooks->before_step(s, label, batch, model);

    const ForwardOptions opts = iv ? iv->forward_options(label) : ForwardOptions{};
    Graph<T> g;
    ForwardResult fwd = model.forward(g, batch, opts);
    const NodeId loss = lm_loss(g, fwd.output, batch);
    const double loss_value = static_cast<double>(g.value(loss)[0]);
    if (!std::isfinite(loss_value)) {
      rec.diverged = true;
      rec.diagnostic = "non-finite training loss at step " + std::to_string(s) + " (" +
                       to_string(pb.label) + " batch, lr " +
                       std::to_string(cosine_lr(s, total, plan.warmup_steps, plan.peak_lr)) + ")";
      break;
    }
    g.backward(loss);
    ParamGrads<T> grads = model.collect_grads(g, fwd, opts);
    std::optional<Tag> skip;
    if (iv) {
      iv->apply_gradient_mask(grads, label);
      if (plan.optimizer.skip_masked_groups) skip = iv->skipped_group(label);
    }
    opt.step(model.params(), grads, cosine_lr(s, total, plan.warmup_steps, plan.peak_lr), skip);
    if (hooks && hooks->after_step) hooks->after_step(s, label, batch, model);

    for (std::size_t i : pb.examples) {
      const LabeledExample& ex = view.examples()[i];
      if (ex.true_domain == Domain::kForget) {
        tok_f += ex.tokens.size();
        if (pb.label == BatchLabel::kUnlabeled) rec.tokens_forget_unlabeled += ex.tokens.size();
      } else {
        tok_r += ex.tokens.size();
      }
    }

    const bool eval_now = s == total || (plan.eval_every > 0 && s % plan.eval_every == 0);
    if (eval_now) {
      rec.metrics.push_back(
          metrics_row(reported_model(model, plan), eval, s, tok_r, tok_f, rec.n_params));
      if (plan.keep_snapshots) rec.snapshots.push_back({s, model.params().template cast<float>()});
    }
  }
  return rec;
}

// ---------------------------------------------------------------------------
// RMU

void RmuPlan::resolve(const ModelConfig& config) {
  if (!unlearn_layer) unlearn_layer = config.n_layers - 1;
  if (*unlearn_layer >= config.n_layers) {
    throw ConfigError("rmu unlearn_layer " + std::to_string(*unlearn_layer) + " out of range");
  }
  if (update_layers.empty()) {
    const std::size_t lo = *unlearn_layer >= 2 ? *unlearn_layer - 2 : 0;
    for (std::size_t l = lo; l <= *unlearn_layer; ++l) update_layers.push_back(l);
  }
  for (std::size_t l : update_layers) {
    if (l >= config.n_layers) throw ConfigError("rmu update layer " + std::to_string(l) + " out of range");
  }
  if (batch_size == 0 || steps == 0) throw ConfigError("rmu steps and batch_size must be positive");
  if (alpha < 0) throw ConfigError("rmu alpha must be non-negative");
}

nlohmann::json RmuPlan::to_json() const {
  nlohmann::json j = {{"steps", steps},
                      {"alpha", alpha},
                      {"steering_coefficient", steering_coefficient},
                      {"update_layers", update_layers},
                      {"batch_size", batch_size},
                      {"lr", lr},
                      {"seed", seed},
                      {"eval_every", eval_every}};
  j["unlearn_layer"] = unlearn_layer ? nlohmann::json(*unlearn_layer) : nlohmann::json(nullptr);
  return j;
}

RmuPlan RmuPlan::from_json(const nlohmann::json& j) {
  RmuPlan p;
  p.steps = j.value("steps", p.steps);
  p.alpha = j.value("alpha", p.alpha);
  p.steering_coefficient = j.value("steering_coefficient", p.steering_coefficient);
  if (j.contains("unlearn_layer") && !j.at("unlearn_layer").is_null()) {
    p.unlearn_layer = j.at("unlearn_layer").get<std::size_t>();
  }
  p.update_layers = j.value("update_layers", p.update_layers);
  p.batch_size = j.value("batch_size", p.batch_size);
  p.lr = j.value("lr", p.lr);
  p.seed = j.value("seed", p.seed);
  p.eval_every = j.value("eval_every", p.eval_every);
  return p;
}

namespace {

// Mean squared distance of non-pad rows of h to target.
template <class T>
NodeId masked_mse(Graph<T>& g, NodeId h, Tensor<T> target, const TokenBatch& batch) {
  const std::size_t d = g.value(h).dim(1);
  Tensor<T> mask(g.value(h).shape(), T(0));
  std::size_t valid = 0;
  for (std::size_t r = 0; r < batch.ids.size(); ++r) {
    if (batch.ids[r] == kPadToken) continue;
    ++valid;
    for (std::size_t j = 0; j < d; ++j) mask.raw()[r * d + j] = T(1);
  }
  const NodeId diff = g.mul(g.sub(h, g.constant(std::move(target))), g.constant(std::move(mask)));
  return g.scale(g.sum(g.mul(diff, diff)), T(1) / static_cast<T>(valid * d));
}

}  // namespace

template <class T>
RunRecord run_rmu(const RmuPlan& plan_in, Transformer<T>& model, const LabeledDataset& data,
                  const EvalSuite& eval) {
  RmuPlan plan = plan_in;
  const ModelConfig& cfg = model.config();
  plan.resolve(cfg);
  const Transformer<T> frozen = model;

  const ParamLayout& lay = model.layout();
  std::vector<bool> trainable(model.params().size(), false);
  for (std::size_t l : plan.update_layers) {
    const BlockParams& b = lay.blocks[l];
    for (std::size_t i : {b.w_1, b.b_1, b.w_2, b.b_2}) trainable[i] = true;
  }
  OptimizerConfig oc;
  oc.weight_decay = 0.0;
  AdamW<T> opt(model.params(), nullptr, oc, trainable);

  std::mt19937_64 rng(mix_seed(plan.seed, 0x726d75));
  Tensor<T> u({cfg.d_model});
  {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    double norm = 0;
    std::vector<double> raw(cfg.d_model);
    for (double& x : raw) {
      x = unit(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < cfg.d_model; ++j) {
      u.raw()[j] = static_cast<T>(plan.steering_coefficient * raw[j] / norm);
    }
  }
  const BatchLabel retain_label =
      data.indices(BatchLabel::kRetain).empty() ? BatchLabel::kUnlabeled : BatchLabel::kRetain;

  RunRecord rec;
  rec.method = "rmu";
  rec.model = cfg;
  rec.seed = plan.seed;
  rec.n_params = model.params().total_elements();
  std::uint64_t tok_r = 0, tok_f = 0;

  ForwardOptions opts;
  opts.trainable = trainable;
  opts.stop_after_block = *plan.unlearn_layer;
  ForwardOptions frozen_opts;
  frozen_opts.track_grads = false;
  frozen_opts.stop_after_block = *plan.unlearn_layer;

  for (std::size_t s = 1; s <= plan.steps; ++s) {
    const auto fb = sample_batch(data, BatchLabel::kForget, plan.batch_size, rng);
    const auto rb = sample_batch(data, retain_label, plan.batch_size, rng);
    if (!fb || !rb) throw ContractError("rmu needs labelled forget and retain examples");

    Graph<T> g;
    ForwardResult ff = model.forward(g, *fb, opts);
    Tensor<T> steer(g.value(ff.output).shape());
    for (std::size_t r = 0; r < steer.dim(0); ++r) {
      std::copy(u.raw(), u.raw() + cfg.d_model, steer.raw() + r * cfg.d_model);
    }
    const NodeId lf = masked_mse(g, ff.output, std::move(steer), *fb);

    Graph<T> g_ref;
    ForwardResult fr_ref = frozen.forward(g_ref, *rb, frozen_opts);
    ForwardResult fr = model.forward(g, *rb, opts);
    const NodeId lr = masked_mse(g, fr.output, g_ref.value(fr_ref.output), *rb);

    const NodeId loss = g.add(lf, g.scale(lr, static_cast<T>(plan.alpha)));
    if (!std::isfinite(static_cast<double>(g.value(loss)[0]))) {
      rec.diverged = true;
      rec.diagnostic = "non-finite rmu loss at step " + std::to_string(s);
      break;
    }
    g.backward(loss);
    ParamGrads<T> grads = model.collect_grads(g, ff, opts);
    const ParamGrads<T> grads_r = model.collect_grads(g, fr, opts);
    for (std::size_t i = 0; i < grads.size(); ++i) {
      T* a = grads[i].raw();
      const T* b = grads_r[i].raw();
      for (std::size_t e = 0; e < grads[i].numel(); ++e) a[e] += b[e];
    }
    opt.step(model.params(), grads, plan.lr);

    tok_f += fb->non_pad_tokens();
    tok_r += rb->non_pad_tokens();
    if (s == plan.steps || (plan.eval_every > 0 && s % plan.eval_every == 0)) {
      rec.metrics.push_back(metrics_row(model, eval, s, tok_r, tok_f, rec.n_params));
    }
  }
  rec.snapshots.push_back({plan.steps, model.params().template cast<float>()});
  return rec;
}

// ---------------------------------------------------------------------------
// Fine-tuning attack

void FinetunePlan::validate() const {
  if (steps == 0 || batch_size < 2) throw ConfigError("finetune needs steps > 0 and batch_size >= 2");
  if (mix <= 0 || mix >= 1) throw ConfigError("finetune mix must be in (0, 1)");
  if (!(lr > 0)) throw ConfigError("finetune lr must be positive");
}

nlohmann::json FinetunePlan::to_json() const {
  return {{"steps", steps},     {"batch_size", batch_size}, {"lr", lr},
          {"mix", mix},         {"eval_every", eval_every}, {"tolerance", tolerance},
          {"seed", seed}};
}

FinetunePlan FinetunePlan::from_json(const nlohmann::json& j) {
  FinetunePlan p;
  p.steps = j.value("steps", p.steps);
  p.batch_size = j.value("batch_size", p.batch_size);
  p.lr = j.value("lr", p.lr);
  p.mix = j.value("mix", p.mix);
  p.eval_every = j.value("eval_every", p.eval_every);
  p.tolerance = j.value("tolerance", p.tolerance);
  p.seed = j.value("seed", p.seed);
  return p;
}

template <class T>
RelearnCurve finetune_attack(const FinetunePlan& plan, Transformer<T> model,
                             const LabeledDataset& data, const EvalSuite& eval,
                             double baseline_forget_loss) {
  plan.validate();
  std::vector<std::size_t> forget_idx, retain_idx;
  for (std::size_t i = 0; i < data.size(); ++i) {
    (data.examples()[i].true_domain == Domain::kForget ? forget_idx : retain_idx).push_back(i);
  }
  if (forget_idx.empty() || retain_idx.empty()) {
    throw ContractError("finetune_attack needs examples from both domains");
  }
  const auto n_forget = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(plan.mix * static_cast<double>(plan.batch_size))), 1,
      plan.batch_size - 1);

  OptimizerConfig oc;
  oc.weight_decay = 0.0;
  AdamW<T> opt(model.params(), nullptr, oc);
  std::mt19937_64 rng(mix_seed(plan.seed, 0x6174746b));
  std::uniform_int_distribution<std::size_t> pick_f(0, forget_idx.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_r(0, retain_idx.size() - 1);

  RelearnCurve curve;
  curve.baseline_forget_loss = baseline_forget_loss;
  std::uint64_t tok_f = 0;
  auto record = [&](std::size_t step) {
    const EvalLosses l = evaluate(model, eval);
    curve.points.push_back({step, tok_f, l.forget, l.retain});
    if (!curve.steps_to_baseline && l.forget <= baseline_forget_loss + plan.tolerance) {
      curve.steps_to_baseline = step;
      curve.tokens_to_baseline = tok_f;
    }
  };
  record(0);
  for (std::size_t s = 1; s <= plan.steps && !curve.steps_to_baseline; ++s) {
    std::vector<std::size_t> which;
    for (std::size_t k = 0; k < plan.batch_size; ++k) {
      which.push_back(k < n_forget ? forget_idx[pick_f(rng)] : retain_idx[pick_r(rng)]);
    }
    const TokenBatch batch = make_batch(data, which);
    for (std::size_t k = 0; k < n_forget; ++k) tok_f += data.examples()[which[k]].tokens.size();
    Graph<T> g;
    ForwardResult fwd = model.forward(g, batch);
    const NodeId loss = lm_loss(g, fwd.output, batch);
    g.backward(loss);
    opt.step(model.params(), model.collect_grads(g, fwd), plan.lr);
    if (s == plan.steps || (plan.eval_every > 0 && s % plan.eval_every == 0)) record(s);
  }
  return curve;
}

#define SGTM_TRAINER_INSTANTIATE(T)                                                              \
  template RunRecord train(const TrainPlan&, const LabeledDataset&, const EvalSuite&,              \
                           Transformer<T>&, const TrainHooks<T>*);                                \
  template Transformer<T> reported_model(const Transformer<T>&, const TrainPlan&);                \
  template RunRecord run_rmu(const RmuPlan&, Transformer<T>&, const LabeledDataset&,               \
                             const EvalSuite&);                                                   \
  template RelearnCurve finetune_attack(const FinetunePlan&, Transformer<T>, const LabeledDataset&, \
                                        const EvalSuite&, double);

SGTM_TRAINER_INSTANTIATE(float)
SGTM_TRAINER_INSTANTIATE(double)

}  // namespace sgtm
