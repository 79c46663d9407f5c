#include "sgtm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace sgtm {

const MetricsRow& RunRecord::final_metrics() const {
  if (metrics.empty()) throw ContractError("run '" + method + "' has no metrics");
  return metrics.back();
}

namespace {

std::vector<TokenBatch> batches_of(const std::vector<const LabeledExample*>& examples,
                                   std::size_t batch_size) {
  std::vector<TokenBatch> out;
  for (std::size_t i = 0; i < examples.size(); i += batch_size) {
    const std::size_t n = std::min(batch_size, examples.size() - i);
    std::size_t seq = 2;
    for (std::size_t k = 0; k < n; ++k) seq = std::max(seq, examples[i + k]->tokens.size());
    TokenBatch b;
    b.batch = n;
    b.seq = seq;
    b.ids.assign(n * seq, kPadToken);
    for (std::size_t k = 0; k < n; ++k) {
      const auto& toks = examples[i + k]->tokens;
      std::copy(toks.begin(), toks.end(), b.ids.begin() + static_cast<std::ptrdiff_t>(k * seq));
    }
    out.push_back(std::move(b));
  }
  return out;
}

template <class T>
Tensor<T> logits_of(const Transformer<T>& model, const TokenBatch& batch) {
  Graph<T> g;
  ForwardOptions opts;
  opts.track_grads = false;
  ForwardResult fwd = model.forward(g, batch, opts);
  return g.value(fwd.output);
}

// Non-pad positions of batch, in row order: (target, related flag).
void position_flags(const TokenBatch& batch, const std::vector<std::uint8_t>* shared,
                    std::vector<std::int32_t>& targets, std::vector<std::uint8_t>& related) {
  targets = next_token_targets(batch);
  related.clear();
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] == kPadToken) continue;
    const std::int32_t in = batch.ids[r];
    related.push_back(shared && static_cast<std::size_t>(in) < shared->size() ? (*shared)[in] : 0);
  }
}

struct Accum {
  double sum = 0;
  std::size_t n = 0;
  void add(double v) {
    sum += v;
    ++n;
  }
  double mean() const { return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN(); }
};

}  // namespace

EvalSuite EvalSuite::build(const std::vector<LabeledExample>& test_examples, std::size_t batch_size,
                           const std::vector<std::int32_t>& shared_tokens, std::size_t vocab_size) {
  if (batch_size == 0) throw ConfigError("eval batch size must be positive");
  std::vector<const LabeledExample*> f, r;
  for (const LabeledExample& ex : test_examples) {
    (ex.true_domain == Domain::kForget ? f : r).push_back(&ex);
  }
  EvalSuite s;
  s.forget = batches_of(f, batch_size);
  s.retain = batches_of(r, batch_size);
  s.shared.assign(vocab_size, 0);
  for (std::int32_t t : shared_tokens) {
    if (t >= 0 && static_cast<std::size_t>(t) < vocab_size) s.shared[t] = 1;
  }
  return s;
}

template <class T>
EvalLosses evaluate(const Transformer<T>& model, const EvalSuite& suite,
                    const std::vector<double>* bias) {
  Accum forget, retain, related;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> flags;
  for (const TokenBatch& b : suite.forget) {
    targets = next_token_targets(b);
    for (double v : token_losses(logits_of(model, b), targets, bias)) forget.add(v);
  }
  for (const TokenBatch& b : suite.retain) {
    position_flags(b, &suite.shared, targets, flags);
    const std::vector<double> losses = token_losses(logits_of(model, b), targets, bias);
    for (std::size_t i = 0; i < losses.size(); ++i) {
      retain.add(losses[i]);
      if (flags[i]) related.add(losses[i]);
    }
  }
  return {forget.mean(), retain.mean(), related.mean()};
}

template <class T>
LogitCache collect_logits(const Transformer<T>& model, const std::vector<TokenBatch>& batches,
                          const std::vector<std::uint8_t>* shared) {
  LogitCache cache;
  cache.vocab = model.config().vocab_size;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> flags;
  for (const TokenBatch& b : batches) {
    position_flags(b, shared, targets, flags);
    const Tensor<T> logits = logits_of(model, b);
    for (std::size_t r = 0; r < targets.size(); ++r) {
      if (targets[r] == kPadToken) continue;
      const T* row = logits.raw() + r * cache.vocab;
      for (std::size_t j = 0; j < cache.vocab; ++j) cache.logits.push_back(static_cast<float>(row[j]));
      cache.targets.push_back(targets[r]);
    }
    cache.related.insert(cache.related.end(), flags.begin(), flags.end());
  }
  return cache;
}

double cached_loss(const LogitCache& cache, const std::vector<double>& bias,
                   std::vector<double>* grad, bool related_only, std::vector<double>* curvature) {
  const std::size_t V = cache.vocab;
  if (bias.size() != V) throw DimensionError("cached_loss: bias length mismatch");
  if (grad) grad->assign(V, 0.0);
  if (curvature) curvature->assign(V, 0.0);
  std::vector<double> z(V);
  double total = 0;
  std::size_t n = 0;
  for (std::size_t r = 0; r < cache.rows(); ++r) {
    if (related_only && !cache.related[r]) continue;
    const float* row = cache.logits.data() + r * V;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < V; ++j) {
      z[j] = static_cast<double>(row[j]) + bias[j];
      mx = std::max(mx, z[j]);
    }
    double s = 0;
    for (std::size_t j = 0; j < V; ++j) {
      z[j] = std::exp(z[j] - mx);
      s += z[j];
    }
    const std::int32_t t = cache.targets[r];
    total += std::log(s) + mx - (static_cast<double>(row[t]) + bias[t]);
    ++n;
    if (grad) {
      for (std::size_t j = 0; j < V; ++j) (*grad)[j] += z[j] / s;
      (*grad)[t] -= 1.0;
    }
    if (curvature) {
      for (std::size_t j = 0; j < V; ++j) {
        const double p = z[j] / s;
        (*curvature)[j] += p * (1.0 - p);
      }
    }
  }
  if (n == 0) return std::numeric_limits<double>::quiet_NaN();
  if (grad) {
    for (double& g : *grad) g /= static_cast<double>(n);
  }
  if (curvature) {
    for (double& c : *curvature) c /= static_cast<double>(n);
  }
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------

nlohmann::json CalibrationResult::to_json() const {
  return {{"alpha", alpha},
          {"iterations", iterations},
          {"converged", converged},
          {"objective_before", objective_before},
          {"objective_after", objective_after},
          {"before", {{"forget", before.forget}, {"retain", before.retain}, {"related", before.related}}},
          {"after", {{"forget", after.forget}, {"retain", after.retain}, {"related", after.related}}},
          {"objective_trace", objective_trace},
          {"logit_bias", logit_bias}};
}

CalibrationResult calibrate(const LogitCache& forget, const LogitCache& retain,
                            const CalibrationOptions& options) {
  if (forget.rows() == 0 || retain.rows() == 0) {
    throw ContractError("calibrate: evaluation sets must be non-empty");
  }
  if (forget.vocab != retain.vocab) throw DimensionError("calibrate: vocabulary mismatch");
  const std::size_t V = forget.vocab;
  const double a = options.alpha;
  const double norm = 1.0 + a;

  CalibrationResult res;
  res.alpha = a;
  std::vector<double> bias(V, 0.0), gf, gr, hf, hr, grad(V);
  const bool pre = options.precondition;
  auto objective = [&](const std::vector<double>& b, double& lf, double& lr) {
    lf = cached_loss(forget, b, &gf, false, pre ? &hf : nullptr);
    lr = cached_loss(retain, b, &gr, false, pre ? &hr : nullptr);
    return lf + a * lr;
  };
  double lf = 0, lr = 0;
  double J = objective(bias, lf, lr);
  auto take_grad = [&] {
    for (std::size_t j = 0; j < V; ++j) {
      grad[j] = (gf[j] + a * gr[j]) / norm;
      if (pre) grad[j] /= (hf[j] + a * hr[j]) / norm + options.damping;
    }
  };
  take_grad();
  res.before.forget = lf;
  res.before.retain = lr;
  res.objective_before = J;
  res.objective_trace.push_back(J);

  double step = options.lr;
  std::vector<double> trial(V);
  for (std::size_t it = 0; it < options.max_iters; ++it) {
    bool accepted = false;
    double tf = 0, tr = 0, Jt = 0;
    while (step > 1e-12) {
      for (std::size_t j = 0; j < V; ++j) trial[j] = bias[j] - step * grad[j];
      Jt = objective(trial, tf, tr);
      if (Jt <= J) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    ++res.iterations;
    if (!accepted) {
      res.converged = true;  // no descent step left
      break;
    }
    const double change = J - Jt;
    bias.swap(trial);
    J = Jt;
    lf = tf;
    lr = tr;
    take_grad();
    res.objective_trace.push_back(J);
    step *= 1.5;
    if (change < options.tolerance) {
      res.converged = true;
      break;
    }
  }
  res.logit_bias = bias;
  res.after.forget = lf;
  res.after.retain = lr;
  res.objective_after = J;
  res.before.related = cached_loss(retain, std::vector<double>(V, 0.0), nullptr, true);
  res.after.related = cached_loss(retain, bias, nullptr, true);
  return res;
}

template <class T>
CalibrationResult calibrate(const Transformer<T>& model, const EvalSuite& suite,
                            const CalibrationOptions& options) {
  const LogitCache f = collect_logits(model, suite.forget);
  const LogitCache r = collect_logits(model, suite.retain, &suite.shared);
  return calibrate(f, r, options);
}

// ---------------------------------------------------------------------------

LossHistogram make_histogram(std::vector<double> values, std::size_t vocab_size, std::size_t bins) {
  if (bins == 0) throw ConfigError("histogram needs at least one bin");
  LossHistogram h;
  h.lo = 0.0;
  h.hi = std::log(static_cast<double>(vocab_size)) + 1.0;
  h.counts.assign(bins, 0);
  const double width = (h.hi - h.lo) / static_cast<double>(bins);
  for (double v : values) {
    auto k = static_cast<std::ptrdiff_t>(std::floor((v - h.lo) / width));
    k = std::clamp<std::ptrdiff_t>(k, 0, static_cast<std::ptrdiff_t>(bins) - 1);
    ++h.counts[static_cast<std::size_t>(k)];
  }
  if (!values.empty()) {
    h.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t m = sorted.size() / 2;
    h.median = sorted.size() % 2 ? sorted[m] : 0.5 * (sorted[m - 1] + sorted[m]);
  }
  h.values = std::move(values);
  return h;
}

template <class T>
LossHistogram per_token_losses(const Transformer<T>& model, const std::vector<TokenBatch>& batches,
                               const std::vector<double>* bias, std::size_t bins) {
  std::vector<double> all;
  for (const TokenBatch& b : batches) {
    const std::vector<std::int32_t> targets = next_token_targets(b);
    for (double v : token_losses(logits_of(model, b), targets, bias)) all.push_back(v);
  }
  return make_histogram(std::move(all), model.config().vocab_size, bins);
}

// ---------------------------------------------------------------------------

template <class T>
std::vector<GradNormSample> grad_norm_study(const Transformer<T>& model,
                                            const ParamDesignation& designation,
                                            const std::vector<LabeledExample>& examples) {
  designation.check_matches(model.params());
  const auto tags = designation.element_tags();
  const ParamSet<T>& params = model.params();

  double theta_sq[3] = {0, 0, 0};
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T* p = params[i].raw();
    for (std::size_t e = 0; e < params[i].numel(); ++e) {
      theta_sq[static_cast<int>(tags[i][e])] += static_cast<double>(p[e]) * static_cast<double>(p[e]);
    }
  }
  const double theta_f = std::sqrt(theta_sq[static_cast<int>(Tag::kForget)]);
  const double theta_r = std::sqrt(theta_sq[static_cast<int>(Tag::kRetain)]);
  if (theta_f == 0.0 || theta_r == 0.0) {
    throw ContractError("grad_norm_study: a parameter group has zero norm (ablated checkpoint?)");
  }

  std::vector<GradNormSample> out;
  for (const LabeledExample& ex : examples) {
    if (ex.tokens.size() < 2) continue;
    TokenBatch b;
    b.batch = 1;
    b.seq = ex.tokens.size();
    b.ids = ex.tokens;
    Graph<T> g;
    ForwardResult fwd = model.forward(g, b);
    g.backward(lm_loss(g, fwd.output, b));
    const ParamGrads<T> grads = model.collect_grads(g, fwd);
    double sq[3] = {0, 0, 0};
    for (std::size_t i = 0; i < grads.size(); ++i) {
      const T* d = grads[i].raw();
      for (std::size_t e = 0; e < grads[i].numel(); ++e) {
        sq[static_cast<int>(tags[i][e])] += static_cast<double>(d[e]) * static_cast<double>(d[e]);
      }
    }
    GradNormSample s;
    s.example_id = ex.id;
    s.domain = ex.true_domain;
    s.forget_relative = std::sqrt(sq[static_cast<int>(Tag::kForget)]) / theta_f;
    s.retain_relative = std::sqrt(sq[static_cast<int>(Tag::kRetain)]) / theta_r;
    out.push_back(s);
  }
  return out;
}

GradNormSummary summarize(const std::vector<GradNormSample>& samples) {
  Accum ff, fr, rf, rr;
  for (const GradNormSample& s : samples) {
    if (s.domain == Domain::kForget) {
      ff.add(s.forget_relative);
      rf.add(s.retain_relative);
    } else {
      fr.add(s.forget_relative);
      rr.add(s.retain_relative);
    }
  }
  return {ff.mean(), fr.mean(), rf.mean(), rr.mean()};
}

// ---------------------------------------------------------------------------

nlohmann::json LeakageReport::to_json() const {
  auto opt = [](const std::optional<double>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  auto num = [](double v) -> nlohmann::json {
    return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
  };
  nlohmann::json j = {{"undiscovered_forget_tokens", undiscovered_forget_tokens},
                      {"forget_loss", forget_loss},
                      {"in_range", in_range},
                      {"equivalent_forget_tokens", opt(equivalent_forget_tokens)},
                      {"leakage", opt(leakage)},
                      {"equivalent_lower", num(equivalent_lower)},
                      {"equivalent_upper", num(equivalent_upper)},
                      {"leakage_lower", num(leakage_lower)},
                      {"leakage_upper", num(leakage_upper)}};
  if (bracket) {
    j["bracket"] = {{{"forget_tokens", bracket->first.forget_tokens}, {"forget_loss", bracket->first.forget_loss}},
                    {{"forget_tokens", bracket->second.forget_tokens}, {"forget_loss", bracket->second.forget_loss}}};
  } else {
    j["bracket"] = nullptr;
  }
  return j;
}

LeakageReport leakage(double forget_loss, double undiscovered_forget_tokens,
                      std::vector<BaselinePoint> curve) {
  if (curve.size() < 2) throw ContractError("leakage: baseline curve needs at least two runs");
  std::sort(curve.begin(), curve.end(), [](const BaselinePoint& a, const BaselinePoint& b) {
    return a.forget_tokens < b.forget_tokens;
  });
  LeakageReport rep;
  rep.undiscovered_forget_tokens = undiscovered_forget_tokens;
  rep.forget_loss = forget_loss;
  const double inf = std::numeric_limits<double>::infinity();

  for (const BaselinePoint& p : curve) {
    if (p.forget_loss == forget_loss) {
      rep.in_range = true;
      rep.equivalent_forget_tokens = p.forget_tokens;
      rep.bracket = std::make_pair(p, p);
      break;
    }
  }
  for (std::size_t i = 0; !rep.in_range && i + 1 < curve.size(); ++i) {
    const BaselinePoint& a = curve[i];
    const BaselinePoint& b = curve[i + 1];
    const double lo = std::min(a.forget_loss, b.forget_loss);
    const double hi = std::max(a.forget_loss, b.forget_loss);
    if (forget_loss < lo || forget_loss > hi || lo == hi) continue;
    const double w = (forget_loss - a.forget_loss) / (b.forget_loss - a.forget_loss);
    rep.in_range = true;
    rep.equivalent_forget_tokens = a.forget_tokens + w * (b.forget_tokens - a.forget_tokens);
    rep.bracket = std::make_pair(a, b);
  }

  if (rep.in_range) {
    rep.equivalent_lower = rep.equivalent_upper = *rep.equivalent_forget_tokens;
  } else {
    auto [mn, mx] = std::minmax_element(curve.begin(), curve.end(),
                                        [](const BaselinePoint& a, const BaselinePoint& b) {
                                          return a.forget_loss < b.forget_loss;
                                        });
    if (forget_loss > mx->forget_loss) {
      rep.equivalent_lower = 0.0;
      rep.equivalent_upper = mx->forget_tokens;
    } else {
      rep.equivalent_lower = mn->forget_tokens;
      rep.equivalent_upper = inf;
    }
  }

  if (undiscovered_forget_tokens > 0) {
    rep.leakage_lower = rep.equivalent_lower / undiscovered_forget_tokens;
    rep.leakage_upper = rep.equivalent_upper / undiscovered_forget_tokens;
    if (rep.in_range) rep.leakage = *rep.equivalent_forget_tokens / undiscovered_forget_tokens;
  } else {
    rep.leakage_lower = 0.0;
    rep.leakage_upper = inf;
  }
  return rep;
}

LeakageReport leakage(const RunRecord& run, const std::vector<BaselinePoint>& curve) {
  return leakage(run.final_metrics().loss_forget_test,
                 static_cast<double>(run.tokens_forget_unlabeled), curve);
}

std::vector<BaselinePoint> baseline_curve(const std::vector<const RunRecord*>& runs) {
  std::vector<BaselinePoint> out;
  for (const RunRecord* r : runs) {
    const MetricsRow& m = r->final_metrics();
    out.push_back({static_cast<double>(m.tokens_forget), m.loss_forget_test});
  }
  return out;
}

// ---------------------------------------------------------------------------

double ScalingFit::loss_at(double compute) const { return alpha * std::pow(compute, -beta); }

double ScalingFit::compute_for(double loss) const { return std::pow(alpha / loss, 1.0 / beta); }

const char* to_string(TestSubset s) {
  switch (s) {
    case TestSubset::kRetain: return "retain";
    case TestSubset::kForget: return "forget";
    case TestSubset::kRelated: return "related";
  }
  return "unknown";
}

TestSubset subset_from_string(const std::string& s) {
  for (TestSubset t : {TestSubset::kRetain, TestSubset::kForget, TestSubset::kRelated}) {
    if (s == to_string(t)) return t;
  }
  throw ConfigError("unknown test subset '" + s + "'");
}

ScalingFit fit_scaling(const std::vector<std::pair<double, double>>& compute_loss) {
  if (compute_loss.size() < 2) throw ContractError("fit_scaling: need at least two points");
  std::vector<std::pair<double, double>> pts = compute_loss;
  std::sort(pts.begin(), pts.end());
  const double n = static_cast<double>(pts.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (auto [c, l] : pts) {
    if (!(c > 0) || !(l > 0)) throw ContractError("fit_scaling: compute and loss must be positive");
    const double x = std::log(c), y = std::log(l);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double denom = n * sxx - sx * sx;
  if (denom == 0.0) throw ContractError("fit_scaling: compute values are all equal");
  const double slope = (n * sxy - sx * sy) / denom;
  const double intercept = (sy - slope * sx) / n;
  ScalingFit fit;
  fit.beta = -slope;
  fit.alpha = std::exp(intercept);
  fit.n_points = pts.size();
  double ss = 0;
  for (auto [c, l] : pts) {
    const double r = std::log(l) - (intercept + slope * std::log(c));
    ss += r * r;
  }
  fit.residual = std::sqrt(ss / n);
  fit.low_confidence = pts.size() < 3 || fit.beta <= 0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    if (pts[i].second >= pts[i - 1].second) fit.low_confidence = true;
  }
  return fit;
}

ScalingFit fit_scaling(const std::vector<const RunRecord*>& runs, TestSubset subset) {
  std::vector<std::pair<double, double>> pts;
  for (const RunRecord* r : runs) {
    const MetricsRow& m = r->final_metrics();
    const double loss = subset == TestSubset::kRetain   ? m.loss_retain_test
                        : subset == TestSubset::kForget ? m.loss_forget_test
                                                        : m.loss_related_test;
    pts.emplace_back(m.flops, loss);
  }
  return fit_scaling(pts);
}

double compute_penalty(double loss, double full_compute, const ScalingFit& fit) {
  if (!(loss > 0) || !(full_compute > 0)) throw ContractError("compute_penalty: positive inputs required");
  return 1.0 - fit.compute_for(loss) / full_compute;
}

#define SGTM_EVAL_INSTANTIATE(T)                                                                   \
  template EvalLosses evaluate(const Transformer<T>&, const EvalSuite&, const std::vector<double>*); \
  template LogitCache collect_logits(const Transformer<T>&, const std::vector<TokenBatch>&,          \
                                     const std::vector<std::uint8_t>*);                             \
  template CalibrationResult calibrate(const Transformer<T>&, const EvalSuite&,                      \
                                       const CalibrationOptions&);                                  \
  template LossHistogram per_token_losses(const Transformer<T>&, const std::vector<TokenBatch>&,     \
                                          const std::vector<double>*, std::size_t);                 \
  template std::vector<GradNormSample> grad_norm_study(const Transformer<T>&,                        \
                                                       const ParamDesignation&,                     \
                                                       const std::vector<LabeledExample>&);

SGTM_EVAL_INSTANTIATE(float)
SGTM_EVAL_INSTANTIATE(double)

}  // namespace sgtm
