// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Desk-scale runs are trained once and shared between
// criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sgtm/eval.hpp"
#include "sgtm/experiment.hpp"
#include "sgtm/interventions.hpp"
#include "sgtm/trainer.hpp"

using namespace sgtm;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

std::string fmt(const char* f, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

void progress(const std::string& s) {
  std::fprintf(stderr, "  .. %s\n", s.c_str());
  std::fflush(stderr);
}

void info(const std::string& s) {
  std::printf("    info: %s\n", s.c_str());
  std::fflush(stdout);
}

struct Verdict {
  int id;
  bool pass;
};
std::vector<Verdict> verdicts;

void verdict(int id, const char* name, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %d %s: %s\n", pass ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
  verdicts.push_back({id, pass});
}

TokenBatch random_batch(const ModelConfig& c, std::size_t batch, std::size_t seq, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::int32_t> tok(kNumSpecialTokens, static_cast<std::int32_t>(c.vocab_size) - 1);
  TokenBatch b{batch, seq, std::vector<std::int32_t>(batch * seq)};
  for (auto& t : b.ids) t = tok(rng);
  return b;
}

std::vector<LabeledExample> random_examples(const ModelConfig& c, std::size_t n, Domain d, BatchLabel l,
                                            std::mt19937_64& rng) {
  std::uniform_int_distribution<std::int32_t> tok(kNumSpecialTokens, static_cast<std::int32_t>(c.vocab_size) - 1);
  std::uniform_int_distribution<std::size_t> len(4, c.context_len);
  std::vector<LabeledExample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].id = i;
    out[i].true_domain = d;
    out[i].assigned_label = l;
    out[i].tokens.resize(len(rng));
    for (auto& t : out[i].tokens) t = tok(rng);
  }
  return out;
}

const std::vector<Variant> kSgtmVariants{Variant::kSgtm, Variant::kSgtmJointProjection, Variant::kSgtmJointAttention};

// ---------------------------------------------------------------------------
// Criteria 1, 2: exact masking on a small model with random data.

ModelConfig small_model() { return {2, 32, 128, 4, 64, 32, true}; }

PartitionSpec small_spec(Variant v) {
  PartitionSpec s;
  s.h_forget = 1;
  s.d_forget = 16;
  s.variant = v;
  return s;
}

std::map<Variant, Transformer<float>> forget_trained;

void criterion_1() {
  const ModelConfig mc = small_model();
  std::mt19937_64 rng(101);
  const auto train_ex = random_examples(mc, 800, Domain::kForget, BatchLabel::kForget, rng);
  const LabeledDataset data(train_ex, mc.vocab_size);
  const EvalSuite eval = EvalSuite::build(random_examples(mc, 8, Domain::kRetain, BatchLabel::kUnlabeled, rng), 8, {},
                                          mc.vocab_size);
  std::size_t steps = 0, changed_elements = 0, violations = 0;
  for (Variant v : kSgtmVariants) {
    TrainPlan plan;
    plan.method = Method::kSgtm;
    plan.partition = small_spec(v);
    plan.steps = 100;
    plan.warmup_steps = 10;
    plan.batch_size = 8;
    plan.keep_snapshots = false;
    plan.seed = 7;
    const auto tags = build_designation(mc, plan.partition).element_tags();
    auto model = Transformer<float>::initialized(mc, 3);
    ParamSet<float> before;
    TrainHooks<float> hooks;
    hooks.before_step = [&](std::size_t, BatchLabel, const TokenBatch&, const Transformer<float>& m) {
      before = m.params();
    };
    hooks.after_step = [&](std::size_t, BatchLabel l, const TokenBatch&, const Transformer<float>& m) {
      if (l != BatchLabel::kForget) return;
      ++steps;
      for (std::size_t i = 0; i < before.size(); ++i) {
        const float* a = before[i].raw();
        const float* b = m.params()[i].raw();
        for (std::size_t k = 0; k < before[i].numel(); ++k) {
          const bool same = std::memcmp(a + k, b + k, sizeof(float)) == 0;
          if (tags[i][k] == Tag::kRetain && !same) ++violations;
          if (tags[i][k] != Tag::kRetain && !same) ++changed_elements;
        }
      }
    };
    train(plan, data, eval, model, &hooks);
    forget_trained.emplace(v, std::move(model));
  }
  info(fmt("%zu forget steps over %zu SGTM variants; %zu non-retain element updates observed", steps,
           kSgtmVariants.size(), changed_elements));
  verdict(1, "gradient exactness", steps == 100 * kSgtmVariants.size() && violations == 0 && changed_elements > 0,
          fmt("%zu retain elements changed across %zu forget steps", violations, steps));
}

void criterion_2() {
  const ModelConfig mc = small_model();
  std::mt19937_64 rng(202);
  std::size_t compared = 0, mismatches = 0;
  for (Variant v : kSgtmVariants) {
    const Interventions iv(mc, small_spec(v));
    auto it = forget_trained.find(v);
    const Transformer<float> model = it != forget_trained.end() ? it->second : Transformer<float>::initialized(mc, 3);
    const Transformer<float> ablated = ablate(model, iv.designation());
    const ForwardOptions masked = iv.forward_options(BatchLabel::kRetain);
    for (int k = 0; k < 20; ++k) {
      const TokenBatch b = random_batch(mc, 4, 2 + rng() % (mc.context_len - 1), rng);
      const double a = evaluate_loss(model, b, masked);
      const double c = evaluate_loss(ablated, b);
      ++compared;
      if (std::memcmp(&a, &c, sizeof(double)) != 0) ++mismatches;
    }
  }
  verdict(2, "forward-mask/ablation equivalence", mismatches == 0 && compared > 0,
          fmt("%zu of %zu retain-batch losses differ", mismatches, compared));
}

// ---------------------------------------------------------------------------
// Criterion 3: finite differences on the full model in double precision.

void criterion_3() {
  ModelConfig mc{2, 16, 48, 4, 40, 12, true};
  auto m = Transformer<double>::initialized(mc, 303);
  std::mt19937_64 rng(304);
  const TokenBatch b = random_batch(mc, 2, 10, rng);
  Graph<double> g;
  auto fwd = m.forward(g, b);
  g.backward(lm_loss(g, fwd.output, b));
  const ParamGrads<double> grads = m.collect_grads(g, fwd);

  const ParamLayout& lay = m.layout();
  std::vector<std::vector<std::size_t>> groups;
  for (const BlockParams& bp : lay.blocks) {
    groups.push_back({bp.ln1_gain, bp.ln1_bias, bp.w_qkv, bp.w_o, bp.b_o, bp.ln2_gain, bp.ln2_bias, bp.w_1, bp.b_1,
                      bp.w_2, bp.b_2});
  }
  groups.push_back({lay.tok_emb, lay.pos_emb, lay.lnf_gain, lay.lnf_bias});
  double worst = 0;
  std::size_t checked = 0;
  for (const auto& group : groups) {
    std::size_t total = 0;
    for (std::size_t i : group) total += m.params()[i].numel();
    std::uniform_int_distribution<std::size_t> pick(0, total - 1);
    for (int k = 0; k < 20; ++k) {
      std::size_t flat = pick(rng), pi = 0;
      for (std::size_t i : group) {
        if (flat < m.params()[i].numel()) {
          pi = i;
          break;
        }
        flat -= m.params()[i].numel();
      }
      const double saved = m.params()[pi][flat];
      const double h = 1e-4;
      auto at = [&](double x) {
        m.params()[pi][flat] = x;
        return evaluate_loss(m, b);
      };
      const double fd = (-at(saved + 2 * h) + 8 * at(saved + h) - 8 * at(saved - h) + at(saved - 2 * h)) / (12 * h);
      m.params()[pi][flat] = saved;
      const double a = grads[pi][flat];
      worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-7}));
      ++checked;
    }
  }
  verdict(3, "autodiff correctness", worst < 1e-4,
          fmt("worst relative error %.3g over %zu parameters (20 per block, 20 outer)", worst, checked));
}

// ---------------------------------------------------------------------------
// Criterion 11: one forget batch, down-projection retain rows.

void criterion_11(const ExperimentConfig& base) {
  const ModelConfig mc = base.model;
  const auto model = Transformer<double>::initialized(mc, 1111);
  std::mt19937_64 rng(1112);
  const TokenBatch b = random_batch(mc, 4, mc.context_len, rng);
  const std::size_t d_forget = base.partition.d_forget;
  auto w2_retain_norms = [&](Variant v) {
    PartitionSpec s = base.partition;
    s.variant = v;
    const Interventions iv(mc, s);
    const ForwardOptions o = iv.forward_options(BatchLabel::kForget);
    Graph<double> g;
    auto fwd = model.forward(g, b, o);
    g.backward(lm_loss(g, fwd.output, b));
    ParamGrads<double> grads = model.collect_grads(g, fwd, o);
    iv.apply_gradient_mask(grads, BatchLabel::kForget);
    std::vector<double> out;
    for (const BlockParams& bp : model.layout().blocks) {
      const Tensor<double>& t = grads[bp.w_2];
      const std::size_t w = t.row_width();
      double s2 = 0;
      for (std::size_t i = d_forget * w; i < t.numel(); ++i) s2 += t[i] * t[i];
      out.push_back(std::sqrt(s2));
    }
    return out;
  };
  const auto gr = w2_retain_norms(Variant::kGradientRouting);
  const auto sg = w2_retain_norms(Variant::kSgtm);
  const auto jp = w2_retain_norms(Variant::kSgtmJointProjection);
  bool ok = true;
  std::string detail;
  for (std::size_t l = 0; l < gr.size(); ++l) {
    ok = ok && gr[l] > 0 && sg[l] == 0.0 && (jp[l] > 0) == (gr[l] > 0);
    detail += fmt("%sblock %zu: GR %.3g, SGTM %.3g, JP %.3g", l ? "; " : "", l, gr[l], sg[l], jp[l]);
  }
  verdict(11, "variant differentiation", ok, "W_2 retain-row gradient norms " + detail);
}

// ---------------------------------------------------------------------------
// Desk-scale runs

struct Outcome {
  ExperimentConfig config;
  RunRecord record;
  Transformer<float> model;
  std::optional<CalibrationResult> calibration;
  double seconds = 0;
};

class Lab {
 public:
  Lab(ExperimentConfig base, fs::path cache) : base_(std::move(base)), cache_(std::move(cache)) {}

  const ExperimentConfig& base() const { return base_; }

  ExperimentConfig config(Method m, double rate, const std::optional<SizeSpec>& size = std::nullopt) const {
    ExperimentConfig c = with_undiscovered_rate(base_, rate);
    if (size) c = with_size(c, *size);
    c.train.method = m;
    return c;
  }

  const ExperimentData& data(const ExperimentConfig& c) {
    const std::string key = fmt("%.17g", c.labels.tpr);
    auto it = data_.find(key);
    if (it == data_.end()) it = data_.emplace(key, build_experiment_data(c, cache_)).first;
    return it->second;
  }

  Outcome& run(Method m, double rate, const std::optional<SizeSpec>& size = std::nullopt) {
    const ExperimentConfig c = config(m, rate, size);
    const std::string key = c.hash();
    auto it = runs_.find(key);
    if (it != runs_.end()) return *it->second;
    const ExperimentData& d = data(c);
    const auto t0 = Clock::now();
    TrainedRun<float> tr = train_experiment<float>(c, d);
    auto out = std::make_unique<Outcome>(Outcome{c, std::move(tr.record), std::move(tr.model), std::nullopt, 0});
    out->seconds = seconds_since(t0);
    const MetricsRow& f = out->record.final_metrics();
    progress(fmt("%s rate %.4g d_model %zu: %zu params, forget %.3f retain %.3f (%.1f s)", to_string(m), rate,
                 c.model.d_model, out->record.n_params, f.loss_forget_test, f.loss_retain_test, out->seconds));
    return *runs_.emplace(key, std::move(out)).first->second;
  }

  const CalibrationResult& calibrated(Outcome& o) {
    if (!o.calibration) {
      const auto t0 = Clock::now();
      const Transformer<float> rep = reported_model(o.model, o.config.train_plan());
      o.calibration = calibrate(rep, data(o.config).eval, o.config.analysis.calibration);
      progress(fmt("calibrated %s rate %.4g: forget %.3f -> %.3f, retain %.3f -> %.3f (%zu iters, %.1f s)",
                   o.record.method.c_str(), 1.0 - o.config.labels.tpr, o.calibration->before.forget,
                   o.calibration->after.forget, o.calibration->before.retain, o.calibration->after.retain,
                   o.calibration->iterations, seconds_since(t0)));
    }
    return *o.calibration;
  }

  // Filter baseline curve: FILTER_WEAK over the leakage grid and the
  // undiscovered rates.
  std::vector<const Outcome*> baseline_runs(const std::optional<SizeSpec>& size) {
    std::set<double> rates(base_.analysis.leakage_grid.begin(), base_.analysis.leakage_grid.end());
    rates.insert(base_.analysis.undiscovered_rates.begin(), base_.analysis.undiscovered_rates.end());
    std::vector<const Outcome*> out;
    for (double r : rates) out.push_back(&run(Method::kFilterWeak, r, size));
    return out;
  }

 private:
  ExperimentConfig base_;
  fs::path cache_;
  std::map<std::string, ExperimentData> data_;
  std::map<std::string, std::unique_ptr<Outcome>> runs_;
};

std::vector<BaselinePoint> curve_of(const std::vector<const Outcome*>& runs, const Outcome* exclude = nullptr) {
  std::vector<const RunRecord*> recs;
  for (const Outcome* o : runs) {
    if (o != exclude) recs.push_back(&o->record);
  }
  return baseline_curve(recs);
}

std::string leakage_text(const LeakageReport& r) {
  if (r.leakage) return fmt("%.4f", *r.leakage);
  return fmt("out of range [%.4g, %.4g]", r.leakage_lower, r.leakage_upper);
}

double undiscovered_rate(const Outcome& o) { return 1.0 - o.config.labels.tpr; }

void criterion_4(Lab& lab, double rate) {
  Outcome& sg = lab.run(Method::kSgtm, rate);
  Outcome& weak = lab.run(Method::kFilterWeak, rate);
  Outcome& perfect = lab.run(Method::kFilterPerfect, rate);
  const EvalLosses s = lab.calibrated(sg).after;
  const EvalLosses w = lab.calibrated(weak).after;
  const EvalLosses p = lab.calibrated(perfect).after;
  const double over_weak = s.forget - w.forget;
  const double retain_gap = s.retain - w.retain;
  const double to_perfect = s.forget - p.forget;
  info(fmt("calibrated forget: SGTM %.3f, weak filter %.3f, perfect filter %.3f", s.forget, w.forget, p.forget));
  info(fmt("calibrated retain: SGTM %.3f, weak filter %.3f, perfect filter %.3f", s.retain, w.retain, p.retain));
  info(fmt("runtime of the three runs: %.0f s", sg.seconds + weak.seconds + perfect.seconds));
  const bool a = over_weak >= 0.2;
  const bool b = std::abs(retain_gap) <= 0.3;
  const bool c = std::abs(to_perfect) <= 0.15;
  verdict(4, "trade-off reproduction", a && b && c,
          fmt("forget over weak filter %+.3f (need >= 0.2, %s); retain vs weak filter %+.3f (need |.| <= 0.3, %s); "
              "forget vs perfect filter %+.3f (need |.| <= 0.15, %s)",
              over_weak, a ? "ok" : "no", retain_gap, b ? "ok" : "no", to_perfect, c ? "ok" : "no"));
}

void criterion_5(Lab& lab) {
  Outcome& s0 = lab.run(Method::kSgtm, 0.0);
  Outcome& w0 = lab.run(Method::kFilterWeak, 0.0);
  const double s_ref = lab.calibrated(s0).after.forget;
  const double w_ref = lab.calibrated(w0).after.forget;
  bool ok = true;
  std::string detail;
  for (double r : lab.base().analysis.undiscovered_rates) {
    if (r == 0.0) continue;
    const double ds = s_ref - lab.calibrated(lab.run(Method::kSgtm, r)).after.forget;
    const double dw = w_ref - lab.calibrated(lab.run(Method::kFilterWeak, r)).after.forget;
    ok = ok && ds < dw;
    detail += fmt("%s%.4g%%: SGTM %.3f vs filter %.3f", detail.empty() ? "" : "; ", 100 * r, ds, dw);
  }
  verdict(5, "label-noise robustness", ok && !detail.empty(), "forget-loss decline from 0% " + detail);
}

void criterion_6(Lab& lab, double rate, const SizeSpec& small, const SizeSpec& large) {
  struct SizeResult {
    std::size_t params = 0;
    LeakageReport sgtm;
    LeakageReport filter;
    LeakageReport filter_loo;
  };
  auto at_size = [&](const SizeSpec& size) {
    SizeResult r;
    const auto base = lab.baseline_runs(size);
    const Outcome& sg = lab.run(Method::kSgtm, rate, size);
    const Outcome& fw = lab.run(Method::kFilterWeak, rate, size);
    const auto curve = curve_of(base);
    r.params = sg.record.n_params;
    r.sgtm = leakage(sg.record, curve);
    r.filter = leakage(fw.record, curve);
    r.filter_loo = leakage(fw.record, curve_of(base, &fw));
    std::string pts;
    for (const auto& p : curve) pts += fmt(" (%.0f, %.3f)", p.forget_tokens, p.forget_loss);
    info(fmt("d_model %zu baseline curve (forget tokens, forget loss):%s", size.d_model, pts.c_str()));
    info(fmt("d_model %zu (%zu params): SGTM forget loss %.3f with %.0f undiscovered forget tokens", size.d_model,
             r.params, r.sgtm.forget_loss, r.sgtm.undiscovered_forget_tokens));
    info(fmt("d_model %zu: filter leakage without its own curve point %s", size.d_model,
             leakage_text(r.filter_loo).c_str()));
    return r;
  };
  const SizeResult s = at_size(small);
  const SizeResult l = at_size(large);
  const double s_upper = s.sgtm.leakage.value_or(s.sgtm.leakage_upper);
  const double l_upper = l.sgtm.leakage.value_or(l.sgtm.leakage_upper);
  const double s_lower = s.sgtm.leakage.value_or(s.sgtm.leakage_lower);
  const bool a = s_upper < 0.5;
  const bool b = s.filter.leakage && std::abs(*s.filter.leakage - 1.0) <= 0.05;
  const bool c = l_upper <= s_lower;
  verdict(6, "leakage", a && b && c,
          fmt("SGTM leakage %s at %zu params (need < 0.5, %s); filter leakage %s (need 1.0 +- 0.05, %s); "
              "SGTM leakage %s at %zu params (need <= smaller model's, %s)",
              leakage_text(s.sgtm).c_str(), s.params, a ? "ok" : "no", leakage_text(s.filter).c_str(),
              b ? "ok" : "no", leakage_text(l.sgtm).c_str(), l.params, c ? "ok" : "no"));
}

void criterion_7(Lab& lab) {
  Outcome& o = lab.run(Method::kSgtm, 0.0);
  const ExperimentData& d = lab.data(o.config);
  const std::size_t per_domain = std::max<std::size_t>(1, o.config.analysis.grad_norm_examples / 2);
  std::vector<LabeledExample> ex;
  std::size_t nf = 0, nr = 0;
  for (const LabeledExample& e : d.test) {
    std::size_t& n = e.true_domain == Domain::kForget ? nf : nr;
    if (n < per_domain) {
      ex.push_back(e);
      ++n;
    }
  }
  const ParamDesignation des = build_designation(o.config.model, o.config.partition);
  const GradNormSummary s = summarize(grad_norm_study(o.model, des, ex));
  const double rf = s.forget_params_on_forget / s.forget_params_on_retain;
  const double rr = s.retain_params_on_retain / s.retain_params_on_forget;
  info(fmt("mean relative norms: theta_forget %.4g on forget, %.4g on retain; theta_retain %.4g on retain, "
           "%.4g on forget (%zu + %zu examples)",
           s.forget_params_on_forget, s.forget_params_on_retain, s.retain_params_on_retain,
           s.retain_params_on_forget, nf, nr));
  verdict(7, "gradient-norm study", rf >= 2.0 && rr >= 1.1,
          fmt("theta_forget forget/retain ratio %.3f (need >= 2); theta_retain retain/forget ratio %.3f (need >= 1.1)",
              rf, rr));
}

std::string steps_text(const RelearnCurve& c, std::size_t budget) {
  if (c.steps_to_baseline) return fmt("%zu", *c.steps_to_baseline);
  return fmt("> %zu", budget);
}

void criterion_8(Lab& lab, double rate) {
  Outcome& sg = lab.run(Method::kSgtm, rate);
  Outcome& full = lab.run(Method::kFilterWeak, 1.0);
  const ExperimentData& d = lab.data(sg.config);
  const FinetunePlan& ft = lab.base().analysis.finetune;
  const double baseline = full.record.final_metrics().loss_forget_test;

  RmuPlan rp = lab.base().analysis.rmu;
  rp.resolve(full.config.model);
  Transformer<float> rmu_model = full.model;
  const auto t0 = Clock::now();
  run_rmu(rp, rmu_model, d.train, d.eval);
  const EvalLosses rmu_loss = evaluate(rmu_model, d.eval);
  progress(fmt("rmu: forget %.3f retain %.3f (%.1f s)", rmu_loss.forget, rmu_loss.retain, seconds_since(t0)));

  const RelearnCurve rmu = finetune_attack(ft, rmu_model, d.train, d.eval, baseline);
  const RelearnCurve sgtm = finetune_attack(ft, reported_model(sg.model, sg.config.train_plan()), d.train, d.eval,
                                            baseline);
  Outcome& weak = lab.run(Method::kFilterWeak, rate);
  const RelearnCurve wk = finetune_attack(ft, weak.model, d.train, d.eval, baseline);
  info(fmt("no-filter baseline forget loss %.3f; RMU model forget %.3f, retain %.3f", baseline, rmu_loss.forget,
           rmu_loss.retain));
  info(fmt("steps to baseline: SGTM %s, RMU %s, weak filter %s (budget %zu, batch %zu, %.0f%% forget)",
           steps_text(sgtm, ft.steps).c_str(), steps_text(rmu, ft.steps).c_str(), steps_text(wk, ft.steps).c_str(),
           ft.steps, ft.batch_size, 100 * ft.mix));

  const bool unlearned = rmu_loss.forget > baseline + ft.tolerance;
  bool ok = false;
  std::string ratio = "undefined";
  if (unlearned && rmu.steps_to_baseline) {
    const double r_steps = static_cast<double>(std::max<std::size_t>(*rmu.steps_to_baseline, 1));
    if (sgtm.steps_to_baseline) {
      const double q = static_cast<double>(*sgtm.steps_to_baseline) / r_steps;
      ok = q >= 2.0;
      ratio = fmt("%.2f", q);
    } else {
      const double q = static_cast<double>(ft.steps) / r_steps;
      ok = q >= 2.0;
      ratio = fmt("> %.2f", q);
    }
  }
  verdict(8, "fine-tuning robustness", ok,
          fmt("SGTM/RMU steps-to-baseline ratio %s (need >= 2)%s", ratio.c_str(),
              unlearned ? "" : "; RMU left forget loss at the baseline"));
}

void criterion_9(Lab& lab) {
  std::size_t checkpoints = 0, failures = 0;
  double worst_drop = 0;
  for (double r : lab.base().analysis.undiscovered_rates) {
    Outcome& o = lab.run(Method::kSgtm, r);
    const ParamDesignation des = build_designation(o.config.model, o.config.partition);
    const ExperimentData& d = lab.data(o.config);
    for (const Snapshot& s : o.record.snapshots) {
      Transformer<float> m(o.config.model);
      m.params() = ablate(s.params, des);
      const CalibrationResult c = calibrate(m, d.eval, o.config.analysis.calibration);
      bool mono = c.objective_after <= c.objective_before;
      for (std::size_t i = 1; i < c.objective_trace.size(); ++i) {
        mono = mono && c.objective_trace[i] <= c.objective_trace[i - 1];
      }
      worst_drop = std::max(worst_drop, c.objective_before - c.objective_after);
      ++checkpoints;
      if (!mono) ++failures;
    }
  }
  info(fmt("largest objective reduction %.4g", worst_drop));
  verdict(9, "calibration", checkpoints > 0 && failures == 0,
          fmt("%zu of %zu post-ablation checkpoints violate objective monotonicity", failures, checkpoints));
}

void criterion_10(Lab* lab) {
  std::vector<std::pair<double, double>> pts;
  for (double c : {1e12, 3e12, 1e13, 3e13, 1e14}) pts.emplace_back(c, 10.0 * std::pow(c, -0.1));
  const ScalingFit f = fit_scaling(pts);
  double round_trip = 0;
  for (double c : {2e12, 7e12, 5e13}) {
    round_trip = std::max(round_trip, std::abs(compute_penalty(f.loss_at(c), c, f)));
  }
  const bool synth = std::abs(f.alpha - 10.0) <= 1e-6 && std::abs(f.beta - 0.1) <= 1e-6 && round_trip <= 1e-10;
  std::string detail = fmt("synthetic alpha %.9f beta %.9f, penalty round trip %.2g", f.alpha, f.beta, round_trip);
  bool real = false;
  if (lab) {
    std::vector<const RunRecord*> recs;
    for (const SizeSpec& s : lab->base().analysis.model_sizes) recs.push_back(&lab->run(Method::kFilterWeak, 0.0, s).record);
    if (recs.size() >= 3) {
      const ScalingFit rf = fit_scaling(recs, TestSubset::kRetain);
      real = rf.residual < 0.05;
      detail += fmt("; desk retain fit over %zu sizes: alpha %.4g beta %.4g residual %.4g (need < 0.05)",
                    recs.size(), rf.alpha, rf.beta, rf.residual);
      if (rf.low_confidence) info("desk scaling fit is flagged low confidence");
      Outcome& sg = lab->run(Method::kSgtm, 0.01);
      info(fmt("SGTM at 1%% undiscovered: retain compute penalty %.4f against the filter fit",
               compute_penalty(sg.record.final_metrics().loss_retain_test, sg.record.final_metrics().flops, rf)));
    } else {
      detail += "; fewer than three model sizes configured";
    }
  } else {
    detail += "; desk runs skipped";
  }
  verdict(10, "scaling fit round trip", synth && real, detail);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string config_path = fs::path(SGTM_SOURCE_DIR) / "configs" / "default.json";
  std::vector<int> only;
  std::string cache = (fs::temp_directory_path() / "sgtm_acceptance_cache").string();
  app.add_option("--config", config_path, "experiment config for the desk-scale runs");
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--cache", cache, "corpus cache directory");
  CLI11_PARSE(app, argc, argv);
  auto want = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  const auto t0 = Clock::now();
  try {
    const ExperimentConfig base = ExperimentConfig::load(config_path);
    base.validate();
    std::printf("acceptance: config %s (hash %s)\n", config_path.c_str(), base.hash().c_str());

    if (want(1) || want(2)) criterion_1();
    if (want(2)) criterion_2();
    if (want(3)) criterion_3();
    if (want(11)) criterion_11(base);

    Lab lab(base, cache);
    const double rate = 0.01;
    const auto& sizes = base.analysis.model_sizes;
    const SizeSpec small{base.model.n_layers, base.model.d_model, base.model.d_mlp, base.model.n_heads};
    if (want(4)) criterion_4(lab, rate);
    if (want(5)) criterion_5(lab);
    if (want(7)) criterion_7(lab);
    if (want(9)) criterion_9(lab);
    if (want(8)) criterion_8(lab, rate);
    if (want(6)) {
      if (sizes.empty()) {
        verdict(6, "leakage", false, "analysis.model_sizes is empty");
      } else {
        criterion_6(lab, 0.2, small, sizes.back());
      }
    }
    if (want(10)) criterion_10(&lab);
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }

  std::size_t failed = 0;
  for (const Verdict& v : verdicts) failed += !v.pass;
  std::printf("acceptance: %zu passed, %zu failed (%.0f s)\n", verdicts.size() - failed, failed, seconds_since(t0));
  return failed ? 1 : 0;
}
