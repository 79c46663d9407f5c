#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "sgtm/eval.hpp"
#include "sgtm/experiment.hpp"

using namespace sgtm;

namespace {

// Every row holds logits log(q); targets follow q exactly.
LogitCache exact_cache(const std::vector<double>& q, std::size_t rows_per_unit) {
  LogitCache c;
  c.vocab = q.size();
  for (std::size_t j = 0; j < q.size(); ++j) {
    const auto n = static_cast<std::size_t>(std::lround(q[j] * static_cast<double>(rows_per_unit)));
    for (std::size_t r = 0; r < n; ++r) {
      for (double p : q) c.logits.push_back(static_cast<float>(std::log(p)));
      c.targets.push_back(static_cast<std::int32_t>(j));
      c.related.push_back(0);
    }
  }
  return c;
}

double lse_loss(const LogitCache& c, const std::vector<double>& bias) {
  double total = 0;
  for (std::size_t r = 0; r < c.rows(); ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c.vocab; ++j) m = std::max(m, c.logits[r * c.vocab + j] + bias[j]);
    double s = 0;
    for (std::size_t j = 0; j < c.vocab; ++j) s += std::exp(c.logits[r * c.vocab + j] + bias[j] - m);
    total += m + std::log(s) - (c.logits[r * c.vocab + c.targets[r]] + bias[c.targets[r]]);
  }
  return total / static_cast<double>(c.rows());
}

}  // namespace

TEST_CASE("cached loss and its derivatives") {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> n;
  LogitCache c;
  c.vocab = 5;
  for (int r = 0; r < 7; ++r) {
    for (int j = 0; j < 5; ++j) c.logits.push_back(n(rng));
    c.targets.push_back(r % 5);
    c.related.push_back(r % 2);
  }
  std::vector<double> bias{0.1, -0.2, 0.3, 0.0, 0.5};
  std::vector<double> g, h;
  CHECK(cached_loss(c, bias, &g, false, &h) == doctest::Approx(lse_loss(c, bias)).epsilon(1e-12));
  for (std::size_t j = 0; j < 5; ++j) {
    auto bp = bias, bm = bias;
    bp[j] += 1e-5;
    bm[j] -= 1e-5;
    CHECK(g[j] == doctest::Approx((lse_loss(c, bp) - lse_loss(c, bm)) / 2e-5).epsilon(1e-6));
    std::vector<double> gp, gm;
    cached_loss(c, bp, &gp);
    cached_loss(c, bm, &gm);
    CHECK(h[j] == doctest::Approx((gp[j] - gm[j]) / 2e-5).epsilon(1e-5));
  }
}

TEST_CASE("calibration leaves an optimal model alone") {
  const std::vector<double> q{0.4, 0.3, 0.2, 0.1};
  const LogitCache c = exact_cache(q, 100);
  const CalibrationResult r = calibrate(c, c);
  for (double b : r.logit_bias) CHECK(std::abs(b) < 1e-6);
  CHECK(r.objective_after == doctest::Approx(r.objective_before).epsilon(1e-9));
  CHECK(r.objective_before == doctest::Approx(101 * lse_loss(c, {0, 0, 0, 0})));
}

TEST_CASE("calibration undoes a suppressed token") {
  LogitCache forget, retain;
  forget.vocab = retain.vocab = 4;
  const float row[4] = {0.f, 0.f, 0.f, -30.f};
  for (int r = 0; r < 40; ++r) {
    forget.logits.insert(forget.logits.end(), row, row + 4);
    forget.targets.push_back(r % 2 ? 3 : 0);
    retain.logits.insert(retain.logits.end(), row, row + 4);
    retain.targets.push_back(r % 3);
  }
  forget.related.assign(40, 0);
  retain.related.assign(40, 0);
  const CalibrationResult r = calibrate(forget, retain);
  CHECK(r.after.forget < r.before.forget - 5.0);
  CHECK(r.after.retain >= r.before.retain - 1e-12);
  CHECK(r.logit_bias[3] > 10.0);
  REQUIRE(r.objective_trace.size() >= 2);
  for (std::size_t i = 1; i < r.objective_trace.size(); ++i) CHECK(r.objective_trace[i] <= r.objective_trace[i - 1]);
  CHECK(r.objective_trace.front() == doctest::Approx(r.objective_before));
  CHECK(r.objective_trace.back() == doctest::Approx(r.objective_after));

  CalibrationOptions plain;
  plain.precondition = false;
  plain.max_iters = 50;
  const CalibrationResult p = calibrate(forget, retain, plain);
  for (std::size_t i = 1; i < p.objective_trace.size(); ++i) CHECK(p.objective_trace[i] <= p.objective_trace[i - 1]);
  CHECK(r.objective_after <= p.objective_after);
}

TEST_CASE("calibration on a model matches a direct evaluation") {
  ExperimentConfig c;
  c.model = {1, 16, 32, 2, 64, 16, true};
  c.partition.d_forget = 4;
  c.data.grammar.vocab_size = 64;
  c.data.grammar.mean_length = 10;
  c.data.test_tokens_per_domain = 300;
  c.data.tokens_per_domain = 300;
  c.data.eval_batch_size = 8;
  const ExperimentData data = build_experiment_data(c);
  const auto model = Transformer<double>::initialized(c.model, 5);
  CalibrationOptions o;
  o.max_iters = 30;
  const CalibrationResult r = calibrate(model, data.eval, o);
  const EvalLosses direct = evaluate(model, data.eval, &r.logit_bias);
  CHECK(direct.forget == doctest::Approx(r.after.forget).epsilon(1e-5));
  CHECK(direct.retain == doctest::Approx(r.after.retain).epsilon(1e-5));
  CHECK(r.objective_after <= r.objective_before);
  const auto j = r.to_json();
  CHECK(j.at("logit_bias").size() == 64);
}

TEST_CASE("leakage") {
  const std::vector<BaselinePoint> curve{{0, 8.0}, {1000, 6.0}, {4000, 4.0}, {16000, 3.0}};
  SUBCASE("grid point") {
    const auto r = leakage(6.0, 500, curve);
    REQUIRE(r.leakage.has_value());
    CHECK(*r.equivalent_forget_tokens == 1000);
    CHECK(*r.leakage == 2.0);
  }
  SUBCASE("interpolated") {
    const auto r = leakage(5.0, 2500, curve);
    CHECK(*r.equivalent_forget_tokens == doctest::Approx(2500));
    CHECK(*r.leakage == doctest::Approx(1.0));
    CHECK(r.bracket->first.forget_tokens == 1000);
    CHECK(r.bracket->second.forget_tokens == 4000);
  }
  SUBCASE("a filter run sits on its own curve") {
    for (const auto& p : curve) {
      if (p.forget_tokens == 0) continue;
      CHECK(*leakage(p.forget_loss, p.forget_tokens, curve).leakage == 1.0);
    }
  }
  SUBCASE("out of range reports bounds") {
    const auto above = leakage(9.0, 1000, curve);
    CHECK_FALSE(above.in_range);
    CHECK_FALSE(above.leakage.has_value());
    CHECK(above.leakage_lower == 0.0);
    CHECK(above.leakage_upper == 0.0);
    const auto below = leakage(2.0, 1000, curve);
    CHECK(below.leakage_lower == 16.0);
    CHECK(std::isinf(below.leakage_upper));
  }
  SUBCASE("unsorted input") {
    std::vector<BaselinePoint> shuffled{curve[2], curve[0], curve[3], curve[1]};
    CHECK(*leakage(5.0, 2500, shuffled).leakage == doctest::Approx(1.0));
  }
  CHECK_THROWS_AS(leakage(5.0, 10, {curve[0]}), ContractError);
  // 965k equivalent tokens out of 144M undiscovered.
  const auto big = leakage(5.0, 144e6, {{0, 6.0}, {1.93e6, 4.0}});
  CHECK(*big.leakage == doctest::Approx(0.0067).epsilon(0.01));
}

TEST_CASE("scaling fit") {
  std::vector<std::pair<double, double>> pts;
  for (double c : {1e12, 3e12, 1e13, 3e13}) pts.emplace_back(c, 10.0 * std::pow(c, -0.1));
  const ScalingFit f = fit_scaling(pts);
  CHECK(f.alpha == doctest::Approx(10.0).epsilon(1e-6));
  CHECK(f.beta == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(f.residual < 1e-9);
  CHECK_FALSE(f.low_confidence);
  for (double c : {2e12, 5e13}) CHECK(std::abs(f.compute_for(f.loss_at(c)) / c - 1) < 1e-10);
  CHECK(std::abs(compute_penalty(f.loss_at(1e13), 1e13, f)) < 1e-10);
  // A model that needs 6% more compute than the baseline for its loss.
  CHECK(compute_penalty(f.loss_at(0.94e13), 1e13, f) == doctest::Approx(0.06).epsilon(1e-9));

  const ScalingFit flat = fit_scaling({{1e12, 3.0}, {1e13, 3.1}, {1e14, 2.9}});
  CHECK(flat.low_confidence);
  CHECK(fit_scaling({{1e12, 3.0}, {1e13, 2.0}}).low_confidence);
  CHECK_THROWS_AS(fit_scaling({{1e12, 3.0}, {1e12, 2.0}}), ContractError);
  CHECK(subset_from_string(to_string(TestSubset::kRelated)) == TestSubset::kRelated);
}

TEST_CASE("histograms") {
  const LossHistogram h = make_histogram({0.1, 0.2, 0.3, 100.0}, 64, 10);
  CHECK(h.hi == doctest::Approx(std::log(64.0) + 1));
  CHECK(h.counts.front() == 3);
  CHECK(h.counts.back() == 1);
  CHECK(h.median == doctest::Approx(0.25));
  CHECK_THROWS_AS(make_histogram({}, 64, 0), ConfigError);

  ModelConfig mc{1, 8, 16, 2, 32, 8, true};
  auto zero = Transformer<double>::initialized(mc, 1);
  for (auto& e : zero.params()) e.value.fill(0.0);
  TokenBatch b;
  b.batch = 1;
  b.seq = 5;
  b.ids = {1, 7, 9, 11, 2};
  const LossHistogram u = per_token_losses(zero, {b}, nullptr, 20);
  REQUIRE(u.values.size() == 4);
  for (double v : u.values) CHECK(v == doctest::Approx(std::log(32.0)));
}

TEST_CASE("gradient norms") {
  ModelConfig mc{1, 8, 16, 2, 32, 8, true};
  PartitionSpec ps;
  ps.d_forget = 4;
  const ParamDesignation des = build_designation(mc, ps);
  const auto model = Transformer<double>::initialized(mc, 2);
  std::vector<LabeledExample> ex(2);
  ex[0].tokens = {1, 5, 6, 2};
  ex[0].true_domain = Domain::kForget;
  ex[1].tokens = {1, 7, 8, 9, 2};
  ex[1].id = 1;
  const auto samples = grad_norm_study(model, des, ex);
  REQUIRE(samples.size() == 2);
  for (const auto& s : samples) {
    CHECK(s.forget_relative > 0);
    CHECK(s.retain_relative > 0);
  }
  const GradNormSummary sum = summarize(samples);
  CHECK(sum.forget_params_on_forget == samples[0].forget_relative);
  CHECK(sum.retain_params_on_retain == samples[1].retain_relative);

  const auto ablated = ablate(model, des);
  CHECK_THROWS_AS(grad_norm_study(ablated, des, ex), ContractError);
}
