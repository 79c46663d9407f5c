#include <doctest.h>

#include <cmath>

#include "sgtm/experiment.hpp"
#include "sgtm/trainer.hpp"

using namespace sgtm;

namespace {

ExperimentConfig tiny_experiment() {
  ExperimentConfig c;
  c.model = {1, 16, 64, 4, 64, 32, true};
  c.partition.h_forget = 1;
  c.partition.d_forget = 8;
  c.data.grammar.vocab_size = 64;
  c.data.grammar.branching = 4;
  c.data.grammar.mean_length = 16;
  c.data.tokens_per_domain = 3000;
  c.data.test_tokens_per_domain = 500;
  c.data.eval_batch_size = 16;
  c.train.batch_size = 8;
  c.train.warmup_steps = 2;
  c.labels.tpr = 0.9;
  return c;
}

}  // namespace

TEST_CASE("AdamW scalar trajectory") {
  ParamSet<double> p;
  p.push("w", Tensor<double>(Shape{1, 1}, 1.0));
  OptimizerConfig cfg;
  cfg.weight_decay = 0.1;
  AdamW<double> opt(p, nullptr, cfg);
  const double expect[3] = {0.890000002, 0.8618358763851797, 0.8179838823587096};
  const double grads[3] = {0.5, -0.3, 0.2};
  for (int t = 0; t < 3; ++t) {
    opt.step(p, {Tensor<double>(Shape{1, 1}, grads[t])}, 0.1);
    CHECK(p[0][0] == doctest::Approx(expect[t]).epsilon(1e-14));
  }
  CHECK(opt.step_count(Tag::kJoint) == 3);
}

TEST_CASE("weight decay touches matrices only") {
  ParamSet<double> p;
  p.push("m", Tensor<double>(Shape{2, 2}, 2.0));
  p.push("v", Tensor<double>(Shape{2}, 2.0));
  AdamW<double> opt(p, nullptr, {});
  opt.step(p, {Tensor<double>(Shape{2, 2}), Tensor<double>(Shape{2})}, 0.5);
  for (double v : p[0].data()) CHECK(v == 2.0 * (1 - 0.5 * 0.1));
  for (double v : p[1].data()) CHECK(v == 2.0);
}

TEST_CASE("skipped group is left completely alone") {
  ModelConfig mc{1, 8, 16, 2, 16, 8, true};
  PartitionSpec ps;
  ps.d_forget = 4;
  const ParamDesignation des = build_designation(mc, ps);
  auto model = Transformer<double>::initialized(mc, 1);
  ParamGrads<double> g;
  for (const auto& e : model.params()) g.emplace_back(e.value.shape(), 0.25);

  AdamW<double> opt(model.params(), &des, {});
  const ParamSet<double> before = model.params();
  opt.step(model.params(), g, 0.01, Tag::kRetain);
  const auto tags = des.element_tags();
  for (std::size_t i = 0; i < before.size(); ++i) {
    for (std::size_t k = 0; k < before[i].numel(); ++k) {
      if (tags[i][k] == Tag::kRetain) {
        CHECK(model.params()[i][k] == before[i][k]);
        CHECK(opt.first_moment(i)[k] == 0.0);
        CHECK(opt.second_moment(i)[k] == 0.0);
      } else {
        CHECK(model.params()[i][k] != before[i][k]);
      }
    }
  }
  CHECK(opt.step_count(Tag::kRetain) == 0);
  CHECK(opt.step_count(Tag::kForget) == 1);

  // Diagnostic mode: a zero gradient still decays.
  OptimizerConfig diag;
  diag.skip_masked_groups = false;
  AdamW<double> d(model.params(), &des, diag);
  ParamGrads<double> zero;
  for (const auto& e : model.params()) zero.emplace_back(e.value.shape());
  const ParamSet<double> pre = model.params();
  d.step(model.params(), zero, 0.3);
  const std::size_t w = *model.params().find("blocks.0.mlp.w_1");
  for (std::size_t k = 0; k < pre[w].numel(); ++k) CHECK(model.params()[w][k] == pre[w][k] * (1 - 0.3 * 0.1));
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(10, 100, 10, 5e-3) == 5e-3);
  CHECK(cosine_lr(5, 100, 10, 5e-3) == doctest::Approx(2.5e-3));
  CHECK(cosine_lr(100, 100, 10, 5e-3) == doctest::Approx(0.0).epsilon(1e-18));
  CHECK(std::abs(cosine_lr(100, 100, 10, 5e-3)) < 1e-15);
  CHECK(cosine_lr(55, 100, 10, 1.0) == doctest::Approx(0.5));
  double prev = 1e9;
  for (std::size_t s = 10; s <= 100; ++s) {
    const double lr = cosine_lr(s, 100, 10, 1.0);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("forget steps leave every retain element bit-identical") {
  ExperimentConfig c = tiny_experiment();
  c.train.steps = 100;
  const ExperimentData data = build_experiment_data(c);
  std::size_t forget_steps = 0;
  bool identical = true;
  ParamSet<float> before;
  const auto tags = build_designation(c.model, c.partition).element_tags();
  TrainHooks<float> hooks;
  hooks.before_step = [&](std::size_t, BatchLabel l, const TokenBatch&, const Transformer<float>& m) {
    if (l == BatchLabel::kForget) before = m.params();
  };
  hooks.after_step = [&](std::size_t, BatchLabel l, const TokenBatch&, const Transformer<float>& m) {
    if (l != BatchLabel::kForget) return;
    ++forget_steps;
    for (std::size_t i = 0; i < before.size(); ++i) {
      for (std::size_t k = 0; k < before[i].numel(); ++k) {
        if (tags[i][k] == Tag::kRetain && std::memcmp(&before[i][k], &m.params()[i][k], sizeof(float)) != 0) {
          identical = false;
        }
      }
    }
  };
  train_experiment<float>(c, data, &hooks);
  CHECK(forget_steps > 10);
  CHECK(identical);
}

TEST_CASE("perfect filtering never shows a forget token") {
  ExperimentConfig c = tiny_experiment();
  c.train.method = Method::kFilterPerfect;
  const ExperimentData data = build_experiment_data(c);
  std::vector<std::uint8_t> retain_vocab(c.model.vocab_size, 0);
  for (const auto& ex : data.train.examples()) {
    if (ex.true_domain == Domain::kRetain) {
      for (auto t : ex.tokens) retain_vocab[static_cast<std::size_t>(t)] = 1;
    }
  }
  std::size_t foreign = 0, seen = 0;
  TrainHooks<float> hooks;
  hooks.before_step = [&](std::size_t, BatchLabel l, const TokenBatch& b, const Transformer<float>&) {
    CHECK(l == BatchLabel::kUnlabeled);
    for (auto t : b.ids) {
      ++seen;
      if (t != kPadToken && !retain_vocab[static_cast<std::size_t>(t)]) ++foreign;
    }
  };
  const auto run = train_experiment<float>(c, data, &hooks);
  CHECK(seen > 0);
  CHECK(foreign == 0);
  CHECK(run.record.final_metrics().tokens_forget == 0);
}

TEST_CASE("training is deterministic and records metrics") {
  ExperimentConfig c = tiny_experiment();
  c.train.eval_every = 5;
  const ExperimentData data = build_experiment_data(c);
  const auto a = train_experiment<float>(c, data);
  const auto b = train_experiment<float>(c, data);
  CHECK(a.model.params() == b.model.params());
  CHECK(a.record.metrics.size() >= 2);
  for (std::size_t i = 1; i < a.record.metrics.size(); ++i) {
    CHECK(a.record.metrics[i].step > a.record.metrics[i - 1].step);
    CHECK(a.record.metrics[i].flops > a.record.metrics[i - 1].flops);
  }
  CHECK(a.record.snapshots.size() == a.record.metrics.size());
  CHECK(a.record.tokens_forget_unlabeled > 0);
  const MetricsRow& f = a.record.final_metrics();
  CHECK(f.flops == 6.0 * static_cast<double>(a.record.n_params) * static_cast<double>(f.tokens_forget + f.tokens_retain));
  // Reported losses are those of the ablated model.
  const EvalLosses l = evaluate(reported_model(a.model, c.train_plan()), data.eval);
  CHECK(l.forget == f.loss_forget_test);
}

TEST_CASE("divergence is reported, not hidden") {
  ExperimentConfig c = tiny_experiment();
  c.train.method = Method::kFilterNone;
  c.train.peak_lr = 1e30;
  c.train.steps = 20;
  const auto run = train_experiment<float>(c, build_experiment_data(c));
  CHECK(run.record.diverged);
  CHECK(run.record.diagnostic.find("non-finite") != std::string::npos);
}

TEST_CASE("rmu") {
  ExperimentConfig c = tiny_experiment();
  c.model.n_layers = 2;
  c.train.method = Method::kFilterNone;
  c.labels.tpr = 1.0;
  const ExperimentData data = build_experiment_data(c);
  const auto base = train_experiment<float>(c, data);

  RmuPlan plan;
  plan.resolve(c.model);
  CHECK(*plan.unlearn_layer == 1);
  CHECK(plan.update_layers == std::vector<std::size_t>{0, 1});

  // No steering and no forget pull: retain matching against itself is a
  // fixed point.
  RmuPlan still;
  still.steering_coefficient = 0;
  still.steps = 5;
  still.lr = 0;
  auto same = base.model;
  run_rmu(still, same, data.train, data.eval);
  CHECK(same.params() == base.model.params());

  RmuPlan real;
  real.steps = 40;
  real.lr = 5e-3;
  auto unlearned = base.model;
  const RunRecord rec = run_rmu(real, unlearned, data.train, data.eval);
  CHECK(rec.final_metrics().loss_forget_test > evaluate(base.model, data.eval).forget);
  // Only MLP weights of the update layers move.
  for (std::size_t i = 0; i < unlearned.params().size(); ++i) {
    if (unlearned.params().path(i).find("mlp") == std::string::npos) {
      CHECK(unlearned.params()[i] == base.model.params()[i]);
    }
  }
}

TEST_CASE("fine-tuning a model already at baseline takes zero steps") {
  ExperimentConfig c = tiny_experiment();
  c.train.method = Method::kFilterNone;
  const ExperimentData data = build_experiment_data(c);
  const auto base = train_experiment<float>(c, data);
  FinetunePlan plan;
  plan.steps = 10;
  plan.batch_size = 4;
  const RelearnCurve curve =
      finetune_attack(plan, base.model, data.train, data.eval, base.record.final_metrics().loss_forget_test);
  REQUIRE(curve.steps_to_baseline.has_value());
  CHECK(*curve.steps_to_baseline == 0);
  CHECK(*curve.tokens_to_baseline == 0);
}

TEST_CASE("plan validation") {
  TrainPlan p;
  p.batch_size = 0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  FinetunePlan f;
  f.mix = 1.0;
  CHECK_THROWS_AS(f.validate(), ConfigError);
  CHECK(method_from_string("filter_weak") == Method::kFilterWeak);
  CHECK_THROWS_AS(method_from_string("nope"), ConfigError);
}
