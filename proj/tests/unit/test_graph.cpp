#include <doctest.h>

#include <cmath>
#include <numbers>

#include "oracle.hpp"
#include "sgtm/graph.hpp"

using namespace sgtm;
using oracle::grad_check;
using oracle::project;
using oracle::random_tensor;

TEST_CASE("matmul values") {
  Graph<double> g;
  auto eye = g.constant(Tensor<double>::matrix(2, 2, {1, 0, 0, 1}));
  auto b = g.constant(Tensor<double>::matrix(2, 2, {3, 4, 5, 6}));
  CHECK(g.value(g.matmul(eye, b)) == Tensor<double>::matrix(2, 2, {3, 4, 5, 6}));
  auto two = g.constant(Tensor<double>::matrix(1, 1, {2}));
  auto three = g.constant(Tensor<double>::matrix(1, 1, {3}));
  CHECK(g.value(g.matmul(two, three))[0] == 6.0);
}

TEST_CASE("matmul gradients match central differences") {
  std::mt19937_64 rng(1);
  const auto a = random_tensor({3, 4}, rng);
  const auto b = random_tensor({4, 2}, rng);
  const auto bt = random_tensor({2, 4}, rng);
  CHECK(grad_check(a, [&](Graph<double>& g, NodeId x) { return project(g, g.matmul(x, g.constant(b))); }) < 1e-5);
  CHECK(grad_check(b, [&](Graph<double>& g, NodeId x) { return project(g, g.matmul(g.constant(a), x)); }) < 1e-5);
  CHECK(grad_check(bt, [&](Graph<double>& g, NodeId x) {
          return project(g, g.matmul(g.constant(a), x, /*transpose_b=*/true));
        }) < 1e-5);
}

TEST_CASE("matmul rejects non-conforming shapes") {
  Graph<double> g;
  auto a = g.constant(Tensor<double>({2, 3}));
  auto b = g.constant(Tensor<double>({2, 3}));
  CHECK_THROWS_AS(g.matmul(a, b), DimensionError);
}

TEST_CASE("softmax") {
  Graph<double> g;
  auto s = g.softmax(g.constant(Tensor<double>({1, 3})), 1);
  for (int i = 0; i < 3; ++i) CHECK(g.value(s)[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));

  std::mt19937_64 rng(2);
  const auto x = random_tensor({3, 5}, rng, 3.0);
  CHECK(grad_check(x, [](Graph<double>& g, NodeId v) { return project(g, g.softmax(v, 1)); }) < 1e-5);

  // Large logits stay finite.
  Graph<double> g2;
  auto big = g2.softmax(g2.constant(Tensor<double>::matrix(1, 2, {1000, 0})), 1);
  CHECK(g2.value(big)[0] == 1.0);
  CHECK(g2.value(big)[1] == 0.0);
}

TEST_CASE("cross entropy") {
  Graph<double> g;
  Tensor<double> logits({2, 4}, -20.0);
  logits.at(0, 1) = 20;
  logits.at(1, 3) = 20;
  const std::vector<std::int32_t> targets{1, 3};
  CHECK(g.value(g.cross_entropy(g.constant(logits), targets, -1))[0] < 1e-6);

  // Independent oracle: log-sum-exp minus the target logit, averaged over
  // rows that are not ignored.
  std::mt19937_64 rng(3);
  const auto x = random_tensor({4, 6}, rng, 2.0);
  const std::vector<std::int32_t> t{0, 5, -1, 2};
  double expect = 0;
  int rows = 0;
  for (std::size_t r = 0; r < 4; ++r) {
    if (t[r] < 0) continue;
    double z = 0;
    for (std::size_t c = 0; c < 6; ++c) z += std::exp(x.at(r, c));
    expect += std::log(z) - x.at(r, static_cast<std::size_t>(t[r]));
    ++rows;
  }
  expect /= rows;
  Graph<double> g2;
  CHECK(g2.value(g2.cross_entropy(g2.constant(x), t, -1))[0] == doctest::Approx(expect).epsilon(1e-12));
  CHECK(grad_check(x, [&](Graph<double>& gg, NodeId v) { return gg.cross_entropy(v, t, -1); }) < 1e-5);
}

TEST_CASE("uniform logits give ln V") {
  Graph<double> g;
  const std::vector<std::int32_t> t{0, 7, 3};
  CHECK(g.value(g.cross_entropy(g.constant(Tensor<double>({3, 50257})), t, -1))[0] ==
        doctest::Approx(std::log(50257.0)).epsilon(1e-12));
  CHECK(std::log(50257.0) == doctest::Approx(10.82).epsilon(1e-3));
}

TEST_CASE("layer norm") {
  std::mt19937_64 rng(4);
  const auto x = random_tensor({3, 6}, rng, 2.0);
  const auto gain = random_tensor({6}, rng);
  const auto bias = random_tensor({6}, rng);

  Graph<double> g;
  const auto y = g.value(g.layer_norm(g.constant(x), g.constant(gain), g.constant(bias)));
  for (std::size_t r = 0; r < 3; ++r) {
    double mu = 0, var = 0;
    for (std::size_t c = 0; c < 6; ++c) mu += x.at(r, c) / 6;
    for (std::size_t c = 0; c < 6; ++c) var += (x.at(r, c) - mu) * (x.at(r, c) - mu) / 6;
    for (std::size_t c = 0; c < 6; ++c) {
      const double expect = (x.at(r, c) - mu) / std::sqrt(var + 1e-5) * gain[c] + bias[c];
      CHECK(y.at(r, c) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  auto ln = [&](Graph<double>& gg, NodeId xi, NodeId gi, NodeId bi) { return project(gg, gg.layer_norm(xi, gi, bi)); };
  CHECK(grad_check(x, [&](Graph<double>& gg, NodeId v) { return ln(gg, v, gg.constant(gain), gg.constant(bias)); }) < 1e-5);
  CHECK(grad_check(gain, [&](Graph<double>& gg, NodeId v) { return ln(gg, gg.constant(x), v, gg.constant(bias)); }) < 1e-5);
  CHECK(grad_check(bias, [&](Graph<double>& gg, NodeId v) { return ln(gg, gg.constant(x), gg.constant(gain), v); }) < 1e-5);
}

TEST_CASE("gelu, bias, elementwise") {
  std::mt19937_64 rng(5);
  const auto x = random_tensor({4, 3}, rng, 2.0);
  const auto b = random_tensor({3}, rng);
  Graph<double> g;
  const auto y = g.value(g.gelu(g.constant(x)));
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double v = x[i];
    const double expect = 0.5 * v * (1 + std::tanh(std::sqrt(2 / std::numbers::pi) * (v + 0.044715 * v * v * v)));
    CHECK(y[i] == doctest::Approx(expect).epsilon(1e-12));
  }
  CHECK(grad_check(x, [](Graph<double>& gg, NodeId v) { return project(gg, gg.gelu(v)); }) < 1e-5);
  CHECK(grad_check(b, [&](Graph<double>& gg, NodeId v) { return project(gg, gg.add_bias(gg.constant(x), v)); }) < 1e-5);
  CHECK(grad_check(x, [&](Graph<double>& gg, NodeId v) { return project(gg, gg.mul(v, gg.scale(v, 0.5))); }) < 1e-5);
  CHECK(grad_check(x, [&](Graph<double>& gg, NodeId v) { return gg.mean(gg.sub(v, gg.add(v, v))); }) < 1e-5);
}

TEST_CASE("sum and square gradients") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>({2, 3}, 0.5));
  g.backward(g.sum(x));
  for (double v : g.grad(x)->data()) CHECK(v == 1.0);

  Graph<double> g2;
  auto s = g2.leaf(Tensor<double>::scalar(3.0));
  g2.backward(g2.sum(g2.mul(s, s)));
  CHECK((*g2.grad(s))[0] == 6.0);
}

TEST_CASE("embedding lookup and scatter") {
  std::mt19937_64 rng(6);
  const auto table = random_tensor({5, 3}, rng);
  const std::vector<std::int32_t> ids{4, 0, 4, 2};
  Graph<double> g;
  const auto rows = g.value(g.embedding(g.constant(table), ids));
  for (std::size_t r = 0; r < ids.size(); ++r) {
    for (std::size_t c = 0; c < 3; ++c) CHECK(rows.at(r, c) == table.at(static_cast<std::size_t>(ids[r]), c));
  }
  CHECK(grad_check(table, [&](Graph<double>& gg, NodeId v) { return project(gg, gg.embedding(v, ids)); }) < 1e-5);
  const std::vector<std::int32_t> bad{5};
  CHECK_THROWS_AS(g.embedding(g.constant(table), bad), IndexError);
}

namespace {

// Naive causal attention: rows are [Q heads | K heads | V heads].
Tensor<double> attention_oracle(const Tensor<double>& qkv, std::size_t batch, std::size_t seq, std::size_t heads) {
  const std::size_t d = qkv.dim(1) / 3, dh = d / heads;
  Tensor<double> out({batch * seq, d});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < seq; ++i) {
        std::vector<double> w(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double s = 0;
          for (std::size_t k = 0; k < dh; ++k) {
            s += qkv.at(b * seq + i, h * dh + k) * qkv.at(b * seq + j, d + h * dh + k);
          }
          w[j] = s / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, w[j]);
        }
        double z = 0;
        for (double& v : w) z += (v = std::exp(v - mx));
        for (std::size_t k = 0; k < dh; ++k) {
          double acc = 0;
          for (std::size_t j = 0; j <= i; ++j) acc += w[j] / z * qkv.at(b * seq + j, 2 * d + h * dh + k);
          out.at(b * seq + i, h * dh + k) = acc;
        }
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("causal attention matches a naive oracle") {
  std::mt19937_64 rng(7);
  const auto qkv = random_tensor({2 * 4, 3 * 6}, rng);
  Graph<double> g;
  const auto y = g.value(g.causal_attention(g.constant(qkv), 2, 4, 2));
  const auto expect = attention_oracle(qkv, 2, 4, 2);
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  CHECK(grad_check(qkv, [](Graph<double>& gg, NodeId v) { return project(gg, gg.causal_attention(v, 2, 4, 2)); }) < 1e-5);
}

TEST_CASE("column gate") {
  std::mt19937_64 rng(8);
  const auto x = random_tensor({3, 4}, rng);
  const std::vector<std::uint8_t> keep{1, 0, 1, 0};
  for (GateMode mode : {GateMode::kForward, GateMode::kGradient}) {
    Graph<double> g;
    auto xi = g.leaf(x);
    auto y = g.column_gate(xi, keep, mode);
    g.backward(project(g, y));
    for (std::size_t r = 0; r < 3; ++r) {
      for (std::size_t c = 0; c < 4; ++c) {
        const double v = g.value(y).at(r, c);
        if (mode == GateMode::kForward && !keep[c]) {
          CHECK(v == 0.0);
        } else {
          CHECK(v == x.at(r, c));
        }
        if (!keep[c]) CHECK(g.grad(xi)->at(r, c) == 0.0);
        if (keep[c]) CHECK(g.grad(xi)->at(r, c) != 0.0);
      }
    }
  }
}

TEST_CASE("linear layer with gated output rows zeroes the matching weight rows") {
  // y = x W^T; gating output column j removes all gradient from row j of W.
  std::mt19937_64 rng(9);
  const auto x = random_tensor({5, 3}, rng);
  const auto w = random_tensor({4, 3}, rng);
  Graph<double> g;
  auto wi = g.leaf(w);
  auto y = g.column_gate(g.matmul(g.constant(x), wi, true), {1, 1, 0, 0}, GateMode::kGradient);
  g.backward(project(g, y));
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      if (r >= 2) CHECK(g.grad(wi)->at(r, c) == 0.0);
      else CHECK(g.grad(wi)->at(r, c) != 0.0);
    }
  }
}

TEST_CASE("gating every activation leaves no upstream gradient") {
  std::mt19937_64 rng(10);
  const auto x = random_tensor({2, 3}, rng);
  Graph<double> g;
  auto xi = g.leaf(x);
  auto y = g.column_gate(g.gelu(xi), {0, 0, 0}, GateMode::kGradient);
  g.backward(project(g, y));
  const Tensor<double>* gr = g.grad(xi);
  if (gr) {
    for (double v : gr->data()) CHECK(v == 0.0);
  }
}

TEST_CASE("backward twice does not accumulate") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>::scalar(2.0));
  auto l = g.sum(g.mul(x, x));
  g.backward(l);
  g.backward(l);
  CHECK((*g.grad(x))[0] == 4.0);
}
