#include <cmath>

#include "../support/random_graph.hpp"
#include "cerase/autodiff/grad_check.hpp"
#include "cerase/autodiff/optimizer.hpp"
#include "cerase/autodiff/session.hpp"
#include "doctest.h"

using namespace cerase;
using namespace cerase::ad;

TEST_CASE("forward: identity and sigmoid") {
  Graph g;
  auto x = g.input("x");
  g.mark_output("id", x);
  g.mark_output("sig", g.sigmoid(g.scale(x, 0.0)));
  NamedTensors<float> in;
  in.emplace("x", Tensor({3}, {1.f, 2.f, 3.f}));
  auto out = forward(g, in);
  CHECK(out.at("id") == Tensor({3}, {1.f, 2.f, 3.f}));
  for (float v : out.at("sig").values()) CHECK(v == 0.5f);
}

TEST_CASE("forward: zero-weight two-layer net returns the last bias") {
  Graph g;
  auto h = g.silu(g.dense(g.input("x"), g.param("w0"), g.param("b0")));
  g.mark_output("y", g.dense(h, g.param("w1"), g.param("b1")));
  NamedTensors<float> in;
  in.emplace("x", Tensor({2, 3}, {1, -2, 3, 0.5f, 4, -1}));
  in.emplace("w0", Tensor({3, 4}));
  in.emplace("b0", Tensor({4}, {1, 2, 3, 4}));
  in.emplace("w1", Tensor({4, 2}));
  in.emplace("b1", Tensor({2}, {0.25f, -7.f}));
  auto y = forward(g, in).at("y");
  CHECK(y == Tensor({2, 2}, {0.25f, -7.f, 0.25f, -7.f}));
}

TEST_CASE("forward: shape mismatch names the op and shapes") {
  Graph g;
  g.mark_output("y", g.matmul(g.input("a"), g.input("b")));
  NamedTensors<float> in;
  in.emplace("a", Tensor({2, 3}));
  in.emplace("b", Tensor({4, 5}));
  try {
    forward(g, in);
    FAIL("expected shape error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,5]") != std::string::npos);
  }
}

TEST_CASE("forward: unbound leaf is an error") {
  Graph g;
  g.mark_output("y", g.silu(g.input("x")));
  Session<float> s(g);
  CHECK_THROWS_AS(s.forward(), std::invalid_argument);
}

TEST_CASE("backward: sum gives ones, weighted square gives 2 w x^2") {
  Graph g;
  auto w = g.param("w");
  auto x = g.input("x");
  auto sum_loss = g.sum(w);
  auto sq_loss = g.sum_squares(g.mul(w, x));
  Session<double> s(g);
  s.bind("w", Tensor64({2, 2}, {0.5, -1.0, 2.0, 3.0}));
  s.bind("x", Tensor64({2, 2}, {1.0, 2.0, -3.0, 0.5}));
  s.forward();
  auto g1 = s.backward(sum_loss).at("w");
  for (double v : g1.values()) CHECK(v == 1.0);
  auto g2 = s.backward(sq_loss).at("w");
  const std::vector<double> w_vals{0.5, -1.0, 2.0, 3.0};
  const std::vector<double> x_vals{1.0, 2.0, -3.0, 0.5};
  for (std::size_t k = 0; k < 4; ++k) CHECK(g2[k] == doctest::Approx(2 * w_vals[k] * x_vals[k] * x_vals[k]));
}

TEST_CASE("backward: error paths") {
  Graph g;
  auto w = g.param("w");
  auto y = g.silu(w);
  auto loss = g.sum(y);
  Session<float> s(g);
  s.bind("w", Tensor({3}, {1, 2, 3}));
  CHECK_THROWS_AS(s.backward(loss), std::logic_error);
  s.forward();
  CHECK_THROWS_AS(s.backward(y), std::invalid_argument);
  CHECK_NOTHROW(s.backward(loss));
}

TEST_CASE("backward: stop_gradient blocks the path") {
  Graph g;
  auto w = g.param("w");
  auto loss = g.sum_squares(g.sub(w, g.stop_gradient(g.scale(w, 2.0))));
  Session<double> s(g);
  s.bind("w", Tensor64({1}, {3.0}));
  s.forward();
  // d/dw (w - c)^2 with c = 2w held constant: 2 (w - 2w) = -2w
  CHECK(s.backward(loss).at("w")[0] == doctest::Approx(-6.0));
}

TEST_CASE("backward: linearity over a sum of losses") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto rg = testing::make_random_graph(seed);
    auto& g = rg.graph;
    auto extra = g.sum(g.sigmoid(g.leaf("w0")));
    auto both = g.add(rg.loss, extra);
    Session<double> s(g);
    s.bind_all(rg.leaves);
    s.forward();
    auto ga = s.backward(rg.loss);
    auto gb = s.backward(extra);
    auto gab = s.backward(both);
    for (const auto& [name, t] : gab) {
      for (std::size_t k = 0; k < t.size(); ++k) {
        CHECK(t[k] == doctest::Approx(ga.at(name)[k] + gb.at(name)[k]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("forward is deterministic") {
  auto rg = testing::make_random_graph(7);
  Session<double> a(rg.graph), b(rg.graph);
  a.bind_all(rg.leaves);
  b.bind_all(rg.leaves);
  a.forward();
  b.forward();
  CHECK(a.value(rg.loss) == b.value(rg.loss));
}

TEST_CASE("grad_check: linear layer and SiLU chain pass") {
  Rng rng(11);
  {
    Graph g;
    auto loss = g.sum_squares(g.dense(g.input("x"), g.param("w"), g.param("b")));
    NamedTensors<double> leaves;
    leaves.emplace("x", testing::random_tensor(rng, {3, 4}));
    leaves.emplace("w", testing::random_tensor(rng, {4, 2}));
    leaves.emplace("b", testing::random_tensor(rng, {2}));
    auto report = grad_check(g, loss, leaves);
    CHECK(report.passed);
    CHECK(report.max_relative_error < 1e-4);
    CHECK(report.entries.size() == 10);
  }
  {
    Graph g;
    auto h = g.param("w");
    for (int i = 0; i < 4; ++i) h = g.silu(g.scale(h, 1.3));
    auto loss = g.sum(h);
    NamedTensors<double> leaves;
    leaves.emplace("w", testing::random_tensor(rng, {6}));
    CHECK(grad_check(g, loss, leaves).passed);
  }
}

TEST_CASE("grad_check: corrupted backward rule is reported") {
  auto bad = std::make_shared<CustomUnary>(CustomUnary{
      "bad_square", [](double x) { return x * x; }, [](double x) { return 3.0 * x; }});
  Graph g;
  auto loss = g.sum(g.custom_unary(g.param("w"), bad));
  NamedTensors<double> leaves;
  leaves.emplace("w", Tensor64({3}, {0.5, -1.0, 2.0}));
  auto report = grad_check(g, loss, leaves);
  CHECK_FALSE(report.passed);
  CHECK(report.max_relative_error > 0.1);
}

TEST_CASE("grad_check: randomized graphs match finite differences") {
  double worst = 0.0;
  for (std::uint64_t seed = 100; seed < 200; ++seed) {
    auto rg = testing::make_random_graph(seed);
    auto report = grad_check(rg.graph, rg.loss, rg.leaves);
    worst = std::max(worst, report.max_relative_error);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("time embedding carries no gradient to timesteps") {
  Graph g;
  auto t = g.param("t");
  auto loss = g.sum(g.time_embedding(t, 8));
  Session<double> s(g);
  s.bind("t", Tensor64({2}, {3.0, 7.0}));
  s.forward();
  auto grads = s.backward(loss);
  for (double v : grads.at("t").values()) CHECK(v == 0.0);
}

TEST_CASE("optimizer: sgd, zero gradient, adamw scalar step") {
  NamedTensors<float> params;
  params.emplace("p", Tensor({1}, {0.f}));
  NamedTensors<float> grads;
  grads.emplace("p", Tensor({1}, {1.f}));
  Optimizer sgd({.kind = OptimizerKind::kSgd, .learning_rate = 0.1});
  sgd.step(params, grads);
  CHECK(params.at("p")[0] == doctest::Approx(-0.1));

  for (auto kind : {OptimizerKind::kSgd, OptimizerKind::kAdam, OptimizerKind::kAdamW}) {
    NamedTensors<float> p2;
    p2.emplace("p", Tensor({3}, {1.f, -2.f, 3.f}));
    NamedTensors<float> zero;
    zero.emplace("p", Tensor({3}));
    Optimizer opt({.kind = kind, .learning_rate = 0.5});
    opt.step(p2, zero);
    CHECK(p2.at("p") == Tensor({3}, {1.f, -2.f, 3.f}));
  }

  // AdamW, one step, param 1.0, grad 0.5, lr 0.1, wd 0.01:
  // decay: 1 - 0.1*0.01*1 = 0.999; m = 0.05, v = 0.00025; mhat = 0.5, vhat = 0.25
  // step: 0.1 * 0.5 / (0.5 + 1e-8) = 0.09999999800000004 -> 0.899000002
  NamedTensors<float> p3;
  p3.emplace("p", Tensor({1}, {1.f}));
  NamedTensors<float> g3;
  g3.emplace("p", Tensor({1}, {0.5f}));
  Optimizer adamw({.kind = OptimizerKind::kAdamW, .learning_rate = 0.1, .weight_decay = 0.01});
  adamw.step(p3, g3);
  CHECK(p3.at("p")[0] == doctest::Approx(0.899000002).epsilon(1e-7));

  NamedTensors<float> bad;
  bad.emplace("p", Tensor({2}));
  CHECK_THROWS_AS(adamw.step(p3, bad), std::invalid_argument);
}
