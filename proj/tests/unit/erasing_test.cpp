#include <cmath>

#include "../support/fixtures.hpp"
#include "cerase/erasing/erasing.hpp"
#include "doctest.h"

using namespace cerase;
using namespace cerase::erasing;
using diffusion::Prompt;
using cerase::testing::tiny_model;

namespace {

// Straight-line negative-guidance target: y = e_null - g (e_c - e_null).
double esd_scalar(double e_null, double e_c, double g) { return e_null - g * (e_c - e_null); }

}  // namespace

TEST_CASE("esd target: scalar hand case and degenerations") {
  const ad::Tensor e_null({1}, {0.2f});
  const ad::Tensor e_c({1}, {0.5f});
  const auto y = esd_target_values(e_null, e_c, 1.0);
  CHECK(y[0] == doctest::Approx(esd_scalar(0.2, 0.5, 1.0)).epsilon(1e-6));
  CHECK(std::abs(y[0] - (-0.1)) < 1e-6);

  const auto m = tiny_model(4);
  const auto x = cerase::testing::random_images(6, 2);
  const std::vector<int> ts{1, 5, 10, 20, 30, 50};
  diffusion::DenoiserEvaluator eval(m);
  const auto uncond = eval.predict(x, ts, std::vector<Prompt>(6, diffusion::null_prompt()));
  const auto cond = diffusion::Conditioning::from_prompts(std::vector<Prompt>(6, Prompt{{2, 9}}), m.vocab());
  CHECK(esd_target(m, x, ts, cond, 0.0) == uncond);
  const auto null_cond = diffusion::Conditioning::from_prompts(std::vector<Prompt>(6, diffusion::null_prompt()), m.vocab());
  for (double g : {0.0, 1.0, 3.5}) CHECK(esd_target(m, x, ts, null_cond, g) == uncond);
  CHECK_THROWS_AS(esd_target_values(e_null, ad::Tensor({2}), 1.0), std::invalid_argument);
}

TEST_CASE("ac target: equals a plain forward pass") {
  const auto m = tiny_model(5);
  const auto x = cerase::testing::random_images(4, 7);
  const std::vector<int> ts{3, 9, 27, 44};
  const std::vector<Prompt> anchors(4, Prompt{{3, 11}});
  diffusion::DenoiserEvaluator eval(m);
  CHECK(ac_target(m, x, ts, diffusion::Conditioning::from_prompts(anchors, m.vocab())) == eval.predict(x, ts, anchors));
}

TEST_CASE("objective validation") {
  CHECK_THROWS_AS(EraseObjective::esd(1, -0.5).validate(4), std::invalid_argument);
  CHECK_THROWS_AS(EraseObjective::ac(1, 1).validate(4), std::invalid_argument);
  CHECK_THROWS_AS(EraseObjective::esd(4).validate(4), std::invalid_argument);
  CHECK_NOTHROW(EraseObjective::ac(1, 2).validate(4));
  CHECK(parse_objective_kind("ac") == ObjectiveKind::kAc);
  CHECK_THROWS(parse_objective_kind("uce"));
}

TEST_CASE("erase loss: zero cases") {
  const auto m = tiny_model(6);
  const auto data = cerase::testing::small_dataset();
  Rng rng(1);
  // esd with guidance 0 on null prompts: prediction equals target
  auto esd0 = EraseObjective::esd(0, 0.0);
  auto batch = draw_erase_batch(m, data, esd0, 8, 0, rng);
  for (auto& p : batch.prompts) p = diffusion::null_prompt();
  batch.target = esd_target(m, batch.xt, batch.timesteps,
                            diffusion::Conditioning::from_prompts(batch.prompts, m.vocab()), 0.0);
  CHECK(erase_loss(m, esd0, batch) == 0.0);

  // ac with anchors equal to the erase prompts
  const auto ac = EraseObjective::ac(0, 1);
  auto acb = draw_erase_batch(m, data, ac, 8, 2, rng);
  acb.anchors = acb.prompts;
  CHECK(erase_loss(m, ac, acb) == 0.0);
}

TEST_CASE("erase loss: anchor prompts swap only the concept token") {
  const auto m = tiny_model(6);
  const auto data = cerase::testing::small_dataset();
  Rng rng(2);
  const auto batch = draw_erase_batch(m, data, EraseObjective::ac(2, 3), 16, 3, rng);
  REQUIRE(batch.prompts.size() == 16);
  for (std::size_t r = 0; r < 16; ++r) {
    REQUIRE(batch.prompts[r].tokens.size() == batch.anchors[r].tokens.size());
    for (std::size_t k = 0; k < batch.prompts[r].tokens.size(); ++k) {
      const int a = batch.prompts[r].tokens[k], b = batch.anchors[r].tokens[k];
      if (a == diffusion::concept_token(2)) CHECK(b == diffusion::concept_token(3));
      else CHECK(a == b);
    }
  }
}

TEST_CASE("erase loss: matches a straight-line reimplementation") {
  const auto frozen = tiny_model(8);
  const auto data = cerase::testing::small_dataset();
  Rng rng(3);
  const auto objective = EraseObjective::esd(1, 1.0);
  const auto batch = draw_erase_batch(frozen, data, objective, 12, 3, rng);
  const std::vector<Prompt> nulls(12, diffusion::null_prompt());
  const auto e_c = cerase::testing::reference_forward(frozen, batch.xt, batch.timesteps, batch.prompts);
  const auto e_u = cerase::testing::reference_forward(frozen, batch.xt, batch.timesteps, nulls);

  // the edited model differs from theta* so the loss is not trivially zero
  auto edited = tiny_model(9);
  edited.vocab() = frozen.vocab();
  const auto pred = cerase::testing::reference_forward(edited, batch.xt, batch.timesteps, batch.prompts);
  double sum = 0.0;
  for (std::size_t r = 0; r < 12; ++r) {
    for (std::size_t k = 0; k < diffusion::kImagePixels; ++k) {
      const double y = esd_scalar(e_u[r][k], e_c[r][k], 1.0);
      CHECK(batch.target.at(r, k) == doctest::Approx(y).epsilon(1e-5));
      sum += (pred[r][k] - y) * (pred[r][k] - y);
    }
  }
  const double oracle = sum / (12.0 * diffusion::kImagePixels);
  CHECK(std::abs(erase_loss(edited, objective, batch) - oracle) < 1e-6 * std::max(1.0, oracle));
}

TEST_CASE("ac loss gradient: stop-gradient excludes the anchor path") {
  const auto m = tiny_model(10);
  const auto data = cerase::testing::small_dataset();
  Rng rng(5);
  const auto objective = EraseObjective::ac(0, 2);
  const auto batch = draw_erase_batch(m, data, objective, 4, 2, rng);
  const auto source = [](ad::Graph& g, const std::string& name) {
    return g.has_leaf(name) ? g.leaf(name) : g.param(name);
  };

  // ten parameters of a FiLM map: the only weights whose effect depends on the prompt
  const std::string probe = "block0.film.scale_weight";
  const std::vector<std::size_t> entries{0, 1, 2, 3, 17, 18, 19, 33, 34, 35};
  const auto params64 = [&](const diffusion::DenoiserModel& model) {
    ad::NamedTensors<double> p;
    for (const auto& [name, t] : model.params()) p.emplace(name, t.cast<double>());
    return p;
  };
  const auto gradient = [&](bool stop) {
    EraseLossGraph elg(m.config(), objective, source, stop);
    ad::Session<double> s(elg.graph());
    elg.bind_batch(s, batch, m.vocab());
    s.bind_all(params64(m));
    s.forward();
    return s.backward(elg.loss()).at(probe);
  };
  // loss with the target frozen at theta, as a function of the edited weights
  const auto frozen_target_loss = [&](const ad::NamedTensors<double>& p) {
    EraseLossGraph elg(m.config(), objective, source, true);
    ad::Session<double> s(elg.graph());
    elg.bind_batch(s, batch, m.vocab());
    s.bind_all(p);
    s.forward();
    return s.value(elg.loss()).item();
  };
  const auto full_loss = frozen_target_loss;  // without an edit both branches see the same p

  const auto g_stop = gradient(true);
  const auto g_full = gradient(false);
  const double h = 1e-5;
  double differs = 0.0;
  for (std::size_t k : entries) {
    // stop-gradient: perturb only the main branch by holding the anchor prediction fixed
    auto base = params64(m);
    const auto anchor_pred = [&]() {
      diffusion::DenoiserEvaluator eval(m);
      return eval.predict(batch.xt, batch.timesteps, batch.anchors);
    }();
    auto fixed = [&](double delta) {
      auto p = base;
      p.at(probe)[k] += delta;
      auto edited = m;
      for (auto& [name, t] : edited.params()) {
        const auto& src = p.at(name);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(src[i]);
      }
      const auto pred = cerase::testing::reference_forward(edited, batch.xt, batch.timesteps, batch.prompts);
      double sum = 0.0;
      for (std::size_t r = 0; r < pred.size(); ++r) {
        for (std::size_t j = 0; j < pred[r].size(); ++j) {
          const double d = pred[r][j] - anchor_pred.at(r, j);
          sum += d * d;
        }
      }
      return sum / (pred.size() * diffusion::kImagePixels);
    };
    const double fd_stop = (fixed(1e-3) - fixed(-1e-3)) / 2e-3;
    CHECK(g_stop[k] == doctest::Approx(fd_stop).epsilon(2e-2).scale(1e-4));

    auto plus = base, minus = base;
    plus.at(probe)[k] += h;
    minus.at(probe)[k] -= h;
    const double fd_full = (full_loss(plus) - full_loss(minus)) / (2 * h);
    CHECK(g_full[k] == doctest::Approx(fd_full).epsilon(1e-4).scale(1e-8));
    differs = std::max(differs, std::abs(g_stop[k] - g_full[k]));
  }
  CHECK(differs > 1e-6);
}

TEST_CASE("finetune: K = 0 is the identity, scope is respected, runs are deterministic") {
  const auto frozen = tiny_model(11);
  const auto data = cerase::testing::small_dataset();
  const auto objective = EraseObjective::esd(2);
  auto cfg = default_config(objective, EraseMode::kFinetune);
  cfg.iterations = 0;
  CHECK(finetune_erase(frozen, data, objective, cfg).model == frozen);

  cfg.iterations = 8;
  cfg.batch = 8;
  for (auto scope : {diffusion::LayerScope::kUnconditionalOnly, diffusion::LayerScope::kConditionalOnly}) {
    cfg.scope = scope;
    const auto a = finetune_erase(frozen, data, objective, cfg);
    const auto b = finetune_erase(frozen, data, objective, cfg);
    CHECK(a.model == b.model);
    CHECK(a.loss_curve.size() == 8);
    CHECK(a.model.vocab().embeddings() == frozen.vocab().embeddings());
    bool changed = false;
    for (const auto& layer : frozen.layers()) {
      for (const auto& p : layer.params) {
        const bool same = a.model.param(p.name) == frozen.param(p.name);
        if (!diffusion::in_scope(layer.kind, scope)) CHECK(same);
        changed |= !same;
      }
    }
    CHECK(changed);
  }
}

TEST_CASE("finetune: frozen entries stay zero") {
  const auto frozen = tiny_model(12);
  const auto data = cerase::testing::small_dataset();
  const auto objective = EraseObjective::esd(0);
  auto cfg = default_config(objective, EraseMode::kFinetune);
  cfg.iterations = 5;
  cfg.batch = 4;
  KeepBits keep;
  std::vector<std::uint8_t> bits(frozen.param("out.weight").size(), 1);
  for (std::size_t i = 0; i < bits.size(); i += 3) bits[i] = 0;
  keep["out.weight"] = bits;
  const auto r = finetune_erase(frozen, data, objective, cfg, &keep);
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (!bits[i]) CHECK(r.model.param("out.weight")[i] == 0.0f);
  }
}

TEST_CASE("default scopes and configs") {
  using diffusion::LayerScope;
  CHECK(default_scope(ObjectiveKind::kEsd, EraseMode::kFinetune, 0) == LayerScope::kUnconditionalOnly);
  CHECK(default_scope(ObjectiveKind::kEsd, EraseMode::kFinetune, 2) == LayerScope::kConditionalOnly);
  const auto p = default_config(EraseObjective::esd(2), EraseMode::kPrune);
  CHECK(p.optimizer.learning_rate == 0.1);
  CHECK(p.iterations == 250);
  CHECK(p.optimizer.epsilon == 4e-5);
  const auto a = default_config(EraseObjective::ac(2, 3), EraseMode::kPrune);
  CHECK(a.optimizer.learning_rate == 0.01);
  CHECK(a.iterations == 1000);
  CHECK(a.optimizer.epsilon == 1e-5);
  CHECK(default_config(EraseObjective::esd(2), EraseMode::kFinetune).optimizer.epsilon == 1e-8);
  CHECK(p.temperature == 10.0);
  CHECK(p.threshold == 0.5);
}
