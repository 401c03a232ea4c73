#include <cmath>

#include "../support/fixtures.hpp"
#include "cerase/analysis/neurons.hpp"
#include "doctest.h"

using namespace cerase;
using namespace cerase::analysis;
using cerase::testing::tiny_model;
using diffusion::Prompt;

namespace {

std::vector<Prompt> prompts(std::size_t n, int concept_id) {
  std::vector<Prompt> p;
  for (std::size_t i = 0; i < n; ++i) p.push_back(Prompt{{concept_id, static_cast<int>(6 + i)}});
  return p;
}

ProbeOptions small_options() {
  ProbeOptions o;
  o.timesteps = {5, 25, 45};
  o.samples = 3;
  return o;
}

ScoreGrid grid_1x1(const std::vector<double>& values) {
  ScoreGrid g({25}, 1, values.size());
  for (std::size_t c = 0; c < values.size(); ++c) g.at(0, 0, c) = values[c];
  return g;
}

ActivationTrace scalar_trace(double norm) {
  ActivationTrace t({25}, 1, 1, 1, 7);
  t.norm(0, 0, 0, 0) = norm;
  return t;
}

}  // namespace

TEST_CASE("correlation and sensitivity hand cases") {
  const std::vector<double> star{2.0, -1.0}, tilde{0.5, 0.5};
  CHECK(correlation_term(star, tilde) == doctest::Approx(2.0).epsilon(1e-12));
  const std::vector<double> a{1.0, -1.0}, b{0.0, 0.0};
  CHECK(sensitivity_term(a, b) == doctest::Approx(2.0).epsilon(1e-12));

  // the same case through the trace path: norms 3 and 1
  const auto rho = concept_correlation(scalar_trace(3.0), scalar_trace(1.0));
  CHECK(rho.at(0, 0, 0) == doctest::Approx(2.0));
  CHECK(concept_correlation(scalar_trace(1.0), scalar_trace(4.0)).at(0, 0, 0) < 0.0);

  ActivationTrace other({25}, 1, 1, 1, 8);
  CHECK_THROWS_AS(concept_correlation(scalar_trace(1.0), other), std::invalid_argument);
  ActivationTrace shifted({35}, 1, 1, 1, 7);
  CHECK_THROWS_AS(concept_correlation(scalar_trace(1.0), shifted), std::invalid_argument);
}

TEST_CASE("capture: determinism, zero weights, non-negativity") {
  const auto m = tiny_model(31);
  const auto pool = cerase::testing::random_images(16, 2);
  const auto opts = small_options();
  const Rng rng(9);
  const auto a = capture_activations(m, prompts(3, 1), pool, opts, rng);
  const auto b = capture_activations(m, prompts(3, 1), pool, opts, rng);
  CHECK(a == b);
  CHECK(a.records() == 3 * opts.samples);
  for (std::size_t ti = 0; ti < a.timesteps().size(); ++ti) {
    for (std::size_t bl = 0; bl < a.blocks(); ++bl) {
      for (std::size_t r = 0; r < a.records(); ++r) {
        for (std::size_t c = 0; c < a.channels(); ++c) {
          const double v = a.norm(ti, bl, r, c);
          CHECK(std::isfinite(v));
          CHECK(v >= 0.0);
        }
      }
    }
  }

  auto zero = m;
  for (auto& [name, t] : zero.params()) {
    if (name.ends_with("weight")) std::fill(t.values().begin(), t.values().end(), 0.0f);
  }
  const auto z = capture_activations(zero, prompts(2, 0), pool, opts, rng);
  for (std::size_t bl = 0; bl < z.blocks(); ++bl) {
    const std::string pre = "block" + std::to_string(bl);
    for (std::size_t c = 0; c < z.channels(); ++c) {
      const double v = double(zero.param(pre + ".dense.bias")[c]) + zero.param(pre + ".time.bias")[c];
      const double expected = std::abs(v / (1.0 + std::exp(-v)));
      for (std::size_t r = 0; r < z.records(); ++r) CHECK(z.norm(1, bl, r, c) == doctest::Approx(expected).epsilon(1e-5));
    }
  }
}

TEST_CASE("correlation: identity and antisymmetry") {
  const auto m = tiny_model(32);
  const auto n = tiny_model(33);
  const auto pool = cerase::testing::random_images(16, 3);
  const Rng rng(4);
  const auto ta = capture_activations(m, prompts(2, 2), pool, small_options(), rng);
  const auto tb = capture_activations(n, prompts(2, 2), pool, small_options(), rng);
  const auto self = concept_correlation(ta, ta);
  for (double v : self.values()) CHECK(v == 0.0);
  const auto ab = concept_correlation(ta, tb);
  const auto ba = concept_correlation(tb, ta);
  for (std::size_t i = 0; i < ab.values().size(); ++i) CHECK(ab.values()[i] == -ba.values()[i]);

  // different prompts mean different inputs
  const auto tc = capture_activations(n, prompts(2, 3), pool, small_options(), rng);
  CHECK_THROWS_AS(concept_correlation(ta, tc), std::invalid_argument);
}

TEST_CASE("identify concept neurons: ordering rules") {
  const auto top = identify_concept_neurons(grid_1x1({3, 2, 2, 1}), 2);
  CHECK(top.channels.at(0) == std::vector<std::size_t>{0, 1});
  CHECK(identify_concept_neurons(grid_1x1({0, 0, 0, 0, 0}), 3).channels.at(0) == std::vector<std::size_t>{0, 1, 2});
  CHECK(identify_concept_neurons(grid_1x1({-1, 5, 0.5, 7}), 2).channels.at(0) == std::vector<std::size_t>{1, 3});
  CHECK_THROWS_AS(identify_concept_neurons(grid_1x1({1, 2}), 3), std::invalid_argument);
  CHECK_THROWS_AS(identify_concept_neurons(grid_1x1({1, 2}), 0), std::invalid_argument);

  // mean over timesteps, then per block; invariant to positive scaling
  Rng rng(6);
  ScoreGrid g({5, 15, 25}, 3, 10);
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t b = 0; b < 3; ++b) {
      for (std::size_t c = 0; c < 10; ++c) g.at(t, b, c) = rng.normal();
    }
  }
  ScoreGrid scaled = g;
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t b = 0; b < 3; ++b) {
      for (std::size_t c = 0; c < 10; ++c) scaled.at(t, b, c) = 7.5 * g.at(t, b, c);
    }
  }
  const auto sel = identify_concept_neurons(g, 4);
  CHECK(identify_concept_neurons(scaled, 4).channels == sel.channels);
  CHECK(sel.count() == 12);
  for (std::size_t b = 0; b < 3; ++b) {
    std::vector<double> mean(10, 0.0);
    for (std::size_t c = 0; c < 10; ++c) mean[c] = (g.at(0, b, c) + g.at(1, b, c) + g.at(2, b, c)) / 3.0;
    double lowest_in = 1e9, highest_out = -1e9;
    for (std::size_t c = 0; c < 10; ++c) {
      if (sel.contains(b, c)) lowest_in = std::min(lowest_in, mean[c]);
      else highest_out = std::max(highest_out, mean[c]);
    }
    CHECK(lowest_in >= highest_out);
  }
}

TEST_CASE("sensitivity: zero for identical prompts, non-negative, triangle bound") {
  const auto m = tiny_model(34);
  const auto pool = cerase::testing::random_images(16, 5);
  const auto opts = small_options();
  const Rng rng(11);
  const auto cond = [&](int c, int filler) {
    return diffusion::Conditioning::from_prompts({Prompt{{c, filler}}}, m.vocab());
  };
  const auto same = sensitivity(m, {{cond(0, 7), cond(0, 7)}}, pool, opts, rng);
  for (double v : same.values()) CHECK(v == 0.0);

  const auto c = cond(0, 7), mid = cond(2, 9), adv = cond(1, 12);
  const auto direct = sensitivity(m, {{c, adv}}, pool, opts, rng);
  const auto first = sensitivity(m, {{c, mid}}, pool, opts, rng);
  const auto second = sensitivity(m, {{mid, adv}}, pool, opts, rng);
  bool positive = false;
  for (std::size_t i = 0; i < direct.values().size(); ++i) {
    CHECK(direct.values()[i] >= 0.0);
    CHECK(direct.values()[i] <= first.values()[i] + second.values()[i] + 1e-6);
    positive |= direct.values()[i] > 0.0;
  }
  CHECK(positive);
}

TEST_CASE("sensitivity report: group means") {
  ScoreGrid g({5, 15}, 2, 4);
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t c = 0; c < 4; ++c) g.at(t, b, c) = 1.5;
    }
  }
  ConceptNeurons n{{{0}, {2, 3}}};
  const auto flat = sensitivity_report(g, n);
  REQUIRE(flat.concept_mean.size() == 2);
  for (std::size_t t = 0; t < 2; ++t) CHECK(flat.concept_mean[t] == flat.other_mean[t]);

  g.at(1, 0, 0) = 4.5;
  g.at(1, 1, 2) = 4.5;
  g.at(1, 1, 3) = 4.5;
  const auto r = sensitivity_report(g, n);
  CHECK(r.concept_mean[1] == doctest::Approx(4.5));
  CHECK(r.other_mean[1] == doctest::Approx(1.5));
  CHECK(sensitivity_csv({{"esd", r}}).starts_with("model,timestep,concept_mean,other_mean\n"));
}

TEST_CASE("pruned weight distribution") {
  const auto m = tiny_model(35);
  auto mask = pruning::ParamMask::all_ones(m, diffusion::LayerScope::kAll);
  CHECK(analysis::pruned_weight_distribution(mask).empty());

  mask.entries()[1].hard[0] = 0;
  mask.entries()[1].hard[1] = 0;
  const auto one = pruned_weight_distribution(mask);
  for (const auto& [layer, pct] : one.percent) CHECK(pct == (layer == mask.entries()[1].layer ? 100.0 : 0.0));

  // one pruned weight in each of four layers
  auto four = pruning::ParamMask::all_ones(m, diffusion::LayerScope::kAll);
  const auto layers = four.layers();
  REQUIRE(layers.size() >= 4);
  for (std::size_t i = 0; i < 4; ++i) {
    for (auto& e : four.entries()) {
      if (e.layer == layers[i]) {
        e.hard[0] = 0;
        break;
      }
    }
  }
  const auto d = pruned_weight_distribution(four);
  double total = 0.0;
  for (const auto& [layer, pct] : d.percent) {
    total += pct;
    const bool chosen = std::find(layers.begin(), layers.begin() + 4, layer) != layers.begin() + 4;
    CHECK(pct == (chosen ? 25.0 : 0.0));
  }
  CHECK(total == doctest::Approx(100.0));
}
