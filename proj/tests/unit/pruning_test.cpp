#include <algorithm>
#include <cmath>
#include <numeric>

#include "../support/fixtures.hpp"
#include "cerase/pruning/prune.hpp"
#include "doctest.h"

using namespace cerase;
using namespace cerase::pruning;
using diffusion::LayerScope;
using diffusion::Prompt;
using cerase::testing::tiny_model;

namespace {

std::vector<Prompt> mixed_prompts(std::size_t n) {
  std::vector<Prompt> p;
  for (std::size_t i = 0; i < n; ++i) p.push_back(Prompt{{static_cast<int>(i % 4), static_cast<int>(5 + i % 7)}});
  return p;
}

double max_abs(const ad::Tensor& a, const ad::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace

TEST_CASE("soft mask values") {
  CHECK(soft_mask(0.0, 10.0) == 0.5);
  const double hi = 1.0 / (1.0 + std::exp(-10.0));
  CHECK(soft_mask(1.0, 10.0) == doctest::Approx(hi).epsilon(1e-12));
  CHECK(soft_mask(1.0, 10.0) == doctest::Approx(0.9999546).epsilon(1e-7));
  CHECK(soft_mask(-1.0, 10.0) == doctest::Approx(4.54e-5).epsilon(1e-3));
  CHECK(soft_mask(-1.0, 10.0) + soft_mask(1.0, 10.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(soft_mask(1.0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(soft_mask(1.0, -2.0), std::invalid_argument);
}

TEST_CASE("discretize: strict inequality at the threshold") {
  const std::vector<double> v{0.9, 0.5, 0.1, 0.5000001};
  CHECK(discretize(v, 0.5) == std::vector<std::uint8_t>{1, 0, 0, 1});
  CHECK_THROWS_AS(discretize(v, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(discretize(v, 1.0), std::invalid_argument);
}

TEST_CASE("soft mask is monotone and crosses one half at zero") {
  Rng rng(17);
  for (double temp : {0.5, 5.0, 10.0, 15.0}) {
    std::vector<float> m(400);
    for (auto& v : m) v = static_cast<float>(rng.normal() * 2.0);
    m[0] = 0.0f;
    std::vector<float> sorted = m;
    std::sort(sorted.begin(), sorted.end());
    const auto s = soft_mask(sorted, temp);
    for (std::size_t i = 1; i < s.size(); ++i) CHECK(s[i] >= s[i - 1]);
    const auto bits = discretize(soft_mask(m, temp), 0.5);
    for (std::size_t i = 0; i < m.size(); ++i) CHECK(bits[i] == (m[i] > 0.0f ? 1 : 0));
  }
}

TEST_CASE("magnitude prune: hand case and sorted oracle") {
  auto m = tiny_model(21);
  // every in-scope weight is large except four hand-set values
  const auto names = m.scope_params(LayerScope::kConditionalOnly);
  std::size_t p = 0;
  for (const auto& n : names) {
    for (auto& v : m.params().at(n).values()) v = 5.0f + 0.001f * static_cast<float>(p++);
  }
  auto& first = m.params().at(names.front());
  first[0] = 0.5f;
  first[1] = -0.1f;
  first[2] = 0.3f;
  first[3] = -0.7f;
  const auto mask = magnitude_prune(m, LayerScope::kConditionalOnly, 1.0 / double(p));
  CHECK(mask.pruned_count() == 1);
  CHECK(mask.find(names.front())->hard[1] == 0);

  // straight sort over all in-scope magnitudes
  const auto model = tiny_model(22);
  std::vector<std::pair<float, std::size_t>> flat;
  for (const auto& n : model.scope_params(LayerScope::kAll)) {
    for (float v : model.param(n).values()) flat.emplace_back(std::abs(v), flat.size());
  }
  std::stable_sort(flat.begin(), flat.end(), [](auto& a, auto& b) { return a.first < b.first; });
  const double ratio = 0.3;
  const auto count = static_cast<std::size_t>(std::llround(ratio * flat.size()));
  std::vector<std::uint8_t> expected(flat.size(), 1);
  for (std::size_t i = 0; i < count; ++i) expected[flat[i].second] = 0;
  const auto got = magnitude_prune(model, LayerScope::kAll, ratio);
  std::vector<std::uint8_t> bits;
  for (const auto& e : got.entries()) bits.insert(bits.end(), e.hard.begin(), e.hard.end());
  CHECK(bits == expected);
}

TEST_CASE("magnitude prune: ratio handling") {
  const auto m = tiny_model(23);
  CHECK(magnitude_prune(m, LayerScope::kAll, 0.0).pruned_count() == 0);
  const auto mask = magnitude_prune(m, LayerScope::kUnconditionalOnly, 0.1);
  CHECK(std::abs(mask.pruned_ratio() - 0.1) <= 1.0 / double(mask.size()));
  CHECK_THROWS_AS(magnitude_prune(m, LayerScope::kAll, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(magnitude_prune(m, LayerScope::kAll, -0.1), std::invalid_argument);
}

TEST_CASE("masked forward: all-ones, all-zeros and initialization") {
  const auto m = tiny_model(24);
  const auto x = cerase::testing::random_images(8, 3);
  const std::vector<int> ts{1, 4, 9, 16, 25, 36, 49, 50};
  const auto cond = diffusion::Conditioning::from_prompts(mixed_prompts(8), m.vocab());
  diffusion::DenoiserEvaluator eval(m);
  const auto plain = eval.predict(x, ts, cond);

  for (auto scope : {LayerScope::kAll, LayerScope::kConditionalOnly, LayerScope::kUnconditionalOnly}) {
    const auto ones = ParamMask::all_ones(m, scope);
    CHECK(masked_forward(m, ones, MaskMode::kHard, x, ts, cond) == plain);
    CHECK(apply_mask(m, ones) == m);
  }

  auto zeros = ParamMask::all_ones(m, LayerScope::kAll);
  for (auto& e : zeros.entries()) std::fill(e.hard.begin(), e.hard.end(), std::uint8_t{0});
  const auto out = masked_forward(m, zeros, MaskMode::kHard, x, ts, cond);
  for (std::size_t r = 1; r < out.rows(); ++r) {
    for (std::size_t k = 0; k < out.cols(); ++k) CHECK(out.at(r, k) == out.at(0, k));
  }

  // m = 1 at temperature 10 scales every in-scope parameter by sigmoid(10)
  const auto init = ParamMask::with_logits(m, LayerScope::kAll, 1.0, 10.0, 0.5);
  const auto soft = apply_mask(m, init, MaskMode::kSoft);
  double rel = 0.0;
  for (const auto& name : m.scope_params(LayerScope::kAll)) {
    const auto& a = m.param(name);
    const auto& b = soft.param(name);
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i] != 0.0f) rel = std::max(rel, std::abs(double(b[i]) - a[i]) / std::abs(double(a[i])));
    }
  }
  CHECK(rel < 1e-4);
  CHECK(max_abs(masked_forward(m, init, MaskMode::kSoft, x, ts, cond), plain) < 1e-3);
}

TEST_CASE("mask bookkeeping: counts partition and compatibility") {
  const auto m = tiny_model(25);
  auto mask = ParamMask::with_logits(m, LayerScope::kUnconditionalOnly);
  CHECK(mask.size() == m.parameter_count(LayerScope::kUnconditionalOnly));
  Rng rng(4);
  for (auto& e : mask.entries()) {
    for (auto& v : e.logits.values()) v = static_cast<float>(rng.normal());
  }
  mask.discretize();
  std::size_t sum = 0;
  for (const auto& [layer, n] : mask.pruned_per_layer()) sum += n;
  CHECK(sum == mask.pruned_count());
  CHECK(mask.pruned_count() > 0);
  CHECK(mask.pruned_ratio() == doctest::Approx(double(mask.pruned_count()) / mask.size()));

  auto cfg = cerase::testing::tiny_config();
  cfg.hidden = 12;
  Rng r2(1);
  const auto wider = diffusion::DenoiserModel::initialize(cfg, diffusion::kConceptCount, r2);
  CHECK_THROWS_AS(mask.check_compatible(wider), std::invalid_argument);
  CHECK_THROWS_AS(apply_mask(wider, mask), std::invalid_argument);
  CHECK_NOTHROW(mask.check_compatible(m));
}

TEST_CASE("prune erase: K = 0, theta* untouched, per-layer partition") {
  const auto frozen = tiny_model(26);
  const auto copy = frozen;
  const auto data = cerase::testing::small_dataset();
  const auto objective = erasing::EraseObjective::esd(0);
  auto cfg = erasing::default_config(objective, erasing::EraseMode::kPrune);
  cfg.iterations = 0;
  const auto zero = prune_erase(frozen, data, objective, cfg);
  CHECK(zero.mask.pruned_count() == 0);
  CHECK(zero.report.pruned_ratio == 0.0);

  cfg.iterations = 10;
  cfg.batch = 8;
  cfg.scope = LayerScope::kAll;
  const auto r = prune_erase(frozen, data, objective, cfg);
  CHECK(frozen == copy);
  CHECK(r.report.loss_curve.size() == 10);
  CHECK(r.mask.has_hard());
  std::size_t sum = 0;
  for (const auto& [layer, n] : r.report.pruned_per_layer) sum += n;
  CHECK(sum == r.report.pruned_count);
  CHECK(std::accumulate(r.report.histogram.begin(), r.report.histogram.end(), std::size_t{0}) == r.mask.size());
  // the logits moved away from their initial value
  bool moved = false;
  for (const auto& e : r.mask.entries()) {
    for (float v : e.logits.values()) moved |= v != 1.0f;
  }
  CHECK(moved);
  const auto again = prune_erase(frozen, data, objective, cfg);
  CHECK(again.mask == r.mask);
}

TEST_CASE("pre-prune and post-prune") {
  const auto frozen = tiny_model(27);
  const auto data = cerase::testing::small_dataset();
  const auto objective = erasing::EraseObjective::esd(1);
  auto cfg = erasing::default_config(objective, erasing::EraseMode::kFinetune);
  cfg.iterations = 0;
  CHECK(preprune_erase(frozen, data, 0.0, objective, cfg).model == frozen);

  cfg.iterations = 6;
  cfg.batch = 8;
  const auto pre = preprune_erase(frozen, data, 0.1, objective, cfg);
  for (const auto& e : pre.mask.entries()) {
    const auto& w = pre.model.param(e.param);
    for (std::size_t i = 0; i < e.hard.size(); ++i) {
      if (!e.hard[i]) CHECK(w[i] == 0.0f);
    }
  }

  const auto ft = erasing::finetune_erase(frozen, data, objective, cfg);
  CHECK(postprune_erase(frozen, data, objective, cfg, 0.0).model == ft.model);
  const auto post = postprune_erase(frozen, data, objective, cfg, 0.1);
  CHECK(post.mask.pruned_count() == static_cast<std::size_t>(std::llround(0.1 * post.mask.size())));
}

TEST_CASE("neuron prune") {
  const auto m = tiny_model(28);
  const auto x = cerase::testing::random_images(6, 8);
  const std::vector<int> ts{2, 8, 14, 20, 30, 45};
  const auto prompts = mixed_prompts(6);
  diffusion::DenoiserEvaluator plain(m);
  const auto ref_out = plain.predict(x, ts, prompts);
  diffusion::DenoiserEvaluator empty(neuron_prune(m, {}));
  CHECK(empty.predict(x, ts, prompts) == ref_out);

  std::vector<Neuron> all;
  for (std::size_t b = 0; b < m.config().blocks; ++b) {
    for (std::size_t c = 0; c < m.config().hidden; ++c) all.push_back({b, c});
  }
  diffusion::DenoiserEvaluator dead(neuron_prune(m, all));
  const auto out = dead.predict(x, ts, prompts);
  for (std::size_t r = 1; r < out.rows(); ++r) {
    for (std::size_t k = 0; k < out.cols(); ++k) CHECK(out.at(r, k) == out.at(0, k));
  }

  diffusion::DenoiserEvaluator one(neuron_prune(m, {{1, 3}}));
  CHECK(one.predict(x, ts, prompts) != ref_out);

  CHECK_THROWS_AS(neuron_mask(m, {{m.config().blocks, 0}}), std::invalid_argument);
  CHECK_THROWS_AS(neuron_mask(m, {{0, m.config().hidden}}), std::invalid_argument);
}
