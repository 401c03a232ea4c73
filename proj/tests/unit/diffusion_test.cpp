#include <algorithm>
#include <cmath>
#include <set>

#include "../support/fixtures.hpp"
#include "cerase/diffusion/sampler.hpp"
#include "cerase/diffusion/schedule.hpp"
#include "cerase/diffusion/trainer.hpp"
#include "doctest.h"

using namespace cerase;
using namespace cerase::diffusion;
using cerase::testing::tiny_config;
using cerase::testing::tiny_model;

TEST_CASE("schedule: two-step product") {
  const NoiseSchedule s(2, {0.1, 0.1});
  CHECK(s.alpha_bar(0) == 1.0);
  CHECK(s.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(s.alpha_bar(2) == doctest::Approx(0.81).epsilon(1e-15));
}

TEST_CASE("schedule: default alpha_bar matches a one-line product") {
  const auto s = make_schedule(50, 1e-4, 0.05);
  double prod = 1.0;
  for (int t = 1; t <= 50; ++t) prod *= 1.0 - (1e-4 + (0.05 - 1e-4) * (t - 1) / 49.0);
  CHECK(s.alpha_bar(50) == doctest::Approx(prod).epsilon(1e-12));
  for (int t = 1; t <= 50; ++t) {
    CHECK(s.beta(t) > 0.0);
    CHECK(s.beta(t) < 1.0);
    CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
  }
}

TEST_CASE("schedule: invalid ranges throw") {
  CHECK_THROWS_AS(make_schedule(50, 0.05, 1e-4), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(1, 1e-4, 0.05), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.05), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0), std::invalid_argument);
}

TEST_CASE("q_sample: eps = 0, t = 0 and the hand case") {
  const auto s = make_schedule(50, 1e-4, 0.05);
  const ad::Tensor x0({1, 3}, {0.5f, -1.f, 0.25f});
  const ad::Tensor zero({1, 3});
  const auto xt = q_sample(x0, 17, zero, s);
  for (std::size_t i = 0; i < 3; ++i) CHECK(xt[i] == static_cast<float>(std::sqrt(s.alpha_bar(17)) * x0[i]));
  CHECK(q_sample(x0, 0, ad::Tensor({1, 3}, {1.f, 1.f, 1.f}), s) == x0);

  const NoiseSchedule two(2, {0.1, 0.1});
  const auto hand = q_sample(ad::Tensor({1}, {1.f}), 2, ad::Tensor({1}, {1.f}), two);
  CHECK(hand[0] == doctest::Approx(0.9 + std::sqrt(0.19)).epsilon(1e-6));
  CHECK(hand[0] == doctest::Approx(1.33589).epsilon(1e-5));

  CHECK_THROWS_AS(q_sample(x0, 51, zero, s), std::out_of_range);
  CHECK_THROWS_AS(q_sample(x0, 3, ad::Tensor({1, 2}), s), std::invalid_argument);
}

TEST_CASE("q_sample: Monte-Carlo marginal") {
  const auto s = make_schedule(50, 1e-4, 0.05);
  const int t = 25;
  const std::size_t n = 20000;
  ad::Tensor x0({n, 1}, std::vector<float>(n, 0.7f));
  ad::Tensor eps({n, 1});
  Rng rng(5);
  for (auto& v : eps.values()) v = static_cast<float>(rng.normal());
  const auto xt = q_sample(x0, t, eps, s);
  double mean = 0.0, sq = 0.0;
  for (float v : xt.values()) mean += v;
  mean /= n;
  for (float v : xt.values()) sq += (v - mean) * (v - mean);
  const double var = sq / (n - 1);
  const double want_mean = std::sqrt(s.alpha_bar(t)) * 0.7;
  const double want_var = 1.0 - s.alpha_bar(t);
  CHECK(std::abs(mean - want_mean) < 3.0 * std::sqrt(want_var / n));
  CHECK(std::abs(var - want_var) < 3.0 * want_var * std::sqrt(2.0 / (n - 1)));
}

TEST_CASE("dataset: sizes, label coverage and determinism") {
  const auto a = cerase::testing::small_dataset(4);
  const auto b = cerase::testing::small_dataset(4);
  CHECK(a.train.images == b.train.images);
  CHECK(a.heldout.labels == b.heldout.labels);
  for (int c = 0; c < kConceptCount; ++c) {
    CHECK(a.train.images_of(c).rows() == 64);
    CHECK(a.heldout.images_of(c).rows() == 32);
  }
  for (float v : a.train.images.values()) {
    CHECK(v >= -1.f);
    CHECK(v <= 1.f);
  }
  DatasetConfig defaults;
  CHECK(defaults.train_per_concept >= 512);
  CHECK(defaults.heldout_per_concept >= 256);
}

TEST_CASE("vocabulary: reserved ids, validation and permutation-invariant encoding") {
  Rng rng(2);
  const auto vocab = Vocabulary::random(kConceptCount, rng);
  for (int c = 0; c < kConceptCount; ++c) CHECK(concept_token(c) != vocab.null_token());
  CHECK_THROWS_AS(vocab.validate(Prompt{{}}), std::invalid_argument);
  CHECK_THROWS_AS(vocab.validate(Prompt{{1, 40}}), std::invalid_argument);
  CHECK_THROWS_AS(vocab.validate(Prompt{std::vector<int>(kMaxPromptLength + 1, 1)}), std::invalid_argument);

  const Prompt p{{3, 9, 17, 9}};
  Prompt shuffled{{9, 17, 9, 3}};
  CHECK(vocab.encode(p) == vocab.encode(shuffled));
}

TEST_CASE("model: layer kinds partition the parameters") {
  for (bool bias : {false, true}) {
    const auto m = tiny_model(1, bias);
    std::set<std::string> seen;
    for (const auto& layer : m.layers()) {
      for (const auto& p : layer.params) CHECK(seen.insert(p.name).second);
    }
    CHECK(seen.size() == m.params().size());
    const auto u = m.scope_params(LayerScope::kUnconditionalOnly);
    const auto c = m.scope_params(LayerScope::kConditionalOnly);
    CHECK(u.size() + c.size() == m.params().size());
    CHECK(m.parameter_count(LayerScope::kUnconditionalOnly) + m.parameter_count(LayerScope::kConditionalOnly) ==
          m.parameter_count());
    for (const auto& name : c) CHECK(name.find(".film.") != std::string::npos);
  }
}

TEST_CASE("model: forward matches the straight-line oracle") {
  for (bool bias : {false, true}) {
    const auto m = tiny_model(9, bias);
    const auto x = cerase::testing::random_images(5, 4);
    const std::vector<int> ts{1, 7, 25, 40, 50};
    const std::vector<Prompt> prompts{{{1}}, {{2, 7}}, {{0}}, {{4, 6, 6}}, {{3, 12, 20, 5}}};
    DenoiserEvaluator eval(m);
    const auto y = eval.predict(x, ts, prompts);
    CHECK(y.shape() == x.shape());
    const auto want = cerase::testing::reference_forward(m, x, ts, prompts);
    for (std::size_t r = 0; r < 5; ++r) {
      for (std::size_t k = 0; k < kImagePixels; ++k) CHECK(y.at(r, k) == doctest::Approx(want[r][k]).epsilon(1e-5));
    }
  }
}

TEST_CASE("denoise_loss: oracle plug and zero output") {
  auto m = tiny_model(2);
  for (auto& v : m.params().at("out.weight").values()) v = 0.f;
  for (auto& v : m.params().at("out.bias").values()) v = 0.f;
  const std::size_t n = 512;
  const auto x0 = cerase::testing::random_images(n, 8);
  std::vector<Prompt> prompts(n, Prompt{{1}});
  Rng rng(4);
  const auto batch = noise_batch(x0, prompts, m.schedule(), rng);
  // zero output: loss is the mean squared norm of the noise, near 64
  const double loss = denoise_loss(m, batch);
  double direct = 0.0;
  for (float e : batch.eps.values()) direct += double(e) * e;
  CHECK(loss == doctest::Approx(direct / n).epsilon(1e-6));
  CHECK(std::abs(loss - 64.0) < 4.0 * std::sqrt(2.0 * 64.0 / n));

  // the true noise as output: put eps into out.bias on a single-row batch
  const auto one = noise_batch(cerase::testing::random_images(1, 3), {Prompt{{2}}}, m.schedule(), rng);
  for (std::size_t k = 0; k < kImagePixels; ++k) m.params().at("out.bias")[k] = one.eps[k];
  CHECK(denoise_loss(m, one) == 0.0);
}

TEST_CASE("train_base: zero steps, determinism and a falling loss") {
  const auto data = cerase::testing::small_dataset();
  TrainConfig cfg;
  cfg.steps = 0;
  const auto init = train_base(data, tiny_config(), cfg);
  Rng root(cfg.seed);
  Rng init_rng = root.split("init");
  CHECK(init.model == DenoiserModel::initialize(tiny_config(), kConceptCount, init_rng));
  CHECK(init.loss_curve.empty());

  cfg.steps = 150;
  cfg.batch = 16;
  const auto a = train_base(data, tiny_config(), cfg);
  const auto b = train_base(data, tiny_config(), cfg);
  CHECK(a.model == b.model);
  CHECK(a.loss_curve == b.loss_curve);
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < 20; ++i) {
    head += a.loss_curve[i];
    tail += a.loss_curve[a.loss_curve.size() - 1 - i];
  }
  CHECK(tail < head);
}

namespace {

// Ancestral sampler that uses only one prediction per step.
ad::Tensor reference_sample(const DenoiserModel& m, const std::vector<Prompt>& prompts, const Rng& rng) {
  const auto& s = m.schedule();
  const std::size_t n = prompts.size();
  std::vector<Rng> streams;
  for (std::size_t i = 0; i < n; ++i) streams.push_back(rng.split(i));
  ad::Tensor x({n, kImagePixels});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < kImagePixels; ++k) x.at(i, k) = static_cast<float>(streams[i].normal());
  }
  DenoiserEvaluator eval(m);
  for (int t = s.steps(); t >= 1; --t) {
    const ad::Tensor eps = eval.predict(x, std::vector<int>(n, t), prompts);
    const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t - 1);
    const double beta = 1.0 - ab / ab_prev;
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < kImagePixels; ++k) {
        const double xt = x.at(i, k);
        const double x0 = std::clamp((xt - std::sqrt(1.0 - ab) * eps.at(i, k)) / std::sqrt(ab), -1.0, 1.0);
        double next = c0 * x0 + ct * xt;
        if (t > 1) next += sigma * streams[i].normal();
        x.at(i, k) = static_cast<float>(next);
      }
    }
  }
  for (auto& v : x.values()) v = std::clamp(v, -1.0f, 1.0f);
  return x;
}

}  // namespace

TEST_CASE("sample: guidance degenerations, determinism and range") {
  const auto m = tiny_model(6);
  const std::vector<Prompt> prompts{{{1, 8}}, {{3}}, {{2, 2, 11}}};
  const std::vector<Prompt> nulls(3, null_prompt());
  const Rng rng(12);
  // batched matmul may round differently from the reference's smaller batch
  const auto close = [](const ad::Tensor& a, const ad::Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, double(std::abs(a[i] - b[i])));
    return worst;
  };
  CHECK(close(sample(m, prompts, {.steps = 50, .guidance = 0.0}, rng), reference_sample(m, nulls, rng)) < 1e-4);
  CHECK(close(sample(m, prompts, {.steps = 50, .guidance = 1.0}, rng), reference_sample(m, prompts, rng)) < 1e-4);
  const auto guided = sample(m, prompts, {}, rng);
  CHECK(guided == sample(m, prompts, {}, rng));
  for (float v : guided.values()) {
    CHECK(v >= -1.f);
    CHECK(v <= 1.f);
  }
  CHECK_THROWS_AS(sample(m, prompts, {.steps = 51}, rng), std::invalid_argument);
  CHECK_THROWS_AS(sample(m, {Prompt{{1, 99}}}, {}, rng), std::invalid_argument);
}

TEST_CASE("sample: each row draws its own noise stream") {
  const auto m = tiny_model(6);
  const Rng rng(3);
  const auto both = sample(m, {Prompt{{1}}, Prompt{{2}}}, {}, rng);
  const auto first = sample(m, {Prompt{{1}}}, {}, rng);
  for (std::size_t k = 0; k < kImagePixels; ++k) CHECK(both.at(0, k) == doctest::Approx(first.at(0, k)).epsilon(1e-4));
}
