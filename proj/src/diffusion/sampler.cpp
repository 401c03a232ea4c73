#include "cerase/diffusion/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cerase/diffusion/dataset.hpp"

namespace cerase::diffusion {

namespace {

std::vector<int> respaced_timesteps(int steps, int T) {
  std::vector<int> taus;
  for (int i = steps; i >= 1; --i) {
    taus.push_back(static_cast<int>(std::lround(static_cast<double>(i) * T / steps)));
  }
  return taus;
}

}  // namespace

ad::Tensor sample(const ModelRef& ref, const Conditioning& cond, const SamplerConfig& config, const Rng& rng) {
  const DenoiserModel& model = ref.model();
  const NoiseSchedule& sched = model.schedule();
  if (config.steps < 1 || config.steps > sched.steps()) {
    throw std::invalid_argument("sample: steps must lie in [1, T]");
  }
  const std::size_t n = cond.rows();
  if (n == 0) return ad::Tensor({0, kImagePixels});

  // Stack conditional rows over null rows for a single forward per step.
  std::vector<Prompt> nulls(n, null_prompt());
  Conditioning both;
  both.bag = ad::Tensor({2 * n, kVocabSize});
  std::copy(cond.bag.values().begin(), cond.bag.values().end(), both.bag.values().begin());
  const ad::Tensor null_bag = pooling_matrix(nulls, model.vocab());
  std::copy(null_bag.values().begin(), null_bag.values().end(), both.bag.values().begin() + static_cast<std::ptrdiff_t>(n * kVocabSize));
  if (cond.offset.size() != 0) {
    both.offset = ad::Tensor({2 * n, kEmbeddingDim});
    std::copy(cond.offset.values().begin(), cond.offset.values().end(), both.offset.values().begin());
  }

  std::vector<Rng> streams;
  streams.reserve(n);
  for (std::size_t i = 0; i < n; ++i) streams.push_back(rng.split(i));

  ad::Tensor x({n, kImagePixels});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < kImagePixels; ++k) x.at(i, k) = static_cast<float>(streams[i].normal());
  }

  DenoiserEvaluator eval(ref);
  const float w = static_cast<float>(config.guidance);
  const auto taus = respaced_timesteps(config.steps, sched.steps());
  ad::Tensor stacked({2 * n, kImagePixels});
  for (std::size_t s = 0; s < taus.size(); ++s) {
    const int t = taus[s];
    const int prev = s + 1 < taus.size() ? taus[s + 1] : 0;
    std::copy(x.values().begin(), x.values().end(), stacked.values().begin());
    std::copy(x.values().begin(), x.values().end(), stacked.values().begin() + static_cast<std::ptrdiff_t>(n * kImagePixels));
    const std::vector<int> ts(2 * n, t);
    const ad::Tensor eps = eval.predict(stacked, ts, both);

    const double ab = sched.alpha_bar(t);
    const double ab_prev = sched.alpha_bar(prev);
    const double beta = 1.0 - ab / ab_prev;
    const double alpha = 1.0 - beta;
    const double coef_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double coef_xt = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
    const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < kImagePixels; ++k) {
        const float e_c = eps.at(i, k);
        const float e_u = eps.at(n + i, k);
        const float e_hat = (1.0f - w) * e_u + w * e_c;
        const double xt = x.at(i, k);
        const double x0 = std::clamp((xt - std::sqrt(1.0 - ab) * e_hat) / std::sqrt(ab), -1.0, 1.0);
        double next = coef_x0 * x0 + coef_xt * xt;
        if (prev > 0) next += sigma * streams[i].normal();
        x.at(i, k) = static_cast<float>(next);
      }
    }
  }
  for (auto& v : x.values()) v = std::clamp(v, -1.0f, 1.0f);
  return x;
}

ad::Tensor sample(const ModelRef& model, const std::vector<Prompt>& prompts, const SamplerConfig& config,
                  const Rng& rng) {
  return sample(model, Conditioning::from_prompts(prompts, model.model().vocab()), config, rng);
}

}  // namespace cerase::diffusion
