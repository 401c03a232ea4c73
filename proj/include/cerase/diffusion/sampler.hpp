#pragma once

#include <vector>

#include "cerase/autodiff/rng.hpp"
#include "cerase/diffusion/denoiser.hpp"

namespace cerase::diffusion {

struct SamplerConfig {
  int steps = 50;
  double guidance = 3.0;
};

/// Ancestral sampling with classifier-free guidance
///   eps_hat = (1 - w) eps(c_null) + w eps(c),
/// which is eps(c_null) + w (eps(c) - eps(c_null)) and reduces exactly to the
/// unconditional / conditional prediction at w = 0 / w = 1. Row i draws all of
/// its noise from rng.split(i), so a row's noise does not depend on batch composition.
/// Output rows are clipped to [-1, 1].
ad::Tensor sample(const ModelRef& model, const Conditioning& cond, const SamplerConfig& config, const Rng& rng);
ad::Tensor sample(const ModelRef& model, const std::vector<Prompt>& prompts, const SamplerConfig& config,
                  const Rng& rng);

}  // namespace cerase::diffusion
