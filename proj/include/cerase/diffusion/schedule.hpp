#pragma once

#include <span>
#include <vector>

#include "cerase/autodiff/tensor.hpp"

namespace cerase::diffusion {

/// Linear-beta variance schedule. Timesteps are 1-based; alpha_bar(0) == 1.
class NoiseSchedule {
 public:
  NoiseSchedule(int steps, std::vector<double> betas);

  int steps() const { return steps_; }
  double beta(int t) const;
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const;
  const std::vector<double>& betas() const { return betas_; }

 private:
  int steps_;
  std::vector<double> betas_;       // betas_[t-1]
  std::vector<double> alpha_bars_;  // alpha_bars_[t], alpha_bars_[0] = 1
};

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end);

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, for 0 <= t <= T.
ad::Tensor q_sample(const ad::Tensor& x0, int t, const ad::Tensor& eps, const NoiseSchedule& schedule);

/// Row-wise variant: row r of x0 is noised to timestep timesteps[r].
ad::Tensor q_sample_rows(const ad::Tensor& x0, std::span<const int> timesteps, const ad::Tensor& eps,
                         const NoiseSchedule& schedule);

}  // namespace cerase::diffusion
