#include "cerase/diffusion/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace cerase::diffusion {

NoiseSchedule::NoiseSchedule(int steps, std::vector<double> betas) : steps_(steps), betas_(std::move(betas)) {
  if (steps_ < 2) throw std::invalid_argument("schedule: need at least 2 steps, got " + std::to_string(steps_));
  if (static_cast<int>(betas_.size()) != steps_) throw std::invalid_argument("schedule: beta count != steps");
  alpha_bars_.assign(static_cast<std::size_t>(steps_) + 1, 1.0);
  for (int t = 1; t <= steps_; ++t) {
    const double b = betas_[static_cast<std::size_t>(t - 1)];
    if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("schedule: beta must lie in (0, 1)");
    alpha_bars_[static_cast<std::size_t>(t)] = alpha_bars_[static_cast<std::size_t>(t - 1)] * (1.0 - b);
  }
}

double NoiseSchedule::beta(int t) const {
  if (t < 1 || t > steps_) throw std::out_of_range("schedule: timestep " + std::to_string(t) + " out of [1, T]");
  return betas_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > steps_) throw std::out_of_range("schedule: timestep " + std::to_string(t) + " out of [0, T]");
  return alpha_bars_[static_cast<std::size_t>(t)];
}

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  if (steps < 2) throw std::invalid_argument("make_schedule: need at least 2 steps");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * i / (steps - 1);
  }
  return NoiseSchedule(steps, std::move(betas));
}

ad::Tensor q_sample(const ad::Tensor& x0, int t, const ad::Tensor& eps, const NoiseSchedule& schedule) {
  if (x0.shape() != eps.shape()) {
    throw std::invalid_argument("q_sample: eps shape " + ad::shape_string(eps.shape()) + " != x0 shape " +
                                ad::shape_string(x0.shape()));
  }
  const double ab = schedule.alpha_bar(t);
  const double a = std::sqrt(ab);
  const double s = std::sqrt(1.0 - ab);
  ad::Tensor out(x0.shape());
  for (std::size_t k = 0; k < x0.size(); ++k) out[k] = static_cast<float>(a * x0[k] + s * eps[k]);
  return out;
}

ad::Tensor q_sample_rows(const ad::Tensor& x0, std::span<const int> timesteps, const ad::Tensor& eps,
                         const NoiseSchedule& schedule) {
  if (x0.shape() != eps.shape()) throw std::invalid_argument("q_sample_rows: eps shape != x0 shape");
  if (x0.rows() != timesteps.size()) throw std::invalid_argument("q_sample_rows: one timestep per row required");
  ad::Tensor out(x0.shape());
  const std::size_t cols = x0.cols();
  for (std::size_t r = 0; r < x0.rows(); ++r) {
    const double ab = schedule.alpha_bar(timesteps[r]);
    const double a = std::sqrt(ab);
    const double s = std::sqrt(1.0 - ab);
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t k = r * cols + c;
      out[k] = static_cast<float>(a * x0[k] + s * eps[k]);
    }
  }
  return out;
}

}  // namespace cerase::diffusion
