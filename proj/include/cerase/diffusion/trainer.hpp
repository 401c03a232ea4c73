#pragma once

#include <cstdint>
#include <vector>

#include "cerase/autodiff/optimizer.hpp"
#include "cerase/diffusion/dataset.hpp"
#include "cerase/diffusion/denoiser.hpp"

namespace cerase::diffusion {

struct TrainConfig {
  std::size_t steps = 5000;
  std::size_t batch = 64;
  ad::OptimizerConfig optimizer{.kind = ad::OptimizerKind::kAdamW, .learning_rate = 2e-3, .weight_decay = 0.0};
  /// Fraction of each batch drawn from background images with the null prompt.
  double background_fraction = 0.2;
  /// Probability that a concept row is trained with the null prompt.
  double null_dropout = 0.1;
  std::size_t max_fillers = 3;
  /// Token embeddings are learned jointly with the denoiser.
  bool train_embeddings = true;
  /// Cosine decay of the learning rate down to this fraction of its start.
  double final_lr_fraction = 0.05;
  std::uint64_t seed = 7;
};

struct TrainResult {
  DenoiserModel model;
  std::vector<double> loss_curve;
};

/// One noised training batch. Row r carries x0, noise, timestep and prompt.
struct NoisedBatch {
  ad::Tensor x0;
  ad::Tensor eps;
  ad::Tensor xt;
  std::vector<int> timesteps;
  std::vector<Prompt> prompts;
};

/// Draws t uniform in [1, T] and standard normal noise for every row.
NoisedBatch noise_batch(const ad::Tensor& x0, std::vector<Prompt> prompts, const NoiseSchedule& schedule, Rng& rng);

/// Mean over the batch of ||eps_theta(x_t, c, t) - eps||^2.
double denoise_loss(const ModelRef& model, const ad::Tensor& x0, const std::vector<Prompt>& prompts, Rng& rng);
double denoise_loss(const ModelRef& model, const NoisedBatch& batch);

/// Samples training rows: background + null prompt with the configured
/// probability, otherwise a concept image with its concept prompt.
NoisedBatch sample_training_batch(const ConceptDataset& data, const Vocabulary& vocab, const TrainConfig& cfg,
                                  const NoiseSchedule& schedule, Rng& rng);

/// Trains eps_theta (and the token embeddings) on the denoising objective.
/// Throws std::runtime_error if the loss becomes non-finite.
TrainResult train_base(const ConceptDataset& data, const ModelConfig& model_config, const TrainConfig& cfg);

}  // namespace cerase::diffusion
