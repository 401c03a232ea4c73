#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cerase/diffusion/denoiser.hpp"
#include "cerase/diffusion/schedule.hpp"
#include "cerase/pruning/mask.hpp"

namespace cerase::analysis {

using diffusion::Conditioning;
using diffusion::ModelRef;

/// ||a*||_1 - ||a~||_1 for one neuron plane.
double correlation_term(std::span<const double> original, std::span<const double> erased);
/// ||a - b||_1 for one neuron plane.
double sensitivity_term(std::span<const double> a, std::span<const double> b);

struct ProbeOptions {
  std::vector<int> timesteps{5, 15, 25, 35, 45};
  /// x_t draws per prompt and timestep.
  std::size_t samples = 8;
  std::size_t threads = 1;
};

/// Per-sample L1 norms of every block channel (post-SiLU). A channel of the
/// dense blocks is a 1x1 plane, so its norm is |z|.
class ActivationTrace {
 public:
  ActivationTrace(std::vector<int> timesteps, std::size_t blocks, std::size_t channels, std::size_t records,
                  std::uint64_t inputs_digest);

  const std::vector<int>& timesteps() const { return timesteps_; }
  std::size_t blocks() const { return blocks_; }
  std::size_t channels() const { return channels_; }
  /// prompts * samples
  std::size_t records() const { return records_; }
  /// Identifies prompts, timesteps and x_t draws; traces compare only when equal.
  std::uint64_t inputs_digest() const { return digest_; }

  double norm(std::size_t ti, std::size_t block, std::size_t record, std::size_t channel) const {
    return norms_[index(ti, block, record, channel)];
  }
  double& norm(std::size_t ti, std::size_t block, std::size_t record, std::size_t channel) {
    return norms_[index(ti, block, record, channel)];
  }

  friend bool operator==(const ActivationTrace&, const ActivationTrace&) = default;

 private:
  std::size_t index(std::size_t ti, std::size_t b, std::size_t r, std::size_t c) const {
    return ((ti * blocks_ + b) * records_ + r) * channels_ + c;
  }
  std::vector<int> timesteps_;
  std::size_t blocks_, channels_, records_;
  std::uint64_t digest_;
  std::vector<double> norms_;
};

/// x_t for prompt p at timestep t is q_sample of rows drawn from `x0_pool`
/// with rng.split(p).split(t), independent of the model, so two models
/// given the same rng see identical inputs.
ActivationTrace capture_activations(const ModelRef& model, const std::vector<Conditioning>& prompts,
                                    const ad::Tensor& x0_pool, const ProbeOptions& options, const Rng& rng);
ActivationTrace capture_activations(const ModelRef& model, const std::vector<diffusion::Prompt>& prompts,
                                    const ad::Tensor& x0_pool, const ProbeOptions& options, const Rng& rng);

/// Per (timestep, block, channel) values.
class ScoreGrid {
 public:
  ScoreGrid() = default;
  ScoreGrid(std::vector<int> timesteps, std::size_t blocks, std::size_t channels);

  const std::vector<int>& timesteps() const { return timesteps_; }
  std::size_t blocks() const { return blocks_; }
  std::size_t channels() const { return channels_; }
  double at(std::size_t ti, std::size_t b, std::size_t c) const { return values_[(ti * blocks_ + b) * channels_ + c]; }
  double& at(std::size_t ti, std::size_t b, std::size_t c) { return values_[(ti * blocks_ + b) * channels_ + c]; }
  const std::vector<double>& values() const { return values_; }
  bool same_keys(const ScoreGrid& other) const;

 private:
  std::vector<int> timesteps_;
  std::size_t blocks_ = 0, channels_ = 0;
  std::vector<double> values_;
};

/// rho = mean over records of (||z*|| - ||z~||). Throws std::invalid_argument
/// when the traces were not captured on identical inputs.
ScoreGrid concept_correlation(const ActivationTrace& original, const ActivationTrace& erased);

/// Flagged channels per block, ascending.
struct ConceptNeurons {
  std::vector<std::vector<std::size_t>> channels;
  bool contains(std::size_t block, std::size_t channel) const;
  std::size_t count() const;
};

/// Top-k channels per block by rho averaged over timesteps; ties go to the
/// lower channel index.
ConceptNeurons identify_concept_neurons(const ScoreGrid& rho, std::size_t k);

/// A prompt and its adversarial counterpart, one row each.
struct PromptPair {
  Conditioning original;
  Conditioning adversarial;
};

/// delta = mean over pairs and x_t draws of ||z~(c) - z~(c_adv)||; both
/// members of a pair see the same x_t.
ScoreGrid sensitivity(const ModelRef& model, const std::vector<PromptPair>& pairs, const ad::Tensor& x0_pool,
                      const ProbeOptions& options, const Rng& rng);

struct SensitivitySummary {
  std::vector<int> timesteps;
  std::vector<double> concept_mean;
  std::vector<double> other_mean;
};

SensitivitySummary sensitivity_report(const ScoreGrid& delta, const ConceptNeurons& neurons);

/// Rows: model,timestep,concept_mean,other_mean
std::string sensitivity_csv(const std::vector<std::pair<std::string, SensitivitySummary>>& models);

struct WeightDistribution {
  std::size_t total_pruned = 0;
  /// Per layer share of all pruned weights in percent; empty when nothing
  /// was pruned.
  std::vector<std::pair<std::string, double>> percent;
  bool empty() const { return total_pruned == 0; }
};

WeightDistribution pruned_weight_distribution(const pruning::ParamMask& mask);

/// Columns layer,channel,timestep,rho,delta,is_concept. Either grid may be
/// null; its column is then left blank.
std::string score_table_csv(const ScoreGrid* rho, const ScoreGrid* delta, const ConceptNeurons& neurons);

}  // namespace cerase::analysis
