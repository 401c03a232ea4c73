#pragma once

#include <array>
#include <string>
#include <vector>

#include "cerase/erasing/erasing.hpp"
#include "cerase/pruning/mask.hpp"

namespace cerase::pruning {

inline constexpr std::size_t kHistogramBins = 20;

struct PruneReport {
  double pruned_ratio = 0.0;
  std::size_t pruned_count = 0;
  std::size_t mask_size = 0;
  std::vector<std::pair<std::string, std::size_t>> pruned_per_layer;
  std::vector<double> loss_curve;
  /// Soft mask values at the end of optimization, binned uniformly over [0, 1].
  std::array<std::size_t, kHistogramBins> histogram{};
  /// Fraction of soft values strictly inside (0.05, 0.95).
  double undecided_fraction = 0.0;
  /// Erase loss of the soft and of the hard mask on a fixed evaluation set.
  double soft_loss = 0.0;
  double hard_loss = 0.0;
};

struct PruneResult {
  ParamMask mask;
  PruneReport report;
};

/// Fixed evaluation batches used to compare masks on the erase loss.
std::vector<erasing::EraseBatch> evaluation_batches(const DenoiserModel& frozen, const diffusion::ConceptDataset& data,
                                                    const erasing::EraseObjective& objective, std::size_t count,
                                                    std::size_t batch, std::uint64_t seed);
double mean_erase_loss(const diffusion::ModelRef& model, const erasing::EraseObjective& objective,
                       const std::vector<erasing::EraseBatch>& batches);

/// Optimizes mask logits on the erase loss of theta* masked by the soft mask,
/// then thresholds. theta* is never modified. Throws std::invalid_argument for
/// an empty scope and std::runtime_error when the loss becomes non-finite.
PruneResult prune_erase(const DenoiserModel& frozen, const diffusion::ConceptDataset& data,
                        const erasing::EraseObjective& objective, const erasing::EraseRunConfig& config);

/// Zeroes the `ratio` fraction of in-scope parameters with the smallest
/// magnitude, ranked globally. Ties prune the earlier parameter first.
ParamMask magnitude_prune(const DenoiserModel& model, LayerScope scope, double ratio);

struct PrunedFinetune {
  DenoiserModel model;
  ParamMask mask;
  std::vector<double> loss_curve;
};

/// Magnitude-prunes theta*, then fine-tunes the surviving parameters.
PrunedFinetune preprune_erase(const DenoiserModel& frozen, const diffusion::ConceptDataset& data, double ratio,
                              const erasing::EraseObjective& objective, const erasing::EraseRunConfig& config);

/// Fine-tunes, then magnitude-prunes the result.
PrunedFinetune postprune_erase(const DenoiserModel& frozen, const diffusion::ConceptDataset& data,
                               const erasing::EraseObjective& objective, const erasing::EraseRunConfig& config,
                               double ratio);

struct Neuron {
  std::size_t block = 0;
  std::size_t channel = 0;
  friend bool operator==(const Neuron&, const Neuron&) = default;
  friend auto operator<=>(const Neuron&, const Neuron&) = default;
};

/// Channel mask that zeroes the listed post-activation channels. Throws
/// std::invalid_argument for a block or channel outside the model.
diffusion::ChannelMask neuron_mask(const DenoiserModel& model, const std::vector<Neuron>& neurons);
diffusion::ModelRef neuron_prune(const DenoiserModel& erased, const std::vector<Neuron>& neurons);

}  // namespace cerase::pruning
