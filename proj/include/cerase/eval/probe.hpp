#pragma once

#include <cstdint>
#include <vector>

#include "cerase/autodiff/session.hpp"
#include "cerase/diffusion/dataset.hpp"

namespace cerase::eval {

struct ProbeConfig {
  std::size_t steps = 1500;
  std::size_t batch = 64;
  double learning_rate = 3e-3;
  /// Std of Gaussian pixel noise added to training images.
  double augment_noise = 0.1;
  /// Held-out accuracy required before the classifier may be used.
  double gate = 0.97;
  std::uint64_t seed = 11;
};

/// Small dense classifier over 8x8 images: 64 -> 64 -> 32 -> 5 classes (four
/// concepts plus background). The 32-wide penultimate layer serves as the
/// feature space for the Frechet quality proxy.
class ProbeClassifier {
 public:
  static constexpr std::size_t kFeatureDim = 32;
  static constexpr std::size_t kHidden = 64;

  ProbeClassifier() = default;
  explicit ProbeClassifier(ad::NamedTensors<float> params);

  ad::Tensor logits(const ad::Tensor& images) const;
  ad::Tensor features(const ad::Tensor& images) const;
  std::vector<int> predict(const ad::Tensor& images) const;
  double accuracy(const ad::Tensor& images, const std::vector<int>& labels) const;

  const ad::NamedTensors<float>& params() const { return params_; }
  double heldout_accuracy() const { return heldout_accuracy_; }
  void set_heldout_accuracy(double a) { heldout_accuracy_ = a; }

 private:
  ad::NamedTensors<float> params_;
  double heldout_accuracy_ = 0.0;
};

/// Trains on the clean train split and checks the held-out gate; throws
/// std::runtime_error when the gate is unmet.
ProbeClassifier train_probe(const diffusion::ConceptDataset& data, const ProbeConfig& config = {});

}  // namespace cerase::eval
