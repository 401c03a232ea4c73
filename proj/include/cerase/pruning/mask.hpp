#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cerase/diffusion/denoiser.hpp"
#include "cerase/erasing/erasing.hpp"

namespace cerase::pruning {

namespace ad = cerase::ad;
using diffusion::DenoiserModel;
using diffusion::LayerScope;

/// Mask state of one in-scope parameter tensor.
struct MaskEntry {
  std::string layer;
  std::string param;
  ad::Shape shape;
  ad::Tensor logits;               // empty for masks without a soft relaxation
  std::vector<std::uint8_t> hard;  // empty until discretized
};

/// Per-parameter keep mask over the parameters of a set of layers.
class ParamMask {
 public:
  ParamMask() = default;

  /// Logits initialized to `init_logit`, no hard bits yet.
  static ParamMask with_logits(const DenoiserModel& model, LayerScope scope, double init_logit = 1.0,
                               double temperature = 10.0, double threshold = 0.5);
  /// Hard mask with every bit set, no logits.
  static ParamMask all_ones(const DenoiserModel& model, LayerScope scope);

  const std::vector<MaskEntry>& entries() const { return entries_; }
  std::vector<MaskEntry>& entries() { return entries_; }
  const MaskEntry* find(const std::string& param) const;
  /// Layer names covered by the mask, in forward order.
  std::vector<std::string> layers() const;

  double temperature() const { return temperature_; }
  double threshold() const { return threshold_; }
  void set_temperature(double t);
  void set_threshold(double s);

  bool has_logits() const;
  bool has_hard() const;

  /// Number of masked parameters p.
  std::size_t size() const;
  std::size_t pruned_count() const;
  double pruned_ratio() const;
  /// (layer, pruned count) in forward order; counts sum to pruned_count().
  std::vector<std::pair<std::string, std::size_t>> pruned_per_layer() const;

  /// hard = soft_mask(logits) > threshold.
  void discretize();

  /// Throws std::invalid_argument unless every entry names a parameter of
  /// `model` with the recorded shape and layer.
  void check_compatible(const DenoiserModel& model) const;

  friend bool operator==(const ParamMask& a, const ParamMask& b);

 private:
  std::vector<MaskEntry> entries_;
  double temperature_ = 10.0;
  double threshold_ = 0.5;
};

/// 1 / (1 + exp(-temperature * m)). Throws std::invalid_argument for
/// temperature <= 0.
double soft_mask(double m, double temperature);
std::vector<double> soft_mask(std::span<const float> m, double temperature);

/// value > sigma -> 1, otherwise 0. Throws unless sigma lies in (0, 1).
std::vector<std::uint8_t> discretize(std::span<const double> soft, double sigma);

enum class MaskMode { kSoft, kHard };

/// Copy of `base` with in-scope parameters multiplied by the mask values.
DenoiserModel apply_mask(const DenoiserModel& base, const ParamMask& mask, MaskMode mode = MaskMode::kHard);

/// Prediction of theta* masked by `mask`.
ad::Tensor masked_forward(const DenoiserModel& base, const ParamMask& mask, MaskMode mode, const ad::Tensor& xt,
                          std::span<const int> timesteps, const diffusion::Conditioning& cond);

/// Keep bits of a hard mask, keyed by parameter name.
erasing::KeepBits keep_bits(const ParamMask& mask);

}  // namespace cerase::pruning
