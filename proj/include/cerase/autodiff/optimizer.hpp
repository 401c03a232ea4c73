#pragma once

#include <map>
#include <string>

#include "cerase/autodiff/session.hpp"
#include "cerase/autodiff/tensor.hpp"

namespace cerase::ad {

enum class OptimizerKind { kSgd, kAdam, kAdamW };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdamW;
  double learning_rate = 1e-3;
  /// Coupled L2 term for sgd/adam, decoupled decay for adamw.
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

OptimizerKind parse_optimizer_kind(const std::string& name);
std::string to_string(OptimizerKind kind);

/// First-order optimizer with per-parameter moment state keyed by name.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config);

  /// Updates every parameter that has a gradient entry. Parameters without a
  /// gradient are left untouched.
  void step(NamedTensors<float>& params, const NamedTensors<float>& grads);

  const OptimizerConfig& config() const { return config_; }
  std::size_t iterations() const { return iteration_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }

 private:
  struct Moments {
    std::vector<double> first;
    std::vector<double> second;
  };

  OptimizerConfig config_;
  std::map<std::string, Moments, std::less<>> state_;
  std::size_t iteration_ = 0;
};

}  // namespace cerase::ad
