#include "cerase/autodiff/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace cerase::ad {

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  if (name == "adamw") return OptimizerKind::kAdamW;
  throw std::invalid_argument("unknown optimizer '" + name + "' (expected sgd, adam or adamw)");
}

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::kSgd: return "sgd";
    case OptimizerKind::kAdam: return "adam";
    case OptimizerKind::kAdamW: return "adamw";
  }
  return "?";
}

Optimizer::Optimizer(OptimizerConfig config) : config_(config) {
  if (!(config_.learning_rate > 0.0)) throw std::invalid_argument("optimizer: learning rate must be positive");
  if (config_.weight_decay < 0.0) throw std::invalid_argument("optimizer: weight decay must be non-negative");
}

void Optimizer::step(NamedTensors<float>& params, const NamedTensors<float>& grads) {
  ++iteration_;
  const double lr = config_.learning_rate;
  const double wd = config_.weight_decay;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double bias1 = 1.0 - std::pow(b1, static_cast<double>(iteration_));
  const double bias2 = 1.0 - std::pow(b2, static_cast<double>(iteration_));

  for (const auto& [name, grad] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("optimizer: gradient for unknown parameter '" + name + "'");
    Tensor& p = it->second;
    if (p.shape() != grad.shape()) {
      throw std::invalid_argument("optimizer: shape mismatch for '" + name + "': param " +
                                  shape_string(p.shape()) + " vs grad " + shape_string(grad.shape()));
    }
    if (config_.kind == OptimizerKind::kSgd) {
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double g = grad[k] + wd * p[k];
        p[k] = static_cast<float>(p[k] - lr * g);
      }
      continue;
    }
    auto& st = state_[name];
    if (st.first.size() != p.size()) {
      st.first.assign(p.size(), 0.0);
      st.second.assign(p.size(), 0.0);
    }
    const bool decoupled = config_.kind == OptimizerKind::kAdamW;
    for (std::size_t k = 0; k < p.size(); ++k) {
      double value = p[k];
      double g = grad[k];
      if (decoupled) {
        value -= lr * wd * value;
      } else {
        g += wd * value;
      }
      st.first[k] = b1 * st.first[k] + (1.0 - b1) * g;
      st.second[k] = b2 * st.second[k] + (1.0 - b2) * g * g;
      const double mhat = st.first[k] / bias1;
      const double vhat = st.second[k] / bias2;
      value -= lr * mhat / (std::sqrt(vhat) + config_.epsilon);
      p[k] = static_cast<float>(value);
    }
  }
}

}  // namespace cerase::ad
