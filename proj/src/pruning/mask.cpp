#include "cerase/pruning/mask.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cerase::pruning {

namespace {

void check_temperature(double t) {
  if (!(t > 0.0)) throw std::invalid_argument("soft mask temperature must be > 0");
}

void check_threshold(double s) {
  if (!(s > 0.0 && s < 1.0)) throw std::invalid_argument("mask threshold must lie in (0, 1)");
}

std::vector<MaskEntry> scope_entries(const DenoiserModel& model, LayerScope scope) {
  std::vector<MaskEntry> entries;
  for (const auto& layer : model.layers()) {
    if (!diffusion::in_scope(layer.kind, scope)) continue;
    for (const auto& p : layer.params) entries.push_back({layer.name, p.name, p.shape, {}, {}});
  }
  if (entries.empty()) throw std::invalid_argument("mask: layer scope selects no parameters");
  return entries;
}

}  // namespace

double soft_mask(double m, double temperature) {
  check_temperature(temperature);
  return 1.0 / (1.0 + std::exp(-temperature * m));
}

std::vector<double> soft_mask(std::span<const float> m, double temperature) {
  check_temperature(temperature);
  std::vector<double> out(m.size());
  for (std::size_t k = 0; k < m.size(); ++k) out[k] = soft_mask(m[k], temperature);
  return out;
}

std::vector<std::uint8_t> discretize(std::span<const double> soft, double sigma) {
  check_threshold(sigma);
  std::vector<std::uint8_t> bits(soft.size());
  for (std::size_t k = 0; k < soft.size(); ++k) bits[k] = soft[k] > sigma ? 1 : 0;
  return bits;
}

ParamMask ParamMask::with_logits(const DenoiserModel& model, LayerScope scope, double init_logit, double temperature,
                                 double threshold) {
  ParamMask mask;
  mask.set_temperature(temperature);
  mask.set_threshold(threshold);
  mask.entries_ = scope_entries(model, scope);
  for (auto& e : mask.entries_) {
    e.logits = ad::Tensor(e.shape);
    std::fill(e.logits.values().begin(), e.logits.values().end(), static_cast<float>(init_logit));
  }
  return mask;
}

ParamMask ParamMask::all_ones(const DenoiserModel& model, LayerScope scope) {
  ParamMask mask;
  mask.entries_ = scope_entries(model, scope);
  for (auto& e : mask.entries_) e.hard.assign(ad::numel(e.shape), 1);
  return mask;
}

const MaskEntry* ParamMask::find(const std::string& param) const {
  for (const auto& e : entries_) {
    if (e.param == param) return &e;
  }
  return nullptr;
}

std::vector<std::string> ParamMask::layers() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) {
    if (out.empty() || out.back() != e.layer) out.push_back(e.layer);
  }
  return out;
}

void ParamMask::set_temperature(double t) {
  check_temperature(t);
  temperature_ = t;
}

void ParamMask::set_threshold(double s) {
  check_threshold(s);
  threshold_ = s;
}

bool ParamMask::has_logits() const {
  return !entries_.empty() && std::all_of(entries_.begin(), entries_.end(), [](const MaskEntry& e) {
    return e.logits.size() == ad::numel(e.shape) && !e.logits.shape().empty();
  });
}

bool ParamMask::has_hard() const {
  return !entries_.empty() && std::all_of(entries_.begin(), entries_.end(), [](const MaskEntry& e) {
    return e.hard.size() == ad::numel(e.shape);
  });
}

std::size_t ParamMask::size() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += ad::numel(e.shape);
  return n;
}

std::size_t ParamMask::pruned_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += static_cast<std::size_t>(std::count(e.hard.begin(), e.hard.end(), 0));
  return n;
}

double ParamMask::pruned_ratio() const {
  const std::size_t p = size();
  return p == 0 ? 0.0 : static_cast<double>(pruned_count()) / static_cast<double>(p);
}

std::vector<std::pair<std::string, std::size_t>> ParamMask::pruned_per_layer() const {
  std::vector<std::pair<std::string, std::size_t>> out;
  for (const auto& e : entries_) {
    if (out.empty() || out.back().first != e.layer) out.emplace_back(e.layer, 0);
    out.back().second += static_cast<std::size_t>(std::count(e.hard.begin(), e.hard.end(), 0));
  }
  return out;
}

void ParamMask::discretize() {
  if (!has_logits()) throw std::logic_error("discretize: mask has no logits");
  for (auto& e : entries_) e.hard = pruning::discretize(soft_mask(e.logits.values(), temperature_), threshold_);
}

void ParamMask::check_compatible(const DenoiserModel& model) const {
  for (const auto& e : entries_) {
    auto it = model.params().find(e.param);
    if (it == model.params().end()) throw std::invalid_argument("mask: parameter '" + e.param + "' not in model");
    if (it->second.shape() != e.shape) {
      throw std::invalid_argument("mask: parameter '" + e.param + "' has shape " +
                                  ad::shape_string(it->second.shape()) + " in the model, " +
                                  ad::shape_string(e.shape) + " in the mask");
    }
    const std::string owner = e.param.substr(0, e.param.rfind('.'));
    if (owner != e.layer) throw std::invalid_argument("mask: parameter '" + e.param + "' is not in layer " + e.layer);
    model.layer(e.layer);
  }
}

bool operator==(const ParamMask& a, const ParamMask& b) {
  if (a.temperature_ != b.temperature_ || a.threshold_ != b.threshold_) return false;
  if (a.entries_.size() != b.entries_.size()) return false;
  for (std::size_t i = 0; i < a.entries_.size(); ++i) {
    const auto& x = a.entries_[i];
    const auto& y = b.entries_[i];
    if (x.layer != y.layer || x.param != y.param || x.shape != y.shape || x.hard != y.hard) return false;
    if (!ad::bitwise_equal(x.logits, y.logits)) return false;
  }
  return true;
}

DenoiserModel apply_mask(const DenoiserModel& base, const ParamMask& mask, MaskMode mode) {
  mask.check_compatible(base);
  if (mode == MaskMode::kHard && !mask.has_hard()) throw std::invalid_argument("apply_mask: mask has no hard bits");
  if (mode == MaskMode::kSoft && !mask.has_logits()) throw std::invalid_argument("apply_mask: mask has no logits");
  DenoiserModel out = base;
  for (const auto& e : mask.entries()) {
    ad::Tensor& w = out.params().at(e.param);
    if (mode == MaskMode::kHard) {
      for (std::size_t k = 0; k < w.size(); ++k) w[k] = w[k] * static_cast<float>(e.hard[k]);
    } else {
      const std::vector<double> s = soft_mask(e.logits.values(), mask.temperature());
      for (std::size_t k = 0; k < w.size(); ++k) w[k] = w[k] * static_cast<float>(s[k]);
    }
  }
  return out;
}

ad::Tensor masked_forward(const DenoiserModel& base, const ParamMask& mask, MaskMode mode, const ad::Tensor& xt,
                          std::span<const int> timesteps, const diffusion::Conditioning& cond) {
  const DenoiserModel masked = apply_mask(base, mask, mode);
  diffusion::DenoiserEvaluator eval(masked);
  return eval.predict(xt, timesteps, cond);
}

erasing::KeepBits keep_bits(const ParamMask& mask) {
  if (!mask.has_hard()) throw std::invalid_argument("keep_bits: mask has no hard bits");
  erasing::KeepBits bits;
  for (const auto& e : mask.entries()) bits.emplace(e.param, e.hard);
  return bits;
}

}  // namespace cerase::pruning
