#include "cerase/pruning/prune.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

namespace cerase::pruning {

namespace {

std::string logit_name(const std::string& param) { return "mask." + param; }

}  // namespace

std::vector<erasing::EraseBatch> evaluation_batches(const DenoiserModel& frozen, const diffusion::ConceptDataset& data,
                                                    const erasing::EraseObjective& objective, std::size_t count,
                                                    std::size_t batch, std::uint64_t seed) {
  Rng rng = Rng(seed).split("erase-eval");
  std::vector<erasing::EraseBatch> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(erasing::draw_erase_batch(frozen, data, objective, batch, 3, rng));
  }
  return out;
}

double mean_erase_loss(const diffusion::ModelRef& model, const erasing::EraseObjective& objective,
                       const std::vector<erasing::EraseBatch>& batches) {
  if (batches.empty()) throw std::invalid_argument("mean_erase_loss: no batches");
  double acc = 0.0;
  for (const auto& b : batches) acc += erasing::erase_loss(model, objective, b);
  return acc / static_cast<double>(batches.size());
}

PruneResult prune_erase(const DenoiserModel& frozen, const diffusion::ConceptDataset& data,
                        const erasing::EraseObjective& objective, const erasing::EraseRunConfig& config) {
  objective.validate(frozen.vocab().concept_count());
  PruneResult result{ParamMask::with_logits(frozen, config.scope, 1.0, config.temperature, config.threshold), {}};
  ParamMask& mask = result.mask;

  std::map<std::string, ad::NodeId> masked_nodes;
  const double temperature = config.temperature;
  erasing::EraseLossGraph elg(frozen.config(), objective, [&](ad::Graph& g, const std::string& name) {
    if (auto it = masked_nodes.find(name); it != masked_nodes.end()) return it->second;
    const ad::NodeId w = g.has_leaf(name) ? g.leaf(name) : g.input(name);
    if (!mask.find(name)) return w;
    const ad::NodeId keep = g.sigmoid(g.scale(g.param(logit_name(name)), temperature));
    return masked_nodes[name] = g.mul(w, keep);
  });

  ad::NamedTensors<float> logits;
  for (const auto& e : mask.entries()) logits.emplace(logit_name(e.param), e.logits);

  if (config.iterations > 0) {
    ad::Session<float> session(elg.graph());
    session.bind_all(frozen.params());
    ad::Optimizer opt(config.optimizer);
    Rng rng = Rng(config.seed).split("erase");
    result.report.loss_curve.reserve(config.iterations);
    for (std::size_t step = 0; step < config.iterations; ++step) {
      const erasing::EraseBatch batch =
          erasing::draw_erase_batch(frozen, data, objective, config.batch, config.max_fillers, rng);
      session.bind_all(logits);
      elg.bind_batch(session, batch, frozen.vocab());
      session.forward();
      const double value = session.value(elg.loss()).item();
      if (!std::isfinite(value)) {
        throw std::runtime_error("prune_erase: loss diverged (" + std::to_string(value) + ") at iteration " +
                                 std::to_string(step));
      }
      result.report.loss_curve.push_back(value);
      opt.step(logits, session.backward(elg.loss()));
    }
    for (auto& e : mask.entries()) e.logits = logits.at(logit_name(e.param));
  }
  mask.discretize();

  PruneReport& r = result.report;
  r.mask_size = mask.size();
  r.pruned_count = mask.pruned_count();
  r.pruned_ratio = mask.pruned_ratio();
  r.pruned_per_layer = mask.pruned_per_layer();
  std::size_t undecided = 0;
  for (const auto& e : mask.entries()) {
    for (double s : soft_mask(e.logits.values(), mask.temperature())) {
      const auto bin = std::min(kHistogramBins - 1, static_cast<std::size_t>(s * static_cast<double>(kHistogramBins)));
      ++r.histogram[bin];
      if (s > 0.05 && s < 0.95) ++undecided;
    }
  }
  r.undecided_fraction = static_cast<double>(undecided) / static_cast<double>(r.mask_size);

  const auto eval = evaluation_batches(frozen, data, objective, 8, 64, config.seed);
  const DenoiserModel soft = apply_mask(frozen, mask, MaskMode::kSoft);
  const DenoiserModel hard = apply_mask(frozen, mask, MaskMode::kHard);
  r.soft_loss = mean_erase_loss(soft, objective, eval);
  r.hard_loss = mean_erase_loss(hard, objective, eval);
  return result;
}

ParamMask magnitude_prune(const DenoiserModel& model, LayerScope scope, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw std::invalid_argument("magnitude_prune: ratio must lie in [0, 1)");
  ParamMask mask = ParamMask::all_ones(model, scope);
  struct Slot {
    float magnitude;
    std::size_t entry, index;
  };
  std::vector<Slot> slots;
  slots.reserve(mask.size());
  for (std::size_t e = 0; e < mask.entries().size(); ++e) {
    const ad::Tensor& w = model.param(mask.entries()[e].param);
    for (std::size_t k = 0; k < w.size(); ++k) slots.push_back({std::abs(w[k]), e, k});
  }
  const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(slots.size())));
  std::stable_sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& b) { return a.magnitude < b.magnitude; });
  for (std::size_t i = 0; i < count; ++i) mask.entries()[slots[i].entry].hard[slots[i].index] = 0;
  return mask;
}

PrunedFinetune preprune_erase(const DenoiserModel& frozen, const diffusion::ConceptDataset& data, double ratio,
                              const erasing::EraseObjective& objective, const erasing::EraseRunConfig& config) {
  ParamMask mask = magnitude_prune(frozen, config.scope, ratio);
  const erasing::KeepBits bits = keep_bits(mask);
  erasing::FinetuneResult ft = erasing::finetune_erase(frozen, data, objective, config, &bits);
  return {std::move(ft.model), std::move(mask), std::move(ft.loss_curve)};
}

PrunedFinetune postprune_erase(const DenoiserModel& frozen, const diffusion::ConceptDataset& data,
                               const erasing::EraseObjective& objective, const erasing::EraseRunConfig& config,
                               double ratio) {
  erasing::FinetuneResult ft = erasing::finetune_erase(frozen, data, objective, config);
  ParamMask mask = magnitude_prune(ft.model, config.scope, ratio);
  DenoiserModel pruned = apply_mask(ft.model, mask, MaskMode::kHard);
  return {std::move(pruned), std::move(mask), std::move(ft.loss_curve)};
}

diffusion::ChannelMask neuron_mask(const DenoiserModel& model, const std::vector<Neuron>& neurons) {
  const auto& c = model.config();
  diffusion::ChannelMask channels(c.blocks, ad::Tensor({c.hidden}));
  for (auto& t : channels) std::fill(t.values().begin(), t.values().end(), 1.0f);
  for (const auto& n : neurons) {
    if (n.block >= c.blocks || n.channel >= c.hidden) {
      throw std::invalid_argument("neuron_prune: no neuron (block " + std::to_string(n.block) + ", channel " +
                                  std::to_string(n.channel) + ")");
    }
    channels[n.block][n.channel] = 0.0f;
  }
  return channels;
}

diffusion::ModelRef neuron_prune(const DenoiserModel& erased, const std::vector<Neuron>& neurons) {
  if (neurons.empty()) {
    neuron_mask(erased, neurons);
    return diffusion::ModelRef(erased);
  }
  return diffusion::ModelRef(erased, neuron_mask(erased, neurons));
}

}  // namespace cerase::pruning
