#include "cerase/erasing/erasing.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "cerase/diffusion/schedule.hpp"
#include "cerase/diffusion/trainer.hpp"

namespace cerase::erasing {

using diffusion::DenoiserEvaluator;
using diffusion::kImagePixels;

std::string to_string(ObjectiveKind kind) { return kind == ObjectiveKind::kEsd ? "esd" : "ac"; }

ObjectiveKind parse_objective_kind(const std::string& name) {
  if (name == "esd") return ObjectiveKind::kEsd;
  if (name == "ac") return ObjectiveKind::kAc;
  throw std::invalid_argument("unknown objective '" + name + "' (expected esd or ac)");
}

std::string to_string(AnchorSource source) { return source == AnchorSource::kCurrent ? "current" : "frozen"; }

AnchorSource parse_anchor_source(const std::string& name) {
  if (name == "current") return AnchorSource::kCurrent;
  if (name == "frozen") return AnchorSource::kFrozen;
  throw std::invalid_argument("unknown anchor source '" + name + "' (expected current or frozen)");
}

std::string to_string(EraseMode mode) { return mode == EraseMode::kFinetune ? "finetune" : "prune"; }

EraseMode parse_erase_mode(const std::string& name) {
  if (name == "finetune") return EraseMode::kFinetune;
  if (name == "prune") return EraseMode::kPrune;
  throw std::invalid_argument("unknown erase mode '" + name + "' (expected finetune or prune)");
}

EraseObjective EraseObjective::esd(int concept_id, double guidance) {
  EraseObjective o;
  o.kind = ObjectiveKind::kEsd;
  o.concept_id = concept_id;
  o.guidance = guidance;
  return o;
}

EraseObjective EraseObjective::ac(int concept_id, int anchor_concept) {
  EraseObjective o;
  o.kind = ObjectiveKind::kAc;
  o.concept_id = concept_id;
  o.anchor_concept = anchor_concept;
  return o;
}

void EraseObjective::validate(std::size_t concept_count) const {
  const auto in_range = [&](int c) { return c >= 0 && static_cast<std::size_t>(c) < concept_count; };
  if (!in_range(concept_id)) throw std::invalid_argument("erase objective: concept id out of range");
  if (kind == ObjectiveKind::kEsd) {
    if (!(guidance >= 0.0)) throw std::invalid_argument("erase objective: esd guidance must be >= 0");
  } else {
    if (!in_range(anchor_concept)) throw std::invalid_argument("erase objective: ac anchor concept out of range");
    if (anchor_concept == concept_id) throw std::invalid_argument("erase objective: ac anchor must differ from c");
  }
}

bool is_style_concept(int concept_id) {
  const auto f = static_cast<diffusion::Family>(concept_id);
  return f == diffusion::Family::kStripes || f == diffusion::Family::kChecker;
}

LayerScope default_scope(ObjectiveKind kind, EraseMode mode, int concept_id) {
  if (is_style_concept(concept_id)) return LayerScope::kConditionalOnly;
  if (kind == ObjectiveKind::kAc && mode == EraseMode::kPrune) return LayerScope::kAll;
  return LayerScope::kUnconditionalOnly;
}

EraseRunConfig default_config(const EraseObjective& objective, EraseMode mode) {
  EraseRunConfig c;
  c.mode = mode;
  c.scope = default_scope(objective.kind, mode, objective.concept_id);
  if (mode == EraseMode::kFinetune) {
    c.optimizer = {.kind = ad::OptimizerKind::kAdamW, .learning_rate = 5e-4, .weight_decay = 0.0};
    c.iterations = 250;
  } else if (objective.kind == ObjectiveKind::kEsd) {
    // epsilon doubles as the gradient threshold that keeps most logits in place
    c.optimizer = {.kind = ad::OptimizerKind::kAdamW, .learning_rate = 0.1, .weight_decay = 0.0, .epsilon = 4e-5};
    c.iterations = 250;
  } else {
    c.optimizer = {.kind = ad::OptimizerKind::kAdamW, .learning_rate = 0.01, .weight_decay = 0.0, .epsilon = 1e-5};
    c.iterations = 1000;
  }
  return c;
}

ad::Tensor esd_target_values(const ad::Tensor& eps_null, const ad::Tensor& eps_cond, double guidance) {
  if (eps_null.shape() != eps_cond.shape()) throw std::invalid_argument("esd_target: prediction shapes differ");
  ad::Tensor y(eps_null.shape());
  const auto g = static_cast<float>(guidance);
  for (std::size_t k = 0; k < y.size(); ++k) y[k] = eps_null[k] - g * (eps_cond[k] - eps_null[k]);
  return y;
}

ad::Tensor esd_target(const ModelRef& frozen, const ad::Tensor& xt, std::span<const int> timesteps,
                      const Conditioning& cond, double guidance) {
  DenoiserEvaluator eval(frozen);
  std::vector<Prompt> nulls(xt.rows(), diffusion::null_prompt());
  const ad::Tensor eps_null = eval.predict(xt, timesteps, nulls);
  const ad::Tensor eps_cond = eval.predict(xt, timesteps, cond);
  return esd_target_values(eps_null, eps_cond, guidance);
}

ad::Tensor ac_target(const ModelRef& current, const ad::Tensor& xt, std::span<const int> timesteps,
                     const Conditioning& anchor) {
  DenoiserEvaluator eval(current);
  return eval.predict(xt, timesteps, anchor);
}

EraseBatch draw_erase_batch(const DenoiserModel& frozen, const diffusion::ConceptDataset& data,
                            const EraseObjective& objective, std::size_t batch, std::size_t max_fillers, Rng& rng) {
  if (batch == 0) throw std::invalid_argument("draw_erase_batch: empty batch");
  const auto& split = data.train;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split.labels[i] == objective.concept_id) rows.push_back(i);
  }
  if (rows.empty()) throw std::invalid_argument("draw_erase_batch: no training images for the erased concept");

  ad::Tensor x0({batch, kImagePixels});
  std::vector<Prompt> prompts;
  prompts.reserve(batch);
  for (std::size_t r = 0; r < batch; ++r) {
    const std::size_t row = rows[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(rows.size()) - 1))];
    std::copy_n(split.images.data().data() + row * kImagePixels, kImagePixels, x0.data().data() + r * kImagePixels);
    const auto fillers = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(max_fillers)));
    prompts.push_back(diffusion::concept_prompt(objective.concept_id, fillers, frozen.vocab(), rng));
  }
  diffusion::NoisedBatch noised = diffusion::noise_batch(x0, std::move(prompts), frozen.schedule(), rng);

  EraseBatch b;
  b.xt = std::move(noised.xt);
  b.timesteps = std::move(noised.timesteps);
  b.prompts = std::move(noised.prompts);
  if (objective.kind == ObjectiveKind::kEsd) {
    b.target = esd_target(frozen, b.xt, b.timesteps, Conditioning::from_prompts(b.prompts, frozen.vocab()),
                          objective.guidance);
  } else {
    b.anchors = b.prompts;
    for (auto& p : b.anchors) p.tokens.front() = diffusion::concept_token(objective.anchor_concept);
    if (objective.anchor_source == AnchorSource::kFrozen) {
      b.target = ac_target(frozen, b.xt, b.timesteps, Conditioning::from_prompts(b.anchors, frozen.vocab()));
    }
  }
  return b;
}

namespace {

double mean_squared_difference(const ad::Tensor& a, const ad::Tensor& b) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = static_cast<double>(a[k]) - b[k];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

bool needs_anchor_branch(const EraseObjective& o) {
  return o.kind == ObjectiveKind::kAc && o.anchor_source == AnchorSource::kCurrent;
}

}  // namespace

double erase_loss(const ModelRef& model, const EraseObjective& objective, const EraseBatch& batch) {
  if (batch.xt.rows() == 0) throw std::invalid_argument("erase_loss: empty batch");
  DenoiserEvaluator eval(model);
  const auto& vocab = model.model().vocab();
  const ad::Tensor pred = eval.predict(batch.xt, batch.timesteps, batch.prompts);
  if (needs_anchor_branch(objective)) {
    const ad::Tensor anchor = eval.predict(batch.xt, batch.timesteps, Conditioning::from_prompts(batch.anchors, vocab));
    return mean_squared_difference(pred, anchor);
  }
  if (batch.target.shape() != pred.shape()) throw std::invalid_argument("erase_loss: batch has no target");
  return mean_squared_difference(pred, batch.target);
}

EraseLossGraph::EraseLossGraph(const diffusion::ModelConfig& config, const EraseObjective& objective,
                               ParamSource source, bool stop_gradient)
    : objective_(objective), anchor_branch_(needs_anchor_branch(objective)) {
  diffusion::DenoiserGraphOptions options;
  options.param_source = source;
  diffusion::DenoiserGraph main = diffusion::build_denoiser_graph(config, options);
  graph_ = std::move(main.graph);

  ad::NodeId target;
  if (anchor_branch_) {
    // Second branch on the same graph: parameter leaves are shared by name.
    options.input_prefix = "anchor.";
    auto anchor_source = [&source](ad::Graph& gr, const std::string& name) {
      return source ? source(gr, name) : (gr.has_leaf(name) ? gr.leaf(name) : gr.input(name));
    };
    options.param_source = anchor_source;
    diffusion::DenoiserGraph anchor = diffusion::build_denoiser_graph(config, options, std::move(graph_));
    graph_ = std::move(anchor.graph);
    target = stop_gradient ? graph_->stop_gradient(anchor.output) : anchor.output;
  } else {
    target = graph_->input("target");
  }
  ad::Graph& gg = *graph_;
  const ad::NodeId diff = gg.sub(main.output, target);
  loss_ = gg.mean(gg.mul(diff, diff));
}

template <typename T>
void EraseLossGraph::bind_batch(ad::Session<T>& session, const EraseBatch& batch,
                                const diffusion::Vocabulary& vocab) const {
  const ad::Tensor t = diffusion::timestep_tensor(batch.timesteps);
  session.bind("x", batch.xt.template cast<T>());
  session.bind("t", t.template cast<T>());
  session.bind("bag", diffusion::pooling_matrix(batch.prompts, vocab).template cast<T>());
  session.bind(diffusion::kEmbeddingParam, vocab.embeddings().template cast<T>());
  if (anchor_branch_) {
    session.bind("anchor.x", batch.xt.template cast<T>());
    session.bind("anchor.t", t.template cast<T>());
    session.bind("anchor.bag", diffusion::pooling_matrix(batch.anchors, vocab).template cast<T>());
  } else {
    session.bind("target", batch.target.template cast<T>());
  }
}

template void EraseLossGraph::bind_batch<float>(ad::Session<float>&, const EraseBatch&,
                                                const diffusion::Vocabulary&) const;
template void EraseLossGraph::bind_batch<double>(ad::Session<double>&, const EraseBatch&,
                                                 const diffusion::Vocabulary&) const;

FinetuneResult finetune_erase(const DenoiserModel& frozen, const diffusion::ConceptDataset& data,
                              const EraseObjective& objective, const EraseRunConfig& config, const KeepBits* freeze) {
  objective.validate(frozen.vocab().concept_count());
  const std::vector<std::string> scoped = frozen.scope_params(config.scope);
  if (scoped.empty()) throw std::invalid_argument("finetune_erase: layer scope selects no parameters");

  FinetuneResult result{frozen, {}};
  DenoiserModel& model = result.model;
  auto apply_freeze = [&](ad::NamedTensors<float>& tensors) {
    if (!freeze) return;
    for (const auto& [name, bits] : *freeze) {
      auto it = tensors.find(name);
      if (it == tensors.end()) continue;
      if (bits.size() != it->second.size()) throw std::invalid_argument("finetune_erase: freeze mask size mismatch for " + name);
      for (std::size_t k = 0; k < bits.size(); ++k) {
        if (!bits[k]) it->second[k] = 0.0f;
      }
    }
  };
  apply_freeze(model.params());
  if (config.iterations == 0) return result;

  const std::set<std::string> trainable(scoped.begin(), scoped.end());
  EraseLossGraph elg(model.config(), objective, [&](ad::Graph& g, const std::string& name) {
    if (g.has_leaf(name)) return g.leaf(name);
    return trainable.count(name) ? g.param(name) : g.input(name);
  });

  ad::NamedTensors<float> params;
  for (const auto& name : scoped) params.emplace(name, model.param(name));
  ad::Session<float> session(elg.graph());
  session.bind_all(model.params());
  ad::Optimizer opt(config.optimizer);
  Rng rng = Rng(config.seed).split("erase");

  result.loss_curve.reserve(config.iterations);
  for (std::size_t step = 0; step < config.iterations; ++step) {
    const EraseBatch batch = draw_erase_batch(frozen, data, objective, config.batch, config.max_fillers, rng);
    session.bind_all(params);
    elg.bind_batch(session, batch, model.vocab());
    session.forward();
    const double value = session.value(elg.loss()).item();
    if (!std::isfinite(value)) {
      throw std::runtime_error("finetune_erase: loss diverged (" + std::to_string(value) + ") at iteration " +
                               std::to_string(step));
    }
    result.loss_curve.push_back(value);
    ad::NamedTensors<float> grads = session.backward(elg.loss());
    apply_freeze(grads);
    opt.step(params, grads);
    apply_freeze(params);
  }
  for (auto& [name, t] : params) model.params().at(name) = t;
  return result;
}

}  // namespace cerase::erasing
