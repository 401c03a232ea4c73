#include "cerase/diffusion/trainer.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace cerase::diffusion {

NoisedBatch noise_batch(const ad::Tensor& x0, std::vector<Prompt> prompts, const NoiseSchedule& schedule, Rng& rng) {
  if (x0.rows() != prompts.size()) throw std::invalid_argument("noise_batch: one prompt per image required");
  if (x0.rows() == 0) throw std::invalid_argument("noise_batch: empty batch");
  NoisedBatch b;
  b.x0 = x0;
  b.prompts = std::move(prompts);
  b.eps = ad::Tensor(x0.shape());
  b.timesteps.resize(x0.rows());
  for (auto& t : b.timesteps) t = static_cast<int>(rng.uniform_int(1, schedule.steps()));
  for (auto& v : b.eps.values()) v = static_cast<float>(rng.normal());
  b.xt = q_sample_rows(x0, b.timesteps, b.eps, schedule);
  return b;
}

double denoise_loss(const ModelRef& model, const NoisedBatch& batch) {
  DenoiserEvaluator eval(model);
  const ad::Tensor pred = eval.predict(batch.xt, batch.timesteps, batch.prompts);
  double acc = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double d = static_cast<double>(pred[k]) - batch.eps[k];
    acc += d * d;
  }
  return acc / static_cast<double>(batch.x0.rows());
}

double denoise_loss(const ModelRef& model, const ad::Tensor& x0, const std::vector<Prompt>& prompts, Rng& rng) {
  return denoise_loss(model, noise_batch(x0, prompts, model.model().schedule(), rng));
}

NoisedBatch sample_training_batch(const ConceptDataset& data, const Vocabulary& vocab, const TrainConfig& cfg,
                                  const NoiseSchedule& schedule, Rng& rng) {
  const Split& split = data.train;
  ad::Tensor x0({cfg.batch, kImagePixels});
  std::vector<Prompt> prompts;
  prompts.reserve(cfg.batch);
  // Background rows sit at the end of the split; concept rows precede them.
  const std::size_t concept_rows = data.config.train_per_concept * kConceptCount;
  const std::size_t background_rows = split.size() - concept_rows;
  for (std::size_t r = 0; r < cfg.batch; ++r) {
    std::size_t row;
    const bool background = background_rows > 0 && rng.uniform() < cfg.background_fraction;
    if (background) {
      row = concept_rows + static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(background_rows) - 1));
      prompts.push_back(null_prompt());
    } else {
      row = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(concept_rows) - 1));
      const auto fillers = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cfg.max_fillers)));
      Prompt p = concept_prompt(split.labels[row], fillers, vocab, rng);
      prompts.push_back(rng.uniform() < cfg.null_dropout ? null_prompt() : std::move(p));
    }
    std::copy_n(split.images.data().data() + row * kImagePixels, kImagePixels, x0.data().data() + r * kImagePixels);
  }
  return noise_batch(x0, std::move(prompts), schedule, rng);
}

TrainResult train_base(const ConceptDataset& data, const ModelConfig& model_config, const TrainConfig& cfg) {
  Rng root(cfg.seed);
  Rng init_rng = root.split("init");
  TrainResult result{DenoiserModel::initialize(model_config, kConceptCount, init_rng), {}};
  if (cfg.steps == 0) return result;
  DenoiserModel& model = result.model;

  DenoiserGraphOptions options;
  options.param_source = [](ad::Graph& g, const std::string& name) { return g.param(name); };
  options.trainable_embeddings = cfg.train_embeddings;
  DenoiserGraph dg = build_denoiser_graph(model_config, options);
  ad::Graph& g = *dg.graph;
  const ad::NodeId loss = g.scale(g.sum_squares(g.sub(dg.output, g.input("eps"))), 1.0 / static_cast<double>(cfg.batch));

  ad::NamedTensors<float> params = model.params();
  if (cfg.train_embeddings) params.emplace(kEmbeddingParam, model.vocab().embeddings());
  ad::Optimizer opt(cfg.optimizer);
  ad::Session<float> session(g);
  Rng batch_rng = root.split("batches");

  result.loss_curve.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double progress = static_cast<double>(step) / static_cast<double>(cfg.steps);
    const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    opt.set_learning_rate(cfg.optimizer.learning_rate * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine));

    const NoisedBatch batch = sample_training_batch(data, model.vocab(), cfg, model.schedule(), batch_rng);
    session.bind_all(params);
    if (!cfg.train_embeddings) session.bind(kEmbeddingParam, model.vocab().embeddings());
    session.bind("x", batch.xt);
    session.bind("t", timestep_tensor(batch.timesteps));
    session.bind("bag", pooling_matrix(batch.prompts, model.vocab()));
    session.bind("eps", batch.eps);
    session.forward();
    const double value = session.value(loss).item();
    if (!std::isfinite(value)) {
      throw std::runtime_error("train_base: loss diverged (" + std::to_string(value) + ") at step " +
                               std::to_string(step));
    }
    result.loss_curve.push_back(value);
    opt.step(params, session.backward(loss));
  }

  for (auto& [name, t] : model.params()) t = params.at(name);
  if (cfg.train_embeddings) model.vocab().embeddings() = params.at(kEmbeddingParam);
  return result;
}

}  // namespace cerase::diffusion
