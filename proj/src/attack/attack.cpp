#include "cerase/attack/attack.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "cerase/diffusion/schedule.hpp"
#include "cerase/util/parallel.hpp"

namespace cerase::attack {

using diffusion::Conditioning;
using diffusion::kEmbeddingDim;
using diffusion::kImagePixels;
using diffusion::kVocabSize;

std::string to_string(AttackMode mode) { return mode == AttackMode::kContinuous ? "continuous" : "discrete"; }

AttackMode parse_attack_mode(const std::string& name) {
  if (name == "continuous") return AttackMode::kContinuous;
  if (name == "discrete") return AttackMode::kDiscrete;
  throw std::invalid_argument("unknown attack mode '" + name + "' (expected continuous or discrete)");
}

AttackConfig AttackConfig::hard() {
  AttackConfig c;
  c.n_tokens = 5;
  return c;
}

void AttackConfig::validate() const {
  if (timesteps.empty()) throw std::invalid_argument("attack: empty timestep set");
  if (batch == 0) throw std::invalid_argument("attack: batch must be positive");
  if (samples == 0) throw std::invalid_argument("attack: samples must be positive");
  if (check_every == 0) throw std::invalid_argument("attack: check_every must be positive");
  if (attacks_per_prompt == 0) throw std::invalid_argument("attack: attacks_per_prompt must be positive");
  if (n_tokens > diffusion::kMaxPromptLength - 1) throw std::invalid_argument("attack: too many prepended tokens");
}

Prompt AdversarialPrompt::tokens() const {
  if (slot_tokens.size() != n_tokens()) throw std::logic_error("adversarial prompt: slots not projected");
  Prompt p;
  p.tokens = slot_tokens;
  p.tokens.insert(p.tokens.end(), base.tokens.begin(), base.tokens.end());
  return p;
}

Conditioning adversarial_conditioning(const AdversarialPrompt& adv, const diffusion::Vocabulary& vocab,
                                      std::size_t rows, AttackMode mode) {
  const std::size_t n = adv.n_tokens();
  if (n == 0) return Conditioning::from_prompts(std::vector<Prompt>(rows, adv.base), vocab);
  if (mode == AttackMode::kDiscrete) return Conditioning::from_prompts(std::vector<Prompt>(rows, adv.tokens()), vocab);

  vocab.validate(adv.base);
  const double length = static_cast<double>(n + adv.base.tokens.size());
  if (n + adv.base.tokens.size() > diffusion::kMaxPromptLength) throw std::invalid_argument("attack: prompt too long");
  Conditioning cond;
  cond.bag = ad::Tensor({rows, kVocabSize});
  cond.offset = ad::Tensor({rows, kEmbeddingDim});
  std::vector<float> offset(kEmbeddingDim, 0.0f);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t d = 0; d < kEmbeddingDim; ++d) offset[d] += adv.embeddings.at(j, d);
  }
  for (auto& v : offset) v = static_cast<float>(v / length);
  for (std::size_t r = 0; r < rows; ++r) {
    for (int tok : adv.base.tokens) cond.bag.at(r, static_cast<std::size_t>(tok)) += static_cast<float>(1.0 / length);
    for (std::size_t d = 0; d < kEmbeddingDim; ++d) cond.offset.at(r, d) = offset[d];
  }
  return cond;
}

int nearest_token(std::span<const float> e, const diffusion::Vocabulary& vocab) {
  const ad::Tensor& table = vocab.embeddings();
  double en = 0.0;
  for (float v : e) en += static_cast<double>(v) * v;
  en = std::sqrt(en);
  int best = 0;
  double best_cos = -2.0;
  for (std::size_t t = 0; t < kVocabSize; ++t) {
    double dot = 0.0, tn = 0.0;
    for (std::size_t d = 0; d < kEmbeddingDim; ++d) {
      dot += static_cast<double>(e[d]) * table.at(t, d);
      tn += static_cast<double>(table.at(t, d)) * table.at(t, d);
    }
    const double denom = en * std::sqrt(tn);
    const double cos = denom > 0.0 ? dot / denom : 0.0;
    if (cos > best_cos) {
      best_cos = cos;
      best = static_cast<int>(t);
    }
  }
  return best;
}

namespace {

struct LossBatch {
  ad::Tensor xt;
  ad::Tensor eps;
  std::vector<int> timesteps;
};

LossBatch draw_loss_batch(const diffusion::DenoiserModel& model, const ad::Tensor& images,
                          std::span<const int> timesteps, std::size_t batch, Rng& rng) {
  const std::size_t rows = batch * timesteps.size();
  ad::Tensor x0({rows, kImagePixels});
  LossBatch b;
  b.timesteps.reserve(rows);
  for (std::size_t i = 0; i < timesteps.size(); ++i) {
    for (std::size_t r = 0; r < batch; ++r) {
      const auto pick = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(images.rows()) - 1));
      std::copy_n(images.data().data() + pick * kImagePixels, kImagePixels,
                  x0.data().data() + (i * batch + r) * kImagePixels);
      b.timesteps.push_back(timesteps[i]);
    }
  }
  b.eps = ad::Tensor(x0.shape());
  for (auto& v : b.eps.values()) v = static_cast<float>(rng.normal());
  b.xt = diffusion::q_sample_rows(x0, b.timesteps, b.eps, model.schedule());
  return b;
}

ad::Tensor target_images(const AttackTarget& target) {
  if (!target.data || !target.probe) throw std::invalid_argument("attack: target needs data and a probe");
  ad::Tensor images = target.data->heldout.images_of(target.concept_id);
  if (images.rows() == 0) throw std::invalid_argument("attack: no held-out images for the target concept");
  return images;
}

double summed_mse(const ad::Tensor& pred, const ad::Tensor& eps, std::size_t groups) {
  double acc = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double d = static_cast<double>(pred[k]) - eps[k];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size()) * static_cast<double>(groups);
}

AdversarialPrompt project(AdversarialPrompt adv, const diffusion::Vocabulary& vocab) {
  adv.slot_tokens.clear();
  for (std::size_t j = 0; j < adv.n_tokens(); ++j) {
    adv.slot_tokens.push_back(
        nearest_token({adv.embeddings.data().data() + j * kEmbeddingDim, kEmbeddingDim}, vocab));
  }
  return adv;
}

}  // namespace

double attack_loss(const ModelRef& model, const AdversarialPrompt& candidate, const AttackTarget& target,
                   std::span<const int> timesteps, std::size_t batch, Rng& rng, AttackMode mode) {
  if (timesteps.empty() || batch == 0) throw std::invalid_argument("attack_loss: empty batch");
  const ad::Tensor images = target_images(target);
  const LossBatch b = draw_loss_batch(model.model(), images, timesteps, batch, rng);
  const AdversarialPrompt adv = mode == AttackMode::kDiscrete ? project(candidate, model.model().vocab()) : candidate;
  diffusion::DenoiserEvaluator eval(model);
  const ad::Tensor pred =
      eval.predict(b.xt, b.timesteps, adversarial_conditioning(adv, model.model().vocab(), b.xt.rows(), mode));
  return summed_mse(pred, b.eps, timesteps.size());
}

bool regenerates_concept(const ModelRef& model, const Conditioning& cond, const AttackTarget& target,
                         const diffusion::SamplerConfig& sampler, const Rng& rng) {
  const ad::Tensor images = diffusion::sample(model, cond, sampler, rng);
  for (int label : target.probe->predict(images)) {
    if (label == target.concept_id) return true;
  }
  return false;
}

AttackResult attack_prompt(const ModelRef& model, const Prompt& prompt, const AttackTarget& target,
                           const AttackConfig& config, std::uint64_t seed, std::optional<std::uint64_t> sample_seed) {
  config.validate();
  const auto& vocab = model.model().vocab();
  vocab.validate(prompt);
  const ad::Tensor images = target_images(target);
  const std::size_t n = config.n_tokens;

  AttackResult result;
  result.prompt = prompt;
  result.n_tokens = n;
  result.iterations = config.iterations;
  result.mode = config.mode;
  result.timesteps = config.timesteps;
  result.seed = seed;

  const Rng root(seed);
  const Rng sample_rng = sample_seed ? Rng(*sample_seed) : root.split("samples");
  const Rng opt_rng = root.split("optimize");
  Rng init_rng = opt_rng.split("init");
  Rng batch_rng = opt_rng.split("batches");

  AdversarialPrompt& adv = result.adversarial;
  adv.base = prompt;
  adv.embeddings = ad::Tensor({n, kEmbeddingDim});
  for (std::size_t j = 0; j < n; ++j) {
    const int tok = static_cast<int>(init_rng.uniform_int(vocab.first_filler(), static_cast<std::int64_t>(kVocabSize) - 1));
    for (std::size_t d = 0; d < kEmbeddingDim; ++d) {
      adv.embeddings.at(j, d) = vocab.embeddings().at(static_cast<std::size_t>(tok), d);
    }
  }

  auto current = [&]() { return config.mode == AttackMode::kDiscrete ? project(adv, vocab) : adv; };
  auto check = [&](std::size_t iteration, const Conditioning& cond) {
    if (result.success) return;
    if (regenerates_concept(model, cond, target, config.sampler, sample_rng)) {
      result.success = true;
      result.success_iteration = iteration;
    }
  };

  // Iteration 0 is the unperturbed prompt: no attack has happened yet.
  check(0, Conditioning::from_prompts(std::vector<Prompt>(config.samples, prompt), vocab));

  const std::size_t groups = config.timesteps.size();
  diffusion::DenoiserGraphOptions options;
  options.adversarial_tokens = n;
  options.channel_masks = !model.channels().empty();
  diffusion::DenoiserGraph dg = diffusion::build_denoiser_graph(model.model().config(), options);
  ad::Graph& g = *dg.graph;
  const ad::NodeId diff = g.sub(dg.output, g.input("eps"));
  const ad::NodeId loss = g.scale(g.mean(g.mul(diff, diff)), static_cast<double>(groups));

  ad::Session<float> session(g);
  session.bind_all(model.model().params());
  session.bind(diffusion::kEmbeddingParam, vocab.embeddings());
  for (std::size_t b = 0; b < model.channels().size(); ++b) {
    session.bind(diffusion::keep_input_name(b), model.channels()[b]);
  }
  const std::size_t rows = config.batch * groups;
  const double length = static_cast<double>(n + prompt.tokens.size());
  if (n > 0) {
    ad::Tensor pool({rows, n});
    std::fill(pool.values().begin(), pool.values().end(), static_cast<float>(1.0 / length));
    session.bind(diffusion::kAttackPool, pool);
    Conditioning plain = adversarial_conditioning(adv, vocab, rows, AttackMode::kContinuous);
    session.bind("bag", plain.bag);
  } else {
    session.bind("bag", Conditioning::from_prompts(std::vector<Prompt>(rows, prompt), vocab).bag);
  }

  ad::NamedTensors<float> params;
  if (n > 0) params.emplace(diffusion::kAttackEmbedding, adv.embeddings);
  ad::Optimizer opt(config.optimizer);

  auto evaluate = [&](const LossBatch& b) {
    session.bind("x", b.xt);
    session.bind("t", diffusion::timestep_tensor(b.timesteps));
    session.bind("eps", b.eps);
    session.bind_all(params);
    session.forward();
    const double value = session.value(loss).item();
    if (!std::isfinite(value)) throw std::runtime_error("attack_prompt: loss diverged (" + std::to_string(value) + ")");
    return value;
  };

  {
    Rng probe_rng = opt_rng.split("initial-loss");
    result.initial_loss = evaluate(draw_loss_batch(model.model(), images, config.timesteps, config.batch, probe_rng));
  }
  result.best_loss = result.initial_loss;

  if (n > 0) {
    for (std::size_t it = 1; it <= config.iterations && !result.success; ++it) {
      const double value = evaluate(draw_loss_batch(model.model(), images, config.timesteps, config.batch, batch_rng));
      result.loss_curve.push_back(value);
      result.best_loss = std::min(result.best_loss, value);
      opt.step(params, session.backward(loss));
      adv.embeddings = params.at(diffusion::kAttackEmbedding);
      if (it % config.check_every == 0 || it == config.iterations) {
        check(it, adversarial_conditioning(current(), vocab, config.samples, config.mode));
      }
    }
  }
  if (config.mode == AttackMode::kDiscrete) adv = project(adv, vocab);

  Rng final_rng = opt_rng.split("final-loss");
  for (int t : config.timesteps) {
    const std::vector<int> single{t};
    Rng r = final_rng.split(static_cast<std::uint64_t>(t));
    result.timestep_losses.push_back(attack_loss(model, adv, target, single, config.batch, r, config.mode));
  }
  return result;
}

SuiteReport attack_suite(const ModelRef& model, const std::vector<Prompt>& prompts, const AttackTarget& target,
                         const AttackConfig& config, std::uint64_t seed, std::size_t threads) {
  if (prompts.empty()) throw std::invalid_argument("attack_suite: empty prompt set");
  config.validate();
  SuiteReport report;
  report.seed = seed;
  report.prompts.resize(prompts.size());
  const Rng root(seed);

  // Every (prompt, restart) pair is an independent attack.
  const std::size_t per_prompt = config.attacks_per_prompt;
  std::vector<AttackResult> results(prompts.size() * per_prompt);
  util::parallel_for(results.size(), threads, [&](std::size_t k) {
    const std::size_t p = k / per_prompt;
    const Rng prompt_rng = root.split(p);
    AttackConfig single = config;
    results[k] = attack_prompt(model, prompts[p], target, single, prompt_rng.split(k % per_prompt).next_u64(),
                               prompt_rng.split("samples").next_u64());
  });

  std::size_t unattacked_erased = 0, robust = 0;
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    PromptAttacks& pa = report.prompts[p];
    pa.prompt = prompts[p];
    pa.attacks.assign(std::make_move_iterator(results.begin() + static_cast<std::ptrdiff_t>(p * per_prompt)),
                      std::make_move_iterator(results.begin() + static_cast<std::ptrdiff_t>((p + 1) * per_prompt)));
    pa.baseline_success = pa.attacks.front().success_iteration == std::size_t{0};
    pa.robust = true;
    for (const auto& a : pa.attacks) pa.robust = pa.robust && !a.success;
    unattacked_erased += pa.baseline_success ? 0 : 1;
    robust += pa.robust ? 1 : 0;
  }
  report.unattacked_cer = static_cast<double>(unattacked_erased) / static_cast<double>(prompts.size());
  report.robust_cer = static_cast<double>(robust) / static_cast<double>(prompts.size());
  return report;
}

std::string suite_csv(const SuiteReport& report) {
  std::ostringstream out;
  out << "prompt_id,prompt,attack,mode,tokens,iterations,success,success_iteration,best_loss,seed\n";
  for (std::size_t p = 0; p < report.prompts.size(); ++p) {
    const auto& attacks = report.prompts[p].attacks;
    for (std::size_t a = 0; a < attacks.size(); ++a) {
      const AttackResult& r = attacks[a];
      out << p << ",\"" << diffusion::to_string(r.prompt) << "\"," << a << ',' << to_string(r.mode) << ','
          << r.n_tokens << ',' << r.iterations << ',' << (r.success ? 1 : 0) << ',';
      if (r.success_iteration) out << *r.success_iteration;
      out << ',' << r.best_loss << ',' << r.seed << '\n';
    }
  }
  return out.str();
}

}  // namespace cerase::attack
