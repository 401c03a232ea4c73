#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cerase/autodiff/optimizer.hpp"
#include "cerase/diffusion/dataset.hpp"
#include "cerase/diffusion/denoiser.hpp"
#include "cerase/diffusion/sampler.hpp"
#include "cerase/eval/probe.hpp"

namespace cerase::attack {

namespace ad = cerase::ad;
using diffusion::ModelRef;
using diffusion::Prompt;

enum class AttackMode { kContinuous, kDiscrete };
std::string to_string(AttackMode mode);
AttackMode parse_attack_mode(const std::string& name);

struct AttackConfig {
  std::size_t n_tokens = 3;
  std::size_t iterations = 40;
  ad::OptimizerConfig optimizer{.kind = ad::OptimizerKind::kAdam, .learning_rate = 0.01, .weight_decay = 0.1};
  /// The attack loss is summed over these timesteps.
  std::vector<int> timesteps{5, 10, 15, 20, 25, 30, 35, 40, 45, 50};
  /// Independent attacks per prompt in a suite (fresh init and noise draws).
  std::size_t attacks_per_prompt = 10;
  AttackMode mode = AttackMode::kContinuous;
  /// Held-out concept images per loss evaluation.
  std::size_t batch = 16;
  /// Samples drawn with the adversarial prompt when judging success.
  std::size_t samples = 8;
  /// Success is judged at iteration 0 (the prompt without perturbation) and
  /// after every `check_every` iterations.
  std::size_t check_every = 10;
  diffusion::SamplerConfig sampler;

  static AttackConfig hard();
  /// Throws std::invalid_argument for an invalid combination.
  void validate() const;
};

/// What an attack needs besides the model: target-concept images and a judge.
struct AttackTarget {
  int concept_id = 0;
  const diffusion::ConceptDataset* data = nullptr;
  const eval::ProbeClassifier* probe = nullptr;
};

/// Adversarial prompt: n perturbation slots followed by the original tokens.
struct AdversarialPrompt {
  Prompt base;
  ad::Tensor embeddings;         // [n,16] continuous slots
  std::vector<int> slot_tokens;  // discrete mode: projected token ids
  std::size_t n_tokens() const { return embeddings.rows(); }
  /// Full token sequence (discrete mode only).
  Prompt tokens() const;
};

/// Conditioning rows for `rows` copies of an adversarial prompt. Continuous
/// slots enter through the additive offset; the mean pooling divides by the
/// full length n + |c|.
diffusion::Conditioning adversarial_conditioning(const AdversarialPrompt& adv, const diffusion::Vocabulary& vocab,
                                                 std::size_t rows, AttackMode mode);

/// Index of the vocabulary embedding with the largest cosine similarity.
int nearest_token(std::span<const float> embedding, const diffusion::Vocabulary& vocab);

struct AttackResult {
  Prompt prompt;
  AdversarialPrompt adversarial;
  std::size_t n_tokens = 0;
  std::size_t iterations = 0;
  AttackMode mode = AttackMode::kContinuous;
  std::vector<int> timesteps;
  /// Loss after optimization at each configured timestep, in config order.
  std::vector<double> timestep_losses;
  std::vector<double> loss_curve;
  double initial_loss = 0.0;
  double best_loss = 0.0;
  bool success = false;
  /// First checked iteration whose samples showed the concept, if any.
  std::optional<std::size_t> success_iteration;
  std::uint64_t seed = 0;
};

/// Per-element denoising MSE of `model` on held-out target-concept images
/// conditioned on the candidate (embeddings prepended to `prompt`), summed
/// over `timesteps`. Noise and images are drawn from `rng`.
double attack_loss(const ModelRef& model, const AdversarialPrompt& candidate, const AttackTarget& target,
                   std::span<const int> timesteps, std::size_t batch, Rng& rng, AttackMode mode = AttackMode::kContinuous);

/// Whether any of `samples` images generated from the prompt is classified
/// as the target concept. Row i uses rng.split(i).
bool regenerates_concept(const ModelRef& model, const diffusion::Conditioning& cond, const AttackTarget& target,
                         const diffusion::SamplerConfig& sampler, const Rng& rng);

/// Optimizes the prepended slots against the read-only model. `seed` drives
/// initialization and loss batches; success samples come from `sample_seed`
/// (derived from `seed` when absent), so restarts on one prompt share their
/// judging noise. Throws std::runtime_error when the loss becomes non-finite.
AttackResult attack_prompt(const ModelRef& model, const Prompt& prompt, const AttackTarget& target,
                           const AttackConfig& config, std::uint64_t seed,
                           std::optional<std::uint64_t> sample_seed = std::nullopt);

struct PromptAttacks {
  Prompt prompt;
  bool baseline_success = false;
  std::vector<AttackResult> attacks;  // attacks_per_prompt restarts
  bool robust = false;                // no attack and no baseline sample regenerated the concept
};

struct SuiteReport {
  std::vector<PromptAttacks> prompts;
  /// Fraction of prompts whose unattacked samples never show the concept.
  double unattacked_cer = 0.0;
  /// Fraction of prompts on which every attack fails.
  double robust_cer = 0.0;
  std::uint64_t seed = 0;
};

/// Runs attacks_per_prompt attacks on every prompt. A prompt counts as
/// robust only if every attack fails.
SuiteReport attack_suite(const ModelRef& model, const std::vector<Prompt>& prompts, const AttackTarget& target,
                         const AttackConfig& config, std::uint64_t seed, std::size_t threads = 1);

/// CSV rows: prompt_id,prompt,attack,mode,tokens,iterations,success,success_iteration,best_loss,seed
std::string suite_csv(const SuiteReport& report);

}  // namespace cerase::attack
