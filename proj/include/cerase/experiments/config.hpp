#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cerase/attack/attack.hpp"
#include "cerase/diffusion/dataset.hpp"
#include "cerase/diffusion/denoiser.hpp"
#include "cerase/diffusion/trainer.hpp"
#include "cerase/erasing/erasing.hpp"
#include "cerase/eval/probe.hpp"

namespace cerase::experiments {

/// Error in a config document; `line` is 1-based, 0 when not tied to a line.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::size_t line, const std::string& message);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct EraseSettings {
  int concept_id = 2;
  erasing::ObjectiveKind objective = erasing::ObjectiveKind::kEsd;
  double guidance = 1.0;
  /// -1: (concept + 1) mod 4
  int anchor = -1;
  /// Empty: per-concept default.
  std::optional<diffusion::LayerScope> scope;
  double finetune_lr = 5e-4;
  std::size_t finetune_iterations = 250;
  std::size_t batch = 32;
  std::size_t max_fillers = 3;
  std::uint64_t seed = 1;
};

struct PruneSettings {
  /// Empty: objective default (esd 0.1 / 250 / 4e-5, ac 0.01 / 1000 / 1e-5).
  std::optional<double> lr;
  std::optional<std::size_t> iterations;
  /// Adam epsilon; at this gradient scale it acts as the threshold below which logits barely move.
  std::optional<double> epsilon;
  std::optional<std::size_t> batch;
  double temperature = 10.0;
  double threshold = 0.5;
  /// Magnitude ratio for Pre-/Post-Prune.
  double magnitude_ratio = 0.1;
};

struct EvalSettings {
  std::size_t test_prompts = 16;
  std::size_t retained_prompts = 8;
  std::size_t samples_per_prompt = 16;
  std::size_t frechet_n = 2048;
  double guidance = 3.0;
  std::uint64_t prompt_seed = 99;
};

struct AttackSettings {
  std::size_t prompts = 12;
  attack::AttackConfig config;
};

struct AnalysisSettings {
  std::size_t k = 5;
  std::size_t samples = 8;
  std::vector<int> timesteps{5, 15, 25, 35, 45};
  /// Concept neurons removed per block for NP-ESD.
  std::size_t np_per_layer = 1;
};

/// Every knob of a run. Parsed from a strict INI document: unknown sections
/// or keys are errors.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  std::string out = "runs/default";

  diffusion::DatasetConfig data;
  diffusion::ModelConfig model;
  diffusion::TrainConfig train;
  eval::ProbeConfig probe;
  EraseSettings erase;
  PruneSettings prune;
  AttackSettings attack;
  EvalSettings eval;
  AnalysisSettings analysis;

  /// Canonical `section.key = value` listing in fixed order. run.out and
  /// run.threads are left out: they never change results.
  std::string canonical() const;
  /// Digest of canonical().
  std::string hash() const;
  /// Hash of the fields that determine the base model and probe.
  std::string base_hash() const;
};

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);
/// Applies one `section.key=value` override; throws ConfigError.
void apply_override(ExperimentConfig& config, const std::string& assignment);

/// Whether a key only affects where or how fast a run executes.
bool execution_only(const std::string& key);

/// Keys accepted by the parser, as section.key.
std::vector<std::string> config_keys();

}  // namespace cerase::experiments
