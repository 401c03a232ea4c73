#pragma once

#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cerase/analysis/neurons.hpp"
#include "cerase/attack/attack.hpp"
#include "cerase/experiments/config.hpp"
#include "cerase/pruning/prune.hpp"

namespace cerase::experiments {

namespace fs = std::filesystem;
using Json = nlohmann::json;

enum class Method { kBase, kEsd, kAc, kPEsd, kPAc, kPrePrune, kPostPrune, kNpEsd };
std::string to_string(Method method);
Method parse_method(const std::string& name);
bool is_mask_method(Method method);

/// Dataset, base model and probe shared by every run of one configuration.
/// The base model and probe are cached under `cache` keyed by
/// ExperimentConfig::base_hash, so later runs reuse them.
class Workbench {
 public:
  static Workbench open(const ExperimentConfig& config, const fs::path& cache);

  const diffusion::ConceptDataset& data() const { return data_; }
  const diffusion::DenoiserModel& base() const { return base_; }
  const eval::ProbeClassifier& probe() const { return probe_; }
  const std::vector<double>& base_loss_curve() const { return base_loss_; }
  const fs::path& base_path() const { return base_path_; }
  const fs::path& probe_path() const { return probe_path_; }
  std::string base_hash() const { return base_hash_; }

 private:
  diffusion::ConceptDataset data_;
  diffusion::DenoiserModel base_;
  eval::ProbeClassifier probe_;
  std::vector<double> base_loss_;
  fs::path base_path_, probe_path_;
  std::string base_hash_;
};

erasing::EraseObjective objective_for(const ExperimentConfig& config, Method method);
erasing::EraseRunConfig run_config(const ExperimentConfig& config, const erasing::EraseObjective& objective,
                                   erasing::EraseMode mode);

/// Result of one erasure method. `model` holds the weights actually used, so
/// for mask methods it equals theta* with the hard mask applied.
struct ErasedModel {
  Method method = Method::kBase;
  int concept_id = 0;
  diffusion::DenoiserModel model;
  std::optional<pruning::ParamMask> mask;
  std::vector<pruning::Neuron> neurons;  // np-esd only
  diffusion::ChannelMask channels;
  std::vector<double> loss_curve;
  std::optional<pruning::PruneReport> prune_report;

  diffusion::ModelRef ref() const { return {model, channels}; }
  /// Pruned fraction of the mask (0 without one).
  double pruned_ratio() const;
};

ErasedModel erase(const Workbench& bench, const ExperimentConfig& config, Method method);

/// Concept neurons from rho between the base model and `erased` on the
/// concept's test prompts.
analysis::ConceptNeurons concept_neurons(const Workbench& bench, const ExperimentConfig& config,
                                         const diffusion::ModelRef& erased, std::size_t k);
/// Replaces the neurons of an ESD result with the top np_per_layer concept neurons.
ErasedModel neuron_prune_esd(const Workbench& bench, const ExperimentConfig& config, const ErasedModel& esd);

std::vector<diffusion::Prompt> test_prompts(const Workbench& bench, const ExperimentConfig& config, int concept_id);
std::vector<diffusion::Prompt> attack_prompts(const Workbench& bench, const ExperimentConfig& config);
attack::SuiteReport run_attacks(const Workbench& bench, const ExperimentConfig& config,
                                const diffusion::ModelRef& model);

struct ConceptScore {
  int concept_id = 0;
  /// Fraction of samples classified as the concept.
  double accuracy = 0.0;
};

struct EvalReport {
  std::string method;
  int concept_id = 0;
  double cer = 0.0;
  /// Conditional accuracy on every retained concept.
  std::vector<ConceptScore> retained;
  double frechet = 0.0;
  /// Base model score on the same samples; 0 when unknown.
  double base_frechet = 0.0;
  std::optional<double> unattacked_cer;
  std::optional<double> robust_cer;
  double pruned_ratio = 0.0;
  std::size_t pruned_count = 0;
  std::size_t mask_size = 0;
  std::string model_digest;
  std::string mask_digest;
  std::string config_hash;

  double min_retained() const;
  double max_retained_drop(const EvalReport& base) const;
  double frechet_ratio() const { return base_frechet > 0.0 ? frechet / base_frechet : 0.0; }
  Json to_json() const;
};

struct EvalOptions {
  bool quality = true;
  bool attacks = true;
  double base_frechet = 0.0;
};

EvalReport evaluate(const Workbench& bench, const ExperimentConfig& config, const ErasedModel& erased,
                    const EvalOptions& options, attack::SuiteReport* suite = nullptr);

/// One CSV row per report.
std::string eval_csv(const std::vector<EvalReport>& reports);

/// (prompt, adversarial prompt) pairs from successful attacks on prompts the
/// model had erased; every attack of the suite when there are none.
std::vector<analysis::PromptPair> adversarial_pairs(const attack::SuiteReport& suite,
                                                    const diffusion::Vocabulary& vocab, attack::AttackMode mode);
/// delta on `model` for the adversarial prompts of `suite`.
analysis::ScoreGrid sensitivity_scores(const Workbench& bench, const ExperimentConfig& config,
                                       const diffusion::ModelRef& model, const attack::SuiteReport& suite);

struct ArtifactRecord {
  std::string role;
  std::string path;  // relative to the run directory
  std::string digest;
  std::uintmax_t bytes = 0;
};

/// Everything a run wrote, with digests.
struct RunManifest {
  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  Json seeds = Json::object();
  double wall_seconds = 0.0;
  std::string version;
  std::vector<ArtifactRecord> artifacts;

  Json to_json() const;
  static RunManifest from_json(const Json& j);
  /// Throws std::runtime_error when a listed file is missing or its digest differs.
  void verify(const fs::path& run_dir) const;
};

inline constexpr const char* kManifestFile = "manifest.json";
std::string software_version();

/// Writes artifacts atomically into a run directory and records them.
class RunWriter {
 public:
  RunWriter(fs::path dir, std::string command, const ExperimentConfig& config);

  const fs::path& dir() const { return dir_; }
  /// Returns the absolute path written.
  fs::path write(const std::string& role, const std::string& relative, std::string_view bytes);
  void record(const std::string& role, const std::string& relative);
  void set_seed(const std::string& name, std::uint64_t value) { manifest_.seeds[name] = value; }
  /// Writes config.ini and manifest.json.
  RunManifest finish();

 private:
  fs::path dir_;
  RunManifest manifest_;
  std::string canonical_;
  std::chrono::steady_clock::time_point start_;
};

RunManifest load_manifest(const fs::path& run_dir);

}  // namespace cerase::experiments
