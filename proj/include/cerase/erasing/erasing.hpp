#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cerase/autodiff/optimizer.hpp"
#include "cerase/diffusion/dataset.hpp"
#include "cerase/diffusion/denoiser.hpp"

namespace cerase::erasing {

namespace ad = cerase::ad;
using diffusion::Conditioning;
using diffusion::DenoiserModel;
using diffusion::LayerScope;
using diffusion::ModelRef;
using diffusion::Prompt;

enum class ObjectiveKind { kEsd, kAc };
/// Which parameters produce the AC anchor prediction.
enum class AnchorSource { kCurrent, kFrozen };

std::string to_string(ObjectiveKind kind);
ObjectiveKind parse_objective_kind(const std::string& name);
std::string to_string(AnchorSource source);
AnchorSource parse_anchor_source(const std::string& name);

struct EraseObjective {
  ObjectiveKind kind = ObjectiveKind::kEsd;
  int concept_id = 0;
  /// Negative guidance scale, esd only.
  double guidance = 1.0;
  /// Anchor concept, ac only. Anchor prompts reuse the erase prompt's filler
  /// tokens with the concept token replaced.
  int anchor_concept = -1;
  AnchorSource anchor_source = AnchorSource::kCurrent;

  static EraseObjective esd(int concept_id, double guidance = 1.0);
  static EraseObjective ac(int concept_id, int anchor_concept);

  /// Throws std::invalid_argument on a negative guidance scale, an anchor
  /// equal to the erased concept, or concept ids outside [0, concept_count).
  void validate(std::size_t concept_count) const;
};

enum class EraseMode { kFinetune, kPrune };
std::string to_string(EraseMode mode);
EraseMode parse_erase_mode(const std::string& name);

struct EraseRunConfig {
  EraseMode mode = EraseMode::kFinetune;
  LayerScope scope = LayerScope::kUnconditionalOnly;
  ad::OptimizerConfig optimizer{.kind = ad::OptimizerKind::kAdamW, .learning_rate = 1e-3, .weight_decay = 0.0};
  std::size_t iterations = 250;
  std::size_t batch = 32;
  std::uint64_t seed = 1;
  /// Erase prompts are the concept token plus 0..max_fillers filler tokens.
  std::size_t max_fillers = 3;
  /// Mask temperature and threshold, prune mode only.
  double temperature = 10.0;
  double threshold = 0.5;
};

/// Concepts rendered as textures count as style-like; the rest as objects.
bool is_style_concept(int concept_id);
/// Default layer scope: unconditional for objects, conditional for styles;
/// pruning with the ac objective on an object uses every layer.
LayerScope default_scope(ObjectiveKind kind, EraseMode mode, int concept_id);
/// Fine-tune and prune defaults for an objective.
EraseRunConfig default_config(const EraseObjective& objective, EraseMode mode);

/// y = eps(c_null) - guidance * (eps(c) - eps(c_null)), elementwise.
ad::Tensor esd_target_values(const ad::Tensor& eps_null, const ad::Tensor& eps_cond, double guidance);

/// Negative-guidance target from the frozen model. The null and concept
/// predictions are computed by separate forward passes of identical shape.
ad::Tensor esd_target(const ModelRef& frozen, const ad::Tensor& xt, std::span<const int> timesteps,
                      const Conditioning& cond, double guidance);

/// Value of the anchor target eps_theta(x_t, c*, t). Inside an erase-loss
/// graph the same quantity enters through a stop-gradient.
ad::Tensor ac_target(const ModelRef& current, const ad::Tensor& xt, std::span<const int> timesteps,
                     const Conditioning& anchor);

/// Erase prompts with matching anchor prompts for one batch.
struct EraseBatch {
  ad::Tensor xt;
  std::vector<int> timesteps;
  std::vector<Prompt> prompts;
  std::vector<Prompt> anchors;  // ac only
  ad::Tensor target;            // esd, or ac with a frozen anchor
};

/// x0 from the erased concept's train split, t uniform in [1, T], fresh noise.
/// Fills `target` from `frozen` where the objective needs it.
EraseBatch draw_erase_batch(const DenoiserModel& frozen, const diffusion::ConceptDataset& data,
                            const EraseObjective& objective, std::size_t batch, std::size_t max_fillers, Rng& rng);

/// Mean squared error (over every element) between the edited model's
/// prediction on the erase prompts and the objective's target.
double erase_loss(const ModelRef& model, const EraseObjective& objective, const EraseBatch& batch);

/// Produces the graph node for a named denoiser parameter.
using ParamSource = std::function<ad::NodeId(ad::Graph&, const std::string&)>;

/// Differentiable erase loss over parameters supplied by `source`. For ac
/// with the current-parameter anchor a second branch shares the parameter
/// nodes and is wrapped in a stop-gradient (unless `stop_gradient` is false).
class EraseLossGraph {
 public:
  EraseLossGraph(const diffusion::ModelConfig& config, const EraseObjective& objective, ParamSource source,
                 bool stop_gradient = true);

  const ad::Graph& graph() const { return *graph_; }
  ad::NodeId loss() const { return loss_; }

  /// Binds x_t, timesteps, prompts, anchors / target and the frozen token
  /// embeddings. Parameters are bound by the caller.
  template <typename T>
  void bind_batch(ad::Session<T>& session, const EraseBatch& batch, const diffusion::Vocabulary& vocab) const;

 private:
  EraseObjective objective_;
  std::unique_ptr<ad::Graph> graph_;
  ad::NodeId loss_;
  bool anchor_branch_ = false;
};

/// Optional per-parameter keep bits; zero bits are held at zero and get no update.
using KeepBits = std::map<std::string, std::vector<std::uint8_t>, std::less<>>;

struct FinetuneResult {
  DenoiserModel model;
  std::vector<double> loss_curve;
};

/// Fine-tunes the in-scope layers of a copy of `frozen` on the erase loss.
/// Parameters outside the scope are never touched. With `freeze`, entries
/// whose bit is 0 are set to zero and stay there. Throws std::runtime_error
/// when the loss becomes non-finite.
FinetuneResult finetune_erase(const DenoiserModel& frozen, const diffusion::ConceptDataset& data,
                              const EraseObjective& objective, const EraseRunConfig& config,
                              const KeepBits* freeze = nullptr);

}  // namespace cerase::erasing
