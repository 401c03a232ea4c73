#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cerase/autodiff/graph.hpp"
#include "cerase/autodiff/session.hpp"
#include "cerase/diffusion/schedule.hpp"
#include "cerase/diffusion/vocabulary.hpp"

namespace cerase::diffusion {

struct ScheduleConfig {
  int steps = 50;
  double beta_start = 1e-4;
  double beta_end = 0.05;
};

struct ModelConfig {
  std::size_t hidden = 128;
  std::size_t blocks = 4;
  std::size_t time_dim = 32;
  bool residual = true;
  /// Standard deviation of the random token embeddings.
  double embedding_scale = 1.0;
  /// FiLM maps carry a bias term.
  bool film_bias = false;
  ScheduleConfig schedule;
};

/// FiLM layers are conditional (they read the prompt); everything else is
/// unconditional.
enum class LayerKind { kUnconditional, kConditional };
enum class LayerScope { kUnconditionalOnly, kConditionalOnly, kAll };

std::string to_string(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);
std::string to_string(LayerScope scope);
LayerScope parse_layer_scope(const std::string& name);
bool in_scope(LayerKind kind, LayerScope scope);

struct ParamInfo {
  std::string name;
  ad::Shape shape;
};

struct LayerInfo {
  std::string name;
  LayerKind kind = LayerKind::kUnconditional;
  std::vector<ParamInfo> params;
};

/// Layer table for a configuration, in forward order.
std::vector<LayerInfo> layer_table(const ModelConfig& config);

/// Conditional noise predictor eps(x_t, c, t) plus its prompt encoder.
class DenoiserModel {
 public:
  DenoiserModel() = default;
  DenoiserModel(ModelConfig config, Vocabulary vocab, ad::NamedTensors<float> params);

  static DenoiserModel initialize(const ModelConfig& config, std::size_t concept_count, Rng& rng);

  const ModelConfig& config() const { return config_; }
  const std::vector<LayerInfo>& layers() const { return layers_; }
  const LayerInfo& layer(const std::string& name) const;
  const NoiseSchedule& schedule() const { return schedule_; }

  const ad::NamedTensors<float>& params() const { return params_; }
  ad::NamedTensors<float>& params() { return params_; }
  const ad::Tensor& param(const std::string& name) const;

  const Vocabulary& vocab() const { return vocab_; }
  Vocabulary& vocab() { return vocab_; }

  /// Names of the parameters belonging to layers inside `scope`.
  std::vector<std::string> scope_params(LayerScope scope) const;
  std::size_t parameter_count(LayerScope scope = LayerScope::kAll) const;

  friend bool operator==(const DenoiserModel& a, const DenoiserModel& b);

 private:
  ModelConfig config_;
  std::vector<LayerInfo> layers_;
  NoiseSchedule schedule_{2, {0.5, 0.5}};
  Vocabulary vocab_;
  ad::NamedTensors<float> params_;
};

/// Per-block keep factors applied to post-SiLU activations; empty = no mask.
using ChannelMask = std::vector<ad::Tensor>;

/// A model together with optional activation-channel zeroing.
class ModelRef {
 public:
  ModelRef(const DenoiserModel& model) : model_(&model) {}  // NOLINT(implicit)
  ModelRef(const DenoiserModel& model, ChannelMask channels) : model_(&model), channels_(std::move(channels)) {}

  const DenoiserModel& model() const { return *model_; }
  const ChannelMask& channels() const { return channels_; }

 private:
  const DenoiserModel* model_;
  ChannelMask channels_;
};

struct DenoiserGraphOptions {
  /// Produces the graph node for a named denoiser parameter. Defaults to a
  /// constant input leaf of the same name.
  std::function<ad::NodeId(ad::Graph&, const std::string&)> param_source;
  bool trainable_embeddings = false;
  /// Adds param "attack.embedding" [n,16] pooled through input
  /// "attack.pool" [B,n] into the conditioning vector.
  std::size_t adversarial_tokens = 0;
  /// Adds input "cond.offset" [B,16] added to the pooled conditioning.
  bool cond_offset = false;
  /// Adds inputs "block<l>.keep" [hidden] multiplying each block's activations.
  bool channel_masks = false;
  /// Prefix for per-branch inputs (x, t, bag, ...). Parameter and embedding
  /// leaves already present in the graph are reused, so several branches
  /// can share one set of weights.
  std::string input_prefix;
};

struct DenoiserGraph {
  std::unique_ptr<ad::Graph> graph = std::make_unique<ad::Graph>();
  ad::NodeId x, timesteps, bag, cond, output;
  std::vector<ad::NodeId> activations;  // post-SiLU output of each block
};

inline constexpr const char* kEmbeddingParam = "vocab.embedding";
inline constexpr const char* kAttackEmbedding = "attack.embedding";
inline constexpr const char* kAttackPool = "attack.pool";
inline constexpr const char* kCondOffset = "cond.offset";
std::string keep_input_name(std::size_t block);

/// Builds into `into` when given, so several branches can share one graph.
DenoiserGraph build_denoiser_graph(const ModelConfig& config, const DenoiserGraphOptions& options = {},
                                   std::unique_ptr<ad::Graph> into = nullptr);

ad::Tensor timestep_tensor(std::span<const int> timesteps);

/// Conditioning for a batch: pooled prompt tokens plus an optional additive
/// offset (continuous adversarial embeddings enter through the offset).
struct Conditioning {
  ad::Tensor bag;     // [B,32]
  ad::Tensor offset;  // [B,16] or empty

  static Conditioning from_prompts(const std::vector<Prompt>& prompts, const Vocabulary& vocab);
  std::size_t rows() const { return bag.rows(); }
  /// Rows [begin, begin + count).
  Conditioning slice(std::size_t begin, std::size_t count) const;
  /// Each row repeated `times` times consecutively.
  Conditioning repeat_rows(std::size_t times) const;
};

/// Inference wrapper: builds the graph once and keeps parameters bound.
class DenoiserEvaluator {
 public:
  explicit DenoiserEvaluator(const ModelRef& ref);

  /// x: [B,64]; bag: pooling matrix [B,32].
  ad::Tensor predict(const ad::Tensor& x, std::span<const int> timesteps, const ad::Tensor& bag);
  ad::Tensor predict(const ad::Tensor& x, std::span<const int> timesteps, const Conditioning& cond);
  ad::Tensor predict(const ad::Tensor& x, std::span<const int> timesteps, const std::vector<Prompt>& prompts);
  /// Post-SiLU activations of block `b` from the last predict call.
  const ad::Tensor& activation(std::size_t block) const;

  const DenoiserModel& model() const { return *model_; }

 private:
  const DenoiserModel* model_;
  DenoiserGraph dg_;
  std::unique_ptr<ad::Session<float>> session_;
};

}  // namespace cerase::diffusion
