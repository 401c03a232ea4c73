#include "cerase/diffusion/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cerase/diffusion/dataset.hpp"

namespace cerase::diffusion {

std::string to_string(LayerKind kind) {
  return kind == LayerKind::kConditional ? "conditional" : "unconditional";
}

LayerKind parse_layer_kind(const std::string& name) {
  if (name == "conditional") return LayerKind::kConditional;
  if (name == "unconditional") return LayerKind::kUnconditional;
  throw std::invalid_argument("unknown layer kind '" + name + "'");
}

std::string to_string(LayerScope scope) {
  switch (scope) {
    case LayerScope::kUnconditionalOnly: return "unconditional";
    case LayerScope::kConditionalOnly: return "conditional";
    case LayerScope::kAll: return "all";
  }
  return "?";
}

LayerScope parse_layer_scope(const std::string& name) {
  if (name == "unconditional") return LayerScope::kUnconditionalOnly;
  if (name == "conditional") return LayerScope::kConditionalOnly;
  if (name == "all") return LayerScope::kAll;
  throw std::invalid_argument("unknown layer scope '" + name + "' (expected unconditional, conditional or all)");
}

bool in_scope(LayerKind kind, LayerScope scope) {
  switch (scope) {
    case LayerScope::kUnconditionalOnly: return kind == LayerKind::kUnconditional;
    case LayerScope::kConditionalOnly: return kind == LayerKind::kConditional;
    case LayerScope::kAll: return true;
  }
  return false;
}

std::string keep_input_name(std::size_t block) { return "block" + std::to_string(block) + ".keep"; }

std::vector<LayerInfo> layer_table(const ModelConfig& c) {
  std::vector<LayerInfo> layers;
  for (std::size_t b = 0; b < c.blocks; ++b) {
    const std::string p = "block" + std::to_string(b);
    const std::size_t in = b == 0 ? kImagePixels : c.hidden;
    layers.push_back({p + ".dense", LayerKind::kUnconditional,
                      {{p + ".dense.weight", {in, c.hidden}}, {p + ".dense.bias", {c.hidden}}}});
    layers.push_back({p + ".time", LayerKind::kUnconditional,
                      {{p + ".time.weight", {c.time_dim, c.hidden}}, {p + ".time.bias", {c.hidden}}}});
    LayerInfo film{p + ".film", LayerKind::kConditional, {{p + ".film.scale_weight", {kEmbeddingDim, c.hidden}}}};
    if (c.film_bias) film.params.push_back({p + ".film.scale_bias", {c.hidden}});
    film.params.push_back({p + ".film.shift_weight", {kEmbeddingDim, c.hidden}});
    if (c.film_bias) film.params.push_back({p + ".film.shift_bias", {c.hidden}});
    layers.push_back(std::move(film));
  }
  layers.push_back({"out", LayerKind::kUnconditional, {{"out.weight", {c.hidden, kImagePixels}}, {"out.bias", {kImagePixels}}}});
  return layers;
}

DenoiserModel::DenoiserModel(ModelConfig config, Vocabulary vocab, ad::NamedTensors<float> params)
    : config_(config),
      layers_(layer_table(config)),
      schedule_(make_schedule(config.schedule.steps, config.schedule.beta_start, config.schedule.beta_end)),
      vocab_(std::move(vocab)),
      params_(std::move(params)) {
  if (config_.blocks == 0 || config_.hidden == 0) throw std::invalid_argument("model: empty architecture");
  std::size_t expected = 0;
  for (const auto& layer : layers_) {
    for (const auto& p : layer.params) {
      ++expected;
      auto it = params_.find(p.name);
      if (it == params_.end()) throw std::invalid_argument("model: missing parameter '" + p.name + "'");
      if (it->second.shape() != p.shape) {
        throw std::invalid_argument("model: parameter '" + p.name + "' has shape " +
                                    ad::shape_string(it->second.shape()) + ", expected " + ad::shape_string(p.shape));
      }
    }
  }
  if (expected != params_.size()) throw std::invalid_argument("model: parameters outside the layer table");
}

DenoiserModel DenoiserModel::initialize(const ModelConfig& config, std::size_t concept_count, Rng& rng) {
  Rng vocab_rng = rng.split("vocab");
  Vocabulary vocab = Vocabulary::random(concept_count, vocab_rng, config.embedding_scale);
  ad::NamedTensors<float> params;
  Rng prng = rng.split("params");
  for (const auto& layer : layer_table(config)) {
    for (const auto& p : layer.params) {
      ad::Tensor t(p.shape);
      if (p.shape.size() == 2) {
        double stdev = 1.0 / std::sqrt(static_cast<double>(p.shape[0]));
        // FiLM inputs are token embeddings of std embedding_scale, not unit activations.
        if (layer.kind == LayerKind::kConditional) stdev *= 0.5 / config.embedding_scale;
        Rng r = prng.split(p.name);
        for (auto& v : t.values()) v = static_cast<float>(stdev * r.normal());
      }
      params.emplace(p.name, std::move(t));
    }
  }
  return DenoiserModel(config, std::move(vocab), std::move(params));
}

const LayerInfo& DenoiserModel::layer(const std::string& name) const {
  for (const auto& l : layers_) {
    if (l.name == name) return l;
  }
  throw std::out_of_range("model: no layer named '" + name + "'");
}

const ad::Tensor& DenoiserModel::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("model: no parameter named '" + name + "'");
  return it->second;
}

std::vector<std::string> DenoiserModel::scope_params(LayerScope scope) const {
  std::vector<std::string> names;
  for (const auto& layer : layers_) {
    if (!in_scope(layer.kind, scope)) continue;
    for (const auto& p : layer.params) names.push_back(p.name);
  }
  return names;
}

std::size_t DenoiserModel::parameter_count(LayerScope scope) const {
  std::size_t n = 0;
  for (const auto& name : scope_params(scope)) n += param(name).size();
  return n;
}

bool operator==(const DenoiserModel& a, const DenoiserModel& b) {
  if (a.params_.size() != b.params_.size()) return false;
  for (const auto& [name, t] : a.params_) {
    auto it = b.params_.find(name);
    if (it == b.params_.end() || !ad::bitwise_equal(t, it->second)) return false;
  }
  return ad::bitwise_equal(a.vocab_.embeddings(), b.vocab_.embeddings()) &&
         a.vocab_.concept_count() == b.vocab_.concept_count();
}

DenoiserGraph build_denoiser_graph(const ModelConfig& c, const DenoiserGraphOptions& options,
                                   std::unique_ptr<ad::Graph> into) {
  DenoiserGraph dg;
  if (into) dg.graph = std::move(into);
  ad::Graph& g = *dg.graph;
  auto shared_input = [&](const std::string& name) { return g.has_leaf(name) ? g.leaf(name) : g.input(name); };
  auto source = [&](const std::string& name) {
    return options.param_source ? options.param_source(g, name) : shared_input(name);
  };
  const std::string& pre = options.input_prefix;

  dg.x = g.input(pre + "x");
  dg.timesteps = g.input(pre + "t");
  dg.bag = g.input(pre + "bag");
  const ad::NodeId embedding = g.has_leaf(kEmbeddingParam)    ? g.leaf(kEmbeddingParam)
                               : options.trainable_embeddings ? g.param(kEmbeddingParam)
                                                              : g.input(kEmbeddingParam);
  dg.cond = g.matmul(dg.bag, embedding);
  if (options.adversarial_tokens > 0) {
    dg.cond = g.add(dg.cond, g.matmul(g.input(pre + kAttackPool), g.param(pre + kAttackEmbedding)));
  }
  if (options.cond_offset) dg.cond = g.add(dg.cond, g.input(pre + kCondOffset));
  const ad::NodeId temb = g.time_embedding(dg.timesteps, c.time_dim);

  ad::NodeId h = dg.x;
  for (std::size_t b = 0; b < c.blocks; ++b) {
    const std::string p = "block" + std::to_string(b);
    ad::NodeId a = g.dense(h, source(p + ".dense.weight"), source(p + ".dense.bias"));
    a = g.add(a, g.dense(temb, source(p + ".time.weight"), source(p + ".time.bias")));
    const auto film = [&](const std::string& name) {
      return c.film_bias ? g.dense(dg.cond, source(p + ".film." + name + "_weight"), source(p + ".film." + name + "_bias"))
                         : g.matmul(dg.cond, source(p + ".film." + name + "_weight"));
    };
    const ad::NodeId scale = film("scale");
    const ad::NodeId shift = film("shift");
    a = g.add(g.mul(a, g.add_scalar(scale, 1.0)), shift);
    ad::NodeId z = g.silu(a);
    if (options.channel_masks) z = g.mul_columns(z, g.input(pre + keep_input_name(b)));
    dg.activations.push_back(z);
    h = (c.residual && b > 0) ? g.add(h, z) : z;
  }
  dg.output = g.dense(h, source("out.weight"), source("out.bias"));
  g.mark_output("eps", dg.output);
  return dg;
}

ad::Tensor timestep_tensor(std::span<const int> timesteps) {
  ad::Tensor t({timesteps.size()});
  for (std::size_t i = 0; i < timesteps.size(); ++i) t[i] = static_cast<float>(timesteps[i]);
  return t;
}

DenoiserEvaluator::DenoiserEvaluator(const ModelRef& ref) : model_(&ref.model()) {
  const auto& model = ref.model();
  const bool masked = !ref.channels().empty();
  if (masked && ref.channels().size() != model.config().blocks) {
    throw std::invalid_argument("evaluator: channel mask needs one entry per block");
  }
  DenoiserGraphOptions options;
  options.cond_offset = true;
  options.channel_masks = masked;
  dg_ = build_denoiser_graph(model.config(), options);
  session_ = std::make_unique<ad::Session<float>>(*dg_.graph);
  session_->bind_all(model.params());
  session_->bind(kEmbeddingParam, model.vocab().embeddings());
  if (masked) {
    for (std::size_t b = 0; b < model.config().blocks; ++b) {
      if (ref.channels()[b].size() != model.config().hidden) {
        throw std::invalid_argument("evaluator: channel mask width mismatch in block " + std::to_string(b));
      }
      session_->bind(keep_input_name(b), ref.channels()[b]);
    }
  }
}

Conditioning Conditioning::from_prompts(const std::vector<Prompt>& prompts, const Vocabulary& vocab) {
  return Conditioning{pooling_matrix(prompts, vocab), {}};
}

namespace {
ad::Tensor slice_rows(const ad::Tensor& t, std::size_t begin, std::size_t count) {
  if (begin + count > t.rows()) throw std::out_of_range("slice_rows: range exceeds tensor rows");
  const std::size_t cols = t.cols();
  std::vector<float> data(t.values().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                          t.values().begin() + static_cast<std::ptrdiff_t>((begin + count) * cols));
  return ad::Tensor({count, cols}, std::move(data));
}

ad::Tensor repeat_tensor_rows(const ad::Tensor& t, std::size_t times) {
  const std::size_t cols = t.cols();
  ad::Tensor out({t.rows() * times, cols});
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t k = 0; k < times; ++k) {
      std::copy_n(t.data().data() + r * cols, cols, out.data().data() + (r * times + k) * cols);
    }
  }
  return out;
}
}  // namespace

Conditioning Conditioning::slice(std::size_t begin, std::size_t count) const {
  return Conditioning{slice_rows(bag, begin, count), offset.size() ? slice_rows(offset, begin, count) : ad::Tensor{}};
}

Conditioning Conditioning::repeat_rows(std::size_t times) const {
  return Conditioning{repeat_tensor_rows(bag, times), offset.size() ? repeat_tensor_rows(offset, times) : ad::Tensor{}};
}

ad::Tensor DenoiserEvaluator::predict(const ad::Tensor& x, std::span<const int> timesteps, const ad::Tensor& bag) {
  return predict(x, timesteps, Conditioning{bag, {}});
}

ad::Tensor DenoiserEvaluator::predict(const ad::Tensor& x, std::span<const int> timesteps, const Conditioning& cond) {
  const ad::Tensor& bag = cond.bag;
  if (x.rank() != 2 || x.cols() != kImagePixels) {
    throw std::invalid_argument("predict: x must be [B,64], got " + ad::shape_string(x.shape()));
  }
  if (timesteps.size() != x.rows() || bag.rows() != x.rows()) {
    throw std::invalid_argument("predict: batch sizes of x, t and bag differ");
  }
  for (int t : timesteps) {
    if (t < 0 || t > model_->schedule().steps()) throw std::out_of_range("predict: timestep out of range");
  }
  session_->bind("x", x);
  session_->bind("t", timestep_tensor(timesteps));
  session_->bind("bag", bag);
  if (cond.offset.size() != 0) {
    if (cond.offset.shape() != ad::Shape{x.rows(), kEmbeddingDim}) {
      throw std::invalid_argument("predict: conditioning offset must be [B,16], got " +
                                  ad::shape_string(cond.offset.shape()));
    }
    session_->bind(kCondOffset, cond.offset);
  } else {
    session_->bind(kCondOffset, ad::Tensor({x.rows(), kEmbeddingDim}));
  }
  session_->forward();
  return session_->value(dg_.output);
}

ad::Tensor DenoiserEvaluator::predict(const ad::Tensor& x, std::span<const int> timesteps,
                                      const std::vector<Prompt>& prompts) {
  return predict(x, timesteps, pooling_matrix(prompts, model_->vocab()));
}

const ad::Tensor& DenoiserEvaluator::activation(std::size_t block) const {
  return session_->value(dg_.activations.at(block));
}

}  // namespace cerase::diffusion
