#include "cerase/eval/probe.hpp"

#include <cmath>
#include <stdexcept>

#include "cerase/autodiff/optimizer.hpp"

namespace cerase::eval {

namespace {

struct ProbeGraph {
  ad::Graph graph;
  ad::NodeId features, logits, loss;
};

ProbeGraph build_probe_graph(bool trainable) {
  ProbeGraph pg;
  auto& g = pg.graph;
  auto p = [&](const char* name) { return trainable ? g.param(name) : g.input(name); };
  auto h = g.silu(g.dense(g.input("x"), p("fc1.weight"), p("fc1.bias")));
  pg.features = g.silu(g.dense(h, p("fc2.weight"), p("fc2.bias")));
  pg.logits = g.dense(pg.features, p("head.weight"), p("head.bias"));
  pg.loss = g.softmax_cross_entropy(pg.logits, g.input("labels"));
  return pg;
}

const ProbeGraph& inference_graph() {
  static const ProbeGraph graph = build_probe_graph(false);
  return graph;
}

ad::NamedTensors<float> init_params(Rng& rng) {
  const std::vector<std::pair<std::string, ad::Shape>> shapes{
      {"fc1.weight", {diffusion::kImagePixels, ProbeClassifier::kHidden}},
      {"fc1.bias", {ProbeClassifier::kHidden}},
      {"fc2.weight", {ProbeClassifier::kHidden, ProbeClassifier::kFeatureDim}},
      {"fc2.bias", {ProbeClassifier::kFeatureDim}},
      {"head.weight", {ProbeClassifier::kFeatureDim, diffusion::kClassCount}},
      {"head.bias", {diffusion::kClassCount}}};
  ad::NamedTensors<float> params;
  for (const auto& [name, shape] : shapes) {
    ad::Tensor t(shape);
    if (shape.size() == 2) {
      const double stdev = 1.0 / std::sqrt(static_cast<double>(shape[0]));
      for (auto& v : t.values()) v = static_cast<float>(stdev * rng.normal());
    }
    params.emplace(name, std::move(t));
  }
  return params;
}

ad::Tensor run(const ad::NamedTensors<float>& params, const ad::Tensor& images, bool want_features) {
  const auto& pg = inference_graph();
  ad::Session<float> s(pg.graph);
  s.bind_all(params);
  s.bind("x", images);
  s.bind("labels", ad::Tensor({images.rows()}));
  s.forward();
  return s.value(want_features ? pg.features : pg.logits);
}

}  // namespace

ProbeClassifier::ProbeClassifier(ad::NamedTensors<float> params) : params_(std::move(params)) {}

ad::Tensor ProbeClassifier::logits(const ad::Tensor& images) const { return run(params_, images, false); }
ad::Tensor ProbeClassifier::features(const ad::Tensor& images) const { return run(params_, images, true); }

std::vector<int> ProbeClassifier::predict(const ad::Tensor& images) const {
  const ad::Tensor l = logits(images);
  std::vector<int> out(images.rows());
  for (std::size_t r = 0; r < images.rows(); ++r) {
    int best = 0;
    for (std::size_t c = 1; c < l.cols(); ++c) {
      if (l.at(r, c) > l.at(r, static_cast<std::size_t>(best))) best = static_cast<int>(c);
    }
    out[r] = best;
  }
  return out;
}

double ProbeClassifier::accuracy(const ad::Tensor& images, const std::vector<int>& labels) const {
  if (labels.empty()) return 0.0;
  const auto pred = predict(images);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

ProbeClassifier train_probe(const diffusion::ConceptDataset& data, const ProbeConfig& config) {
  Rng root(config.seed);
  Rng init = root.split("init");
  ad::NamedTensors<float> params = init_params(init);
  ProbeGraph pg = build_probe_graph(true);
  ad::Session<float> session(pg.graph);
  ad::Optimizer opt({.kind = ad::OptimizerKind::kAdam, .learning_rate = config.learning_rate});
  Rng batches = root.split("batches");
  const auto& train = data.train;

  for (std::size_t step = 0; step < config.steps; ++step) {
    ad::Tensor x({config.batch, diffusion::kImagePixels});
    ad::Tensor labels({config.batch});
    for (std::size_t r = 0; r < config.batch; ++r) {
      const auto row = static_cast<std::size_t>(batches.uniform_int(0, static_cast<std::int64_t>(train.size()) - 1));
      for (std::size_t k = 0; k < diffusion::kImagePixels; ++k) {
        x.at(r, k) = static_cast<float>(train.images.at(row, k) + config.augment_noise * batches.normal());
      }
      labels[r] = static_cast<float>(train.labels[row]);
    }
    session.bind_all(params);
    session.bind("x", x);
    session.bind("labels", labels);
    session.forward();
    if (!std::isfinite(session.value(pg.loss).item())) throw std::runtime_error("train_probe: loss diverged");
    opt.step(params, session.backward(pg.loss));
  }

  ProbeClassifier probe(std::move(params));
  const double acc = probe.accuracy(data.heldout.images, data.heldout.labels);
  probe.set_heldout_accuracy(acc);
  if (acc < config.gate) {
    throw std::runtime_error("train_probe: held-out accuracy " + std::to_string(acc) + " below gate " +
                             std::to_string(config.gate));
  }
  return probe;
}

}  // namespace cerase::eval
