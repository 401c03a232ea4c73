#pragma once

#include <string>

#include "cerase/autodiff/graph.hpp"
#include "cerase/autodiff/rng.hpp"
#include "cerase/autodiff/session.hpp"

namespace cerase::testing {

/// Small randomized graph for finite-difference property tests: up to three
/// dense layers with a random choice of smooth activations, FiLM-style
/// products, concatenation and a random scalar head.
struct RandomGraph {
  ad::Graph graph;
  ad::NodeId loss;
  ad::NamedTensors<double> leaves;
};

inline ad::Tensor64 random_tensor(Rng& rng, ad::Shape shape, double scale = 1.0) {
  ad::Tensor64 t(std::move(shape));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

inline RandomGraph make_random_graph(std::uint64_t seed) {
  Rng rng(seed);
  RandomGraph rg;
  auto& g = rg.graph;
  const std::size_t batch = static_cast<std::size_t>(rng.uniform_int(1, 3));
  std::size_t width = static_cast<std::size_t>(rng.uniform_int(2, 4));
  ad::NodeId h = g.input("x");
  rg.leaves.emplace("x", random_tensor(rng, {batch, width}));
  const int layers = static_cast<int>(rng.uniform_int(1, 3));
  for (int l = 0; l < layers; ++l) {
    std::size_t out = static_cast<std::size_t>(rng.uniform_int(2, 4));
    const std::string w = "w" + std::to_string(l);
    const std::string b = "b" + std::to_string(l);
    rg.leaves.emplace(w, random_tensor(rng, {width, out}, 0.7));
    rg.leaves.emplace(b, random_tensor(rng, {out}, 0.3));
    h = g.dense(h, g.param(w), g.param(b));
    switch (rng.uniform_int(0, 4)) {
      case 0: h = g.silu(h); break;
      case 1: h = g.sigmoid(g.scale(h, 1.5)); break;
      case 2: {
        const std::string s = "s" + std::to_string(l);
        rg.leaves.emplace(s, random_tensor(rng, {out}));
        h = g.mul_columns(g.silu(h), g.param(s));
        break;
      }
      case 3: h = g.mul(g.silu(h), g.add_scalar(g.sigmoid(h), 0.5)); break;
      default: {
        const std::string c = "c" + std::to_string(l);
        rg.leaves.emplace(c, random_tensor(rng, {batch, 2}));
        h = g.concat(g.silu(h), g.param(c));
        out += 2;
      }
    }
    width = out;
  }
  switch (rng.uniform_int(0, 3)) {
    case 0: rg.loss = g.sum_squares(h); break;
    case 1: rg.loss = g.mean(g.mul(h, h)); break;
    case 2: rg.loss = g.sum(g.sigmoid(h)); break;
    default: {
      ad::Tensor64 labels({batch});
      for (auto& v : labels.values()) v = static_cast<double>(rng.uniform_int(0, 1));
      rg.leaves.emplace("labels", labels);
      rg.loss = g.softmax_cross_entropy(h, g.input("labels"));
    }
  }
  return rg;
}

}  // namespace cerase::testing
