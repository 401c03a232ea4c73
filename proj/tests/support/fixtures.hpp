#pragma once

#include <cmath>
#include <vector>

#include "cerase/diffusion/dataset.hpp"
#include "cerase/diffusion/denoiser.hpp"
#include "cerase/eval/probe.hpp"

namespace cerase::testing {

inline diffusion::ModelConfig tiny_config(bool film_bias = false) {
  diffusion::ModelConfig c;
  c.hidden = 8;
  c.blocks = 2;
  c.time_dim = 4;
  c.film_bias = film_bias;
  return c;
}

inline diffusion::DenoiserModel tiny_model(std::uint64_t seed = 3, bool film_bias = false) {
  Rng rng(seed);
  return diffusion::DenoiserModel::initialize(tiny_config(film_bias), diffusion::kConceptCount, rng);
}

inline diffusion::ConceptDataset small_dataset(std::uint64_t seed = 1) {
  diffusion::DatasetConfig c;
  c.seed = seed;
  c.train_per_concept = 64;
  c.heldout_per_concept = 32;
  c.train_background = 64;
  c.heldout_background = 32;
  return diffusion::make_dataset(c);
}

inline ad::Tensor random_images(std::size_t rows, std::uint64_t seed) {
  Rng rng(seed);
  ad::Tensor x({rows, diffusion::kImagePixels});
  for (auto& v : x.values()) v = static_cast<float>(rng.normal());
  return x;
}

/// Classifier that labels every image `label`.
inline eval::ProbeClassifier constant_probe(int label) {
  using P = eval::ProbeClassifier;
  ad::NamedTensors<float> p;
  p.emplace("fc1.weight", ad::Tensor({diffusion::kImagePixels, P::kHidden}));
  p.emplace("fc1.bias", ad::Tensor({P::kHidden}));
  p.emplace("fc2.weight", ad::Tensor({P::kHidden, P::kFeatureDim}));
  p.emplace("fc2.bias", ad::Tensor({P::kFeatureDim}));
  p.emplace("head.weight", ad::Tensor({P::kFeatureDim, diffusion::kClassCount}));
  ad::Tensor bias({diffusion::kClassCount});
  bias[static_cast<std::size_t>(label)] = 1.0f;
  p.emplace("head.bias", bias);
  return P(std::move(p));
}

/// Straight-line double-precision forward pass written directly from the
/// architecture description, independent of the graph engine.
inline std::vector<std::vector<double>> reference_forward(const diffusion::DenoiserModel& m, const ad::Tensor& x,
                                                          const std::vector<int>& ts,
                                                          const std::vector<diffusion::Prompt>& prompts) {
  const auto& c = m.config();
  const auto& emb = m.vocab().embeddings();
  const auto p = [&](const std::string& name) -> const ad::Tensor& { return m.param(name); };
  const auto dense = [](const std::vector<double>& in, const ad::Tensor& w, const ad::Tensor* b) {
    const std::size_t n = w.cols();
    std::vector<double> out(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      double s = b ? (*b)[j] : 0.0;
      for (std::size_t i = 0; i < in.size(); ++i) s += in[i] * w.at(i, j);
      out[j] = s;
    }
    return out;
  };
  std::vector<std::vector<double>> result;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    std::vector<double> cond(diffusion::kEmbeddingDim, 0.0);
    for (int tok : prompts[r].tokens) {
      for (std::size_t d = 0; d < cond.size(); ++d) cond[d] += emb.at(tok, d) / prompts[r].tokens.size();
    }
    std::vector<double> temb(c.time_dim);
    const std::size_t half = c.time_dim / 2;
    for (std::size_t j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * double(j) / double(half));
      temb[j] = std::sin(ts[r] * freq);
      temb[j + half] = std::cos(ts[r] * freq);
    }
    std::vector<double> h(x.cols());
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = x.at(r, i);
    for (std::size_t b = 0; b < c.blocks; ++b) {
      const std::string pre = "block" + std::to_string(b);
      auto a = dense(h, p(pre + ".dense.weight"), &p(pre + ".dense.bias"));
      const auto tt = dense(temb, p(pre + ".time.weight"), &p(pre + ".time.bias"));
      const auto sc = dense(cond, p(pre + ".film.scale_weight"), c.film_bias ? &p(pre + ".film.scale_bias") : nullptr);
      const auto sh = dense(cond, p(pre + ".film.shift_weight"), c.film_bias ? &p(pre + ".film.shift_bias") : nullptr);
      std::vector<double> z(a.size());
      for (std::size_t j = 0; j < a.size(); ++j) {
        const double v = (a[j] + tt[j]) * (1.0 + sc[j]) + sh[j];
        z[j] = v / (1.0 + std::exp(-v));
      }
      if (c.residual && b > 0) {
        for (std::size_t j = 0; j < z.size(); ++j) h[j] += z[j];
      } else {
        h = z;
      }
    }
    result.push_back(dense(h, p("out.weight"), &p("out.bias")));
  }
  return result;
}

}  // namespace cerase::testing
