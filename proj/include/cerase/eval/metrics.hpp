#pragma once

#include <cstdint>
#include <vector>

#include "cerase/diffusion/dataset.hpp"
#include "cerase/diffusion/denoiser.hpp"
#include "cerase/diffusion/sampler.hpp"
#include "cerase/eval/probe.hpp"

namespace cerase::eval {

using diffusion::ModelRef;
using diffusion::Prompt;

/// Concept token plus 0..3 filler tokens, drawn from their own seed so test
/// prompts never coincide with the erase-time prompt stream.
std::vector<Prompt> concept_prompts(int concept_id, std::size_t count, const diffusion::Vocabulary& vocab,
                                    std::uint64_t seed);

struct SampleOptions {
  std::size_t samples_per_prompt = 16;
  diffusion::SamplerConfig sampler;
};

/// Probe labels of `samples_per_prompt` generations for every prompt,
/// prompt-major. Sample j of prompt p uses rng.split(p).split(j).
std::vector<int> sample_labels(const ModelRef& model, const std::vector<Prompt>& prompts, const ProbeClassifier& probe,
                               const SampleOptions& options, const Rng& rng);

/// Fraction of generated images not classified as `concept_id`.
double concept_erasure_rate(const ModelRef& model, const std::vector<Prompt>& prompts, int concept_id,
                            const ProbeClassifier& probe, const SampleOptions& options, const Rng& rng);

/// Fraction of generated images classified as `concept_id`.
double concept_accuracy(const ModelRef& model, const std::vector<Prompt>& prompts, int concept_id,
                        const ProbeClassifier& probe, const SampleOptions& options, const Rng& rng);

/// Frechet distance between Gaussians fit to two feature sets [n,d]:
/// |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)). The matrix square root uses
/// a symmetric eigendecomposition with negative eigenvalues clipped to 0.
/// Throws std::invalid_argument for fewer than two rows, mismatched widths
/// or a set whose covariance is zero.
double frechet_distance(const ad::Tensor& a, const ad::Tensor& b);

/// Frechet distance in probe-feature space between `n` generations from the
/// retained prompts (cycled) and `n` held-out images of the retained
/// concepts. Requires n >= 256.
double frechet_quality(const ModelRef& model, const std::vector<Prompt>& retained_prompts,
                       const std::vector<int>& retained_concepts, const diffusion::ConceptDataset& data,
                       const ProbeClassifier& probe, std::size_t n, const Rng& rng,
                       const diffusion::SamplerConfig& sampler = {});

}  // namespace cerase::eval
