#include "cerase/eval/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <stdexcept>

namespace cerase::eval {

std::vector<Prompt> concept_prompts(int concept_id, std::size_t count, const diffusion::Vocabulary& vocab,
                                    std::uint64_t seed) {
  Rng rng = Rng(seed).split("test-prompts").split(static_cast<std::uint64_t>(concept_id));
  std::vector<Prompt> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto fillers = static_cast<std::size_t>(rng.uniform_int(0, 3));
    out.push_back(diffusion::concept_prompt(concept_id, fillers, vocab, rng));
  }
  return out;
}

std::vector<int> sample_labels(const ModelRef& model, const std::vector<Prompt>& prompts, const ProbeClassifier& probe,
                               const SampleOptions& options, const Rng& rng) {
  std::vector<int> labels;
  labels.reserve(prompts.size() * options.samples_per_prompt);
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    const std::vector<Prompt> rows(options.samples_per_prompt, prompts[p]);
    const ad::Tensor images = diffusion::sample(model, rows, options.sampler, rng.split(p));
    for (int l : probe.predict(images)) labels.push_back(l);
  }
  return labels;
}

double concept_accuracy(const ModelRef& model, const std::vector<Prompt>& prompts, int concept_id,
                        const ProbeClassifier& probe, const SampleOptions& options, const Rng& rng) {
  if (prompts.empty() || options.samples_per_prompt == 0) throw std::invalid_argument("concept_accuracy: no samples");
  const std::vector<int> labels = sample_labels(model, prompts, probe, options, rng);
  const auto hits = std::count(labels.begin(), labels.end(), concept_id);
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double concept_erasure_rate(const ModelRef& model, const std::vector<Prompt>& prompts, int concept_id,
                            const ProbeClassifier& probe, const SampleOptions& options, const Rng& rng) {
  return 1.0 - concept_accuracy(model, prompts, concept_id, probe, options, rng);
}

namespace {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

Matrix to_matrix(const ad::Tensor& t) {
  Matrix m(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = t.at(r, c);
  }
  return m;
}

Matrix sqrt_psd(const Matrix& s) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(s);
  Vector values = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * values.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const ad::Tensor& a, const ad::Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
    throw std::invalid_argument("frechet_distance: feature sets must be [n,d] with equal d");
  }
  if (a.rows() < 2 || b.rows() < 2) throw std::invalid_argument("frechet_distance: need at least two samples per set");
  const Matrix x = to_matrix(a);
  const Matrix y = to_matrix(b);
  const Vector mu1 = x.colwise().mean();
  const Vector mu2 = y.colwise().mean();
  const Matrix xc = x.rowwise() - mu1.transpose();
  const Matrix yc = y.rowwise() - mu2.transpose();
  const Matrix s1 = (xc.transpose() * xc) / static_cast<double>(x.rows() - 1);
  const Matrix s2 = (yc.transpose() * yc) / static_cast<double>(y.rows() - 1);
  if (s1.cwiseAbs().maxCoeff() == 0.0 || s2.cwiseAbs().maxCoeff() == 0.0) {
    throw std::invalid_argument("frechet_distance: degenerate feature set (zero covariance)");
  }
  // tr((S1 S2)^(1/2)) = tr((R S2 R)^(1/2)) with R = S1^(1/2); R S2 R is symmetric.
  const Matrix r = sqrt_psd(s1);
  const Matrix inner = r * s2 * r;
  const Matrix root = sqrt_psd(0.5 * (inner + inner.transpose()));
  const double value = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * root.trace();
  return std::max(0.0, value);
}

double frechet_quality(const ModelRef& model, const std::vector<Prompt>& retained_prompts,
                       const std::vector<int>& retained_concepts, const diffusion::ConceptDataset& data,
                       const ProbeClassifier& probe, std::size_t n, const Rng& rng,
                       const diffusion::SamplerConfig& sampler) {
  if (n < 256) throw std::invalid_argument("frechet_quality: need n >= 256 samples per side");
  if (retained_prompts.empty() || retained_concepts.empty()) throw std::invalid_argument("frechet_quality: nothing retained");

  std::vector<Prompt> rows;
  rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) rows.push_back(retained_prompts[i % retained_prompts.size()]);
  const ad::Tensor generated = diffusion::sample(model, rows, sampler, rng);

  std::vector<ad::Tensor> pools;
  for (int c : retained_concepts) pools.push_back(data.heldout.images_of(c));
  ad::Tensor reference({n, diffusion::kImagePixels});
  for (std::size_t i = 0; i < n; ++i) {
    const ad::Tensor& pool = pools[i % pools.size()];
    const std::size_t row = (i / pools.size()) % pool.rows();
    std::copy_n(pool.data().data() + row * diffusion::kImagePixels, diffusion::kImagePixels,
                reference.data().data() + i * diffusion::kImagePixels);
  }
  return frechet_distance(probe.features(generated), probe.features(reference));
}

}  // namespace cerase::eval
