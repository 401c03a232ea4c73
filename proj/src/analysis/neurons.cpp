#include "cerase/analysis/neurons.hpp"

#include <algorithm>
#include <cstring>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "cerase/util/parallel.hpp"

namespace cerase::analysis {

double correlation_term(std::span<const double> original, std::span<const double> erased) {
  double a = 0.0, b = 0.0;
  for (double v : original) a += std::abs(v);
  for (double v : erased) b += std::abs(v);
  return a - b;
}

double sensitivity_term(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("sensitivity_term: plane sizes differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
  return acc;
}

ActivationTrace::ActivationTrace(std::vector<int> timesteps, std::size_t blocks, std::size_t channels,
                                 std::size_t records, std::uint64_t inputs_digest)
    : timesteps_(std::move(timesteps)),
      blocks_(blocks),
      channels_(channels),
      records_(records),
      digest_(inputs_digest),
      norms_(timesteps_.size() * blocks * channels * records, 0.0) {}

namespace {

void check_options(const ProbeOptions& options, const diffusion::DenoiserModel& model) {
  if (options.timesteps.empty()) throw std::invalid_argument("analysis: no timesteps");
  for (int t : options.timesteps) {
    if (t < 1 || t > model.schedule().steps()) {
      throw std::invalid_argument("analysis: timestep " + std::to_string(t) + " outside the schedule");
    }
  }
  if (options.samples == 0) throw std::invalid_argument("analysis: samples must be positive");
}

/// x_t rows for one (prompt, timestep) stream.
ad::Tensor draw_xt(const ad::Tensor& pool, int t, std::size_t samples, Rng rng,
                   const diffusion::NoiseSchedule& schedule) {
  if (pool.rank() != 2 || pool.rows() == 0) throw std::invalid_argument("analysis: empty x0 pool");
  const std::size_t width = pool.cols();
  ad::Tensor x0({samples, width});
  for (std::size_t s = 0; s < samples; ++s) {
    const auto row = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.rows()) - 1));
    std::copy_n(pool.data().data() + row * width, width, x0.data().data() + s * width);
  }
  ad::Tensor eps({samples, width});
  for (auto& v : eps.values()) v = static_cast<float>(rng.normal());
  return diffusion::q_sample(x0, t, eps, schedule);
}

std::uint64_t fold(std::uint64_t h, std::uint64_t v) { return Rng::mix(h ^ (v + 0x9e3779b97f4a7c15ULL + (h << 6))); }

std::uint64_t fold_floats(std::uint64_t h, std::span<const float> values) {
  for (float f : values) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    h = fold(h, bits);
  }
  return h;
}

}  // namespace

ActivationTrace capture_activations(const ModelRef& model, const std::vector<Conditioning>& prompts,
                                    const ad::Tensor& x0_pool, const ProbeOptions& options, const Rng& rng) {
  const auto& m = model.model();
  check_options(options, m);
  if (prompts.empty()) throw std::invalid_argument("capture_activations: no prompts");
  for (const auto& p : prompts) {
    if (p.rows() != 1) throw std::invalid_argument("capture_activations: each prompt must be one conditioning row");
  }
  const std::size_t blocks = m.config().blocks;
  const std::size_t hidden = m.config().hidden;
  const std::size_t samples = options.samples;

  std::uint64_t digest = fold(rng.key(), samples);
  for (int t : options.timesteps) digest = fold(digest, static_cast<std::uint64_t>(t));
  for (const auto& p : prompts) digest = fold_floats(fold_floats(digest, p.bag.data()), p.offset.data());
  digest = fold_floats(digest, x0_pool.data());

  ActivationTrace trace(options.timesteps, blocks, hidden, prompts.size() * samples, digest);
  util::parallel_for(prompts.size(), options.threads, [&](std::size_t p) {
    diffusion::DenoiserEvaluator eval(model);
    const Conditioning cond = prompts[p].repeat_rows(samples);
    for (std::size_t ti = 0; ti < options.timesteps.size(); ++ti) {
      const int t = options.timesteps[ti];
      const ad::Tensor xt = draw_xt(x0_pool, t, samples, rng.split(p).split(static_cast<std::uint64_t>(t)), m.schedule());
      const std::vector<int> ts(samples, t);
      eval.predict(xt, ts, cond);
      for (std::size_t b = 0; b < blocks; ++b) {
        const ad::Tensor& z = eval.activation(b);
        for (std::size_t s = 0; s < samples; ++s) {
          for (std::size_t c = 0; c < hidden; ++c) {
            const double plane = z.at(s, c);
            trace.norm(ti, b, p * samples + s, c) = correlation_term(std::span(&plane, 1), {});
          }
        }
      }
    }
  });
  return trace;
}

ActivationTrace capture_activations(const ModelRef& model, const std::vector<diffusion::Prompt>& prompts,
                                    const ad::Tensor& x0_pool, const ProbeOptions& options, const Rng& rng) {
  std::vector<Conditioning> conds;
  conds.reserve(prompts.size());
  for (const auto& p : prompts) conds.push_back(Conditioning::from_prompts({p}, model.model().vocab()));
  return capture_activations(model, conds, x0_pool, options, rng);
}

ScoreGrid::ScoreGrid(std::vector<int> timesteps, std::size_t blocks, std::size_t channels)
    : timesteps_(std::move(timesteps)),
      blocks_(blocks),
      channels_(channels),
      values_(timesteps_.size() * blocks * channels, 0.0) {}

bool ScoreGrid::same_keys(const ScoreGrid& other) const {
  return timesteps_ == other.timesteps_ && blocks_ == other.blocks_ && channels_ == other.channels_;
}

ScoreGrid concept_correlation(const ActivationTrace& original, const ActivationTrace& erased) {
  if (original.timesteps() != erased.timesteps() || original.blocks() != erased.blocks() ||
      original.channels() != erased.channels() || original.records() != erased.records()) {
    throw std::invalid_argument("concept_correlation: trace keys differ");
  }
  if (original.inputs_digest() != erased.inputs_digest()) {
    throw std::invalid_argument("concept_correlation: traces were captured on different inputs");
  }
  ScoreGrid rho(original.timesteps(), original.blocks(), original.channels());
  const auto n = static_cast<double>(original.records());
  for (std::size_t ti = 0; ti < original.timesteps().size(); ++ti) {
    for (std::size_t b = 0; b < original.blocks(); ++b) {
      for (std::size_t c = 0; c < original.channels(); ++c) {
        double acc = 0.0;
        for (std::size_t r = 0; r < original.records(); ++r) acc += original.norm(ti, b, r, c) - erased.norm(ti, b, r, c);
        rho.at(ti, b, c) = acc / n;
      }
    }
  }
  return rho;
}

bool ConceptNeurons::contains(std::size_t block, std::size_t channel) const {
  if (block >= channels.size()) return false;
  return std::binary_search(channels[block].begin(), channels[block].end(), channel);
}

std::size_t ConceptNeurons::count() const {
  std::size_t n = 0;
  for (const auto& c : channels) n += c.size();
  return n;
}

ConceptNeurons identify_concept_neurons(const ScoreGrid& rho, std::size_t k) {
  if (k == 0) throw std::invalid_argument("identify_concept_neurons: k must be at least 1");
  if (k > rho.channels()) {
    throw std::invalid_argument("identify_concept_neurons: k=" + std::to_string(k) + " exceeds " +
                                std::to_string(rho.channels()) + " channels");
  }
  if (rho.timesteps().empty()) throw std::invalid_argument("identify_concept_neurons: empty score grid");
  ConceptNeurons out;
  out.channels.resize(rho.blocks());
  std::vector<double> mean(rho.channels());
  std::vector<std::size_t> order(rho.channels());
  for (std::size_t b = 0; b < rho.blocks(); ++b) {
    for (std::size_t c = 0; c < rho.channels(); ++c) {
      double acc = 0.0;
      for (std::size_t ti = 0; ti < rho.timesteps().size(); ++ti) acc += rho.at(ti, b, c);
      mean[c] = acc / static_cast<double>(rho.timesteps().size());
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) { return mean[a] > mean[c]; });
    out.channels[b].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(out.channels[b].begin(), out.channels[b].end());
  }
  return out;
}

ScoreGrid sensitivity(const ModelRef& model, const std::vector<PromptPair>& pairs, const ad::Tensor& x0_pool,
                      const ProbeOptions& options, const Rng& rng) {
  const auto& m = model.model();
  check_options(options, m);
  if (pairs.empty()) throw std::invalid_argument("sensitivity: no prompt pairs");
  for (const auto& p : pairs) {
    if (p.original.rows() != 1 || p.adversarial.rows() != 1) {
      throw std::invalid_argument("sensitivity: each pair member must be one conditioning row");
    }
  }
  const std::size_t blocks = m.config().blocks;
  const std::size_t hidden = m.config().hidden;
  const std::size_t samples = options.samples;
  const std::size_t nt = options.timesteps.size();

  // Per-pair partial sums, reduced in pair order so the result is independent of threading.
  std::vector<std::vector<double>> partial(pairs.size());
  util::parallel_for(pairs.size(), options.threads, [&](std::size_t p) {
    diffusion::DenoiserEvaluator eval(model);
    const Conditioning a = pairs[p].original.repeat_rows(samples);
    const Conditioning b = pairs[p].adversarial.repeat_rows(samples);
    std::vector<double>& acc = partial[p];
    acc.assign(nt * blocks * hidden, 0.0);
    std::vector<ad::Tensor> za(blocks);
    for (std::size_t ti = 0; ti < nt; ++ti) {
      const int t = options.timesteps[ti];
      const ad::Tensor xt = draw_xt(x0_pool, t, samples, rng.split(p).split(static_cast<std::uint64_t>(t)), m.schedule());
      const std::vector<int> ts(samples, t);
      eval.predict(xt, ts, a);
      for (std::size_t l = 0; l < blocks; ++l) za[l] = eval.activation(l);
      eval.predict(xt, ts, b);
      for (std::size_t l = 0; l < blocks; ++l) {
        const ad::Tensor& zb = eval.activation(l);
        for (std::size_t s = 0; s < samples; ++s) {
          for (std::size_t c = 0; c < hidden; ++c) {
            const double u = za[l].at(s, c), v = zb.at(s, c);
            acc[(ti * blocks + l) * hidden + c] += sensitivity_term(std::span(&u, 1), std::span(&v, 1));
          }
        }
      }
    }
  });

  ScoreGrid delta(options.timesteps, blocks, hidden);
  const double n = static_cast<double>(pairs.size() * samples);
  for (std::size_t ti = 0; ti < nt; ++ti) {
    for (std::size_t l = 0; l < blocks; ++l) {
      for (std::size_t c = 0; c < hidden; ++c) {
        double acc = 0.0;
        for (const auto& part : partial) acc += part[(ti * blocks + l) * hidden + c];
        delta.at(ti, l, c) = acc / n;
      }
    }
  }
  return delta;
}

SensitivitySummary sensitivity_report(const ScoreGrid& delta, const ConceptNeurons& neurons) {
  if (neurons.channels.size() != delta.blocks()) {
    throw std::invalid_argument("sensitivity_report: concept flags cover a different number of blocks");
  }
  SensitivitySummary out;
  out.timesteps = delta.timesteps();
  for (std::size_t ti = 0; ti < delta.timesteps().size(); ++ti) {
    double in = 0.0, other = 0.0;
    std::size_t n_in = 0, n_other = 0;
    for (std::size_t b = 0; b < delta.blocks(); ++b) {
      for (std::size_t c = 0; c < delta.channels(); ++c) {
        if (neurons.contains(b, c)) {
          in += delta.at(ti, b, c);
          ++n_in;
        } else {
          other += delta.at(ti, b, c);
          ++n_other;
        }
      }
    }
    out.concept_mean.push_back(n_in ? in / static_cast<double>(n_in) : 0.0);
    out.other_mean.push_back(n_other ? other / static_cast<double>(n_other) : 0.0);
  }
  return out;
}

std::string sensitivity_csv(const std::vector<std::pair<std::string, SensitivitySummary>>& models) {
  std::ostringstream out;
  out.precision(9);
  out << "model,timestep,concept_mean,other_mean\n";
  for (const auto& [name, s] : models) {
    for (std::size_t i = 0; i < s.timesteps.size(); ++i) {
      out << name << ',' << s.timesteps[i] << ',' << s.concept_mean[i] << ',' << s.other_mean[i] << '\n';
    }
  }
  return out.str();
}

WeightDistribution pruned_weight_distribution(const pruning::ParamMask& mask) {
  if (!mask.has_hard()) throw std::invalid_argument("pruned_weight_distribution: mask has no hard bits");
  WeightDistribution out;
  const auto per_layer = mask.pruned_per_layer();
  for (const auto& [layer, n] : per_layer) out.total_pruned += n;
  if (out.total_pruned == 0) return out;
  for (const auto& [layer, n] : per_layer) {
    out.percent.emplace_back(layer, 100.0 * static_cast<double>(n) / static_cast<double>(out.total_pruned));
  }
  return out;
}

std::string score_table_csv(const ScoreGrid* rho, const ScoreGrid* delta, const ConceptNeurons& neurons) {
  const ScoreGrid* keys = rho ? rho : delta;
  if (!keys) throw std::invalid_argument("score_table_csv: no scores");
  if (rho && delta && !rho->same_keys(*delta)) throw std::invalid_argument("score_table_csv: rho and delta keys differ");
  std::ostringstream out;
  out.precision(9);
  out << "layer,channel,timestep,rho,delta,is_concept\n";
  for (std::size_t b = 0; b < keys->blocks(); ++b) {
    for (std::size_t c = 0; c < keys->channels(); ++c) {
      for (std::size_t ti = 0; ti < keys->timesteps().size(); ++ti) {
        out << "block" << b << ',' << c << ',' << keys->timesteps()[ti] << ',';
        if (rho) out << rho->at(ti, b, c);
        out << ',';
        if (delta) out << delta->at(ti, b, c);
        out << ',' << (neurons.contains(b, c) ? 1 : 0) << '\n';
      }
    }
  }
  return out.str();
}

}  // namespace cerase::analysis
