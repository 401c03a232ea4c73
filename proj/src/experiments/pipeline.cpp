#include "cerase/experiments/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "cerase/diffusion/trainer.hpp"
#include "cerase/eval/metrics.hpp"
#include "cerase/io/artifacts.hpp"
#include "cerase/io/files.hpp"

namespace cerase::experiments {

namespace {

struct MethodName {
  Method method;
  const char* name;
};

constexpr MethodName kMethodNames[] = {
    {Method::kBase, "base"},       {Method::kEsd, "esd"},
    {Method::kAc, "ac"},           {Method::kPEsd, "p-esd"},
    {Method::kPAc, "p-ac"},        {Method::kPrePrune, "pre-prune"},
    {Method::kPostPrune, "post-prune"}, {Method::kNpEsd, "np-esd"},
};

std::string loss_csv(const std::vector<double>& curve) {
  std::ostringstream out;
  out.precision(9);
  out << "iteration,loss\n";
  for (std::size_t i = 0; i < curve.size(); ++i) out << i << ',' << curve[i] << '\n';
  return out.str();
}

std::vector<double> parse_loss_csv(const std::string& text) {
  std::vector<double> curve;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma != std::string::npos) curve.push_back(std::stod(line.substr(comma + 1)));
  }
  return curve;
}

diffusion::SamplerConfig eval_sampler(const ExperimentConfig& config) {
  return {.steps = config.model.schedule.steps, .guidance = config.eval.guidance};
}

}  // namespace

std::string to_string(Method method) {
  for (const auto& m : kMethodNames) {
    if (m.method == method) return m.name;
  }
  throw std::invalid_argument("unknown method");
}

Method parse_method(const std::string& name) {
  for (const auto& m : kMethodNames) {
    if (name == m.name) return m.method;
  }
  throw std::invalid_argument("unknown method '" + name + "'");
}

bool is_mask_method(Method method) {
  return method == Method::kPEsd || method == Method::kPAc || method == Method::kPrePrune ||
         method == Method::kPostPrune;
}

Workbench Workbench::open(const ExperimentConfig& config, const fs::path& cache) {
  Workbench wb;
  wb.data_ = diffusion::make_dataset(config.data);
  wb.base_hash_ = config.base_hash();
  wb.base_path_ = cache / ("base-" + wb.base_hash_ + ".ckpt");
  wb.probe_path_ = cache / ("probe-" + wb.base_hash_ + ".bin");
  const fs::path loss_path = cache / ("base-" + wb.base_hash_ + "-loss.csv");

  if (fs::exists(wb.base_path_)) {
    io::Checkpoint ckpt = io::load_checkpoint(wb.base_path_);
    if (ckpt.provenance.value("base_hash", "") != wb.base_hash_) {
      throw std::runtime_error(wb.base_path_.string() + ": cached base model was built from another config");
    }
    wb.base_ = std::move(ckpt.model);
    if (fs::exists(loss_path)) wb.base_loss_ = parse_loss_csv(io::read_file(loss_path));
  } else {
    auto trained = diffusion::train_base(wb.data_, config.model, config.train);
    wb.base_ = std::move(trained.model);
    wb.base_loss_ = std::move(trained.loss_curve);
    io::atomic_write(loss_path, loss_csv(wb.base_loss_));
    io::save_checkpoint(wb.base_path_, {wb.base_, Json{{"base_hash", wb.base_hash_}, {"role", "base"}}});
  }

  if (fs::exists(wb.probe_path_)) {
    wb.probe_ = io::load_probe(wb.probe_path_);
  } else {
    wb.probe_ = eval::train_probe(wb.data_, config.probe);
    io::save_probe(wb.probe_path_, wb.probe_);
  }
  return wb;
}

erasing::EraseObjective objective_for(const ExperimentConfig& config, Method method) {
  const int c = config.erase.concept_id;
  const bool ac = method == Method::kAc || method == Method::kPAc ||
                  ((method == Method::kPrePrune || method == Method::kPostPrune) &&
                   config.erase.objective == erasing::ObjectiveKind::kAc);
  if (ac) {
    const int anchor = config.erase.anchor >= 0 ? config.erase.anchor : (c + 1) % diffusion::kConceptCount;
    return erasing::EraseObjective::ac(c, anchor);
  }
  return erasing::EraseObjective::esd(c, config.erase.guidance);
}

erasing::EraseRunConfig run_config(const ExperimentConfig& config, const erasing::EraseObjective& objective,
                                   erasing::EraseMode mode) {
  auto rc = erasing::default_config(objective, mode);
  if (config.erase.scope) rc.scope = *config.erase.scope;
  rc.max_fillers = config.erase.max_fillers;
  rc.seed = Rng(config.erase.seed).split(config.seed).next_u64();
  if (mode == erasing::EraseMode::kFinetune) {
    rc.optimizer.learning_rate = config.erase.finetune_lr;
    rc.iterations = config.erase.finetune_iterations;
    rc.batch = config.erase.batch;
  } else {
    if (config.prune.lr) rc.optimizer.learning_rate = *config.prune.lr;
    if (config.prune.iterations) rc.iterations = *config.prune.iterations;
    if (config.prune.batch) rc.batch = *config.prune.batch;
    if (config.prune.epsilon) rc.optimizer.epsilon = *config.prune.epsilon;
    rc.temperature = config.prune.temperature;
    rc.threshold = config.prune.threshold;
  }
  return rc;
}

double ErasedModel::pruned_ratio() const { return mask ? mask->pruned_ratio() : 0.0; }

ErasedModel erase(const Workbench& bench, const ExperimentConfig& config, Method method) {
  using erasing::EraseMode;
  ErasedModel out;
  out.method = method;
  out.concept_id = config.erase.concept_id;
  const auto& base = bench.base();
  const auto objective = objective_for(config, method);
  switch (method) {
    case Method::kBase:
      out.model = base;
      break;
    case Method::kEsd:
    case Method::kAc: {
      auto ft = erasing::finetune_erase(base, bench.data(), objective, run_config(config, objective, EraseMode::kFinetune));
      out.model = std::move(ft.model);
      out.loss_curve = std::move(ft.loss_curve);
      break;
    }
    case Method::kPEsd:
    case Method::kPAc: {
      auto pr = pruning::prune_erase(base, bench.data(), objective, run_config(config, objective, EraseMode::kPrune));
      out.model = pruning::apply_mask(base, pr.mask);
      out.loss_curve = pr.report.loss_curve;
      out.mask = std::move(pr.mask);
      out.prune_report = std::move(pr.report);
      break;
    }
    case Method::kPrePrune:
    case Method::kPostPrune: {
      const auto rc = run_config(config, objective, EraseMode::kFinetune);
      auto r = method == Method::kPrePrune
                   ? pruning::preprune_erase(base, bench.data(), config.prune.magnitude_ratio, objective, rc)
                   : pruning::postprune_erase(base, bench.data(), objective, rc, config.prune.magnitude_ratio);
      out.model = std::move(r.model);
      out.mask = std::move(r.mask);
      out.loss_curve = std::move(r.loss_curve);
      break;
    }
    case Method::kNpEsd:
      return neuron_prune_esd(bench, config, erase(bench, config, Method::kEsd));
  }
  return out;
}

std::vector<diffusion::Prompt> test_prompts(const Workbench& bench, const ExperimentConfig& config, int concept_id) {
  const std::size_t n =
      concept_id == config.erase.concept_id ? config.eval.test_prompts : config.eval.retained_prompts;
  return eval::concept_prompts(concept_id, n, bench.base().vocab(), config.eval.prompt_seed);
}

std::vector<diffusion::Prompt> attack_prompts(const Workbench& bench, const ExperimentConfig& config) {
  auto prompts = test_prompts(bench, config, config.erase.concept_id);
  prompts.resize(std::min(prompts.size(), config.attack.prompts));
  return prompts;
}

analysis::ConceptNeurons concept_neurons(const Workbench& bench, const ExperimentConfig& config,
                                         const diffusion::ModelRef& erased, std::size_t k) {
  const int c = config.erase.concept_id;
  const auto prompts = test_prompts(bench, config, c);
  const auto pool = bench.data().heldout.images_of(c);
  const analysis::ProbeOptions options{config.analysis.timesteps, config.analysis.samples, config.threads};
  const Rng rng = Rng(config.seed).split("correlation");
  const auto original = analysis::capture_activations(bench.base(), prompts, pool, options, rng);
  const auto edited = analysis::capture_activations(erased, prompts, pool, options, rng);
  return analysis::identify_concept_neurons(analysis::concept_correlation(original, edited), k);
}

ErasedModel neuron_prune_esd(const Workbench& bench, const ExperimentConfig& config, const ErasedModel& esd) {
  const auto found = concept_neurons(bench, config, esd.ref(), config.analysis.np_per_layer);
  ErasedModel out = esd;
  out.method = Method::kNpEsd;
  out.neurons.clear();
  for (std::size_t b = 0; b < found.channels.size(); ++b) {
    for (const auto ch : found.channels[b]) out.neurons.push_back({b, ch});
  }
  out.channels = pruning::neuron_mask(esd.model, out.neurons);
  return out;
}

attack::SuiteReport run_attacks(const Workbench& bench, const ExperimentConfig& config,
                                const diffusion::ModelRef& model) {
  const attack::AttackTarget target{config.erase.concept_id, &bench.data(), &bench.probe()};
  auto attack_config = config.attack.config;
  attack_config.sampler.steps = config.model.schedule.steps;
  return attack::attack_suite(model, attack_prompts(bench, config), target, attack_config,
                              Rng(config.seed).split("attack").next_u64(), config.threads);
}

double EvalReport::min_retained() const {
  double m = 1.0;
  for (const auto& r : retained) m = std::min(m, r.accuracy);
  return m;
}

double EvalReport::max_retained_drop(const EvalReport& base) const {
  double drop = 0.0;
  for (const auto& r : retained) {
    for (const auto& b : base.retained) {
      if (b.concept_id == r.concept_id) drop = std::max(drop, b.accuracy - r.accuracy);
    }
  }
  return drop;
}

Json EvalReport::to_json() const {
  Json j;
  j["method"] = method;
  j["concept"] = diffusion::family_name(concept_id);
  j["cer"] = cer;
  Json retained_json = Json::object();
  for (const auto& r : retained) retained_json[diffusion::family_name(r.concept_id)] = r.accuracy;
  j["retained_accuracy"] = retained_json;
  j["frechet"] = frechet;
  if (base_frechet > 0.0) {
    j["base_frechet"] = base_frechet;
    j["frechet_ratio"] = frechet_ratio();
  }
  if (unattacked_cer) j["unattacked_cer"] = *unattacked_cer;
  if (robust_cer) j["robust_cer"] = *robust_cer;
  j["pruned_ratio"] = pruned_ratio;
  j["pruned_count"] = pruned_count;
  j["mask_size"] = mask_size;
  j["model_digest"] = model_digest;
  if (!mask_digest.empty()) j["mask_digest"] = mask_digest;
  j["config_hash"] = config_hash;
  return j;
}

EvalReport evaluate(const Workbench& bench, const ExperimentConfig& config, const ErasedModel& erased,
                    const EvalOptions& options, attack::SuiteReport* suite) {
  EvalReport report;
  report.method = to_string(erased.method);
  report.concept_id = erased.concept_id;
  report.config_hash = config.hash();
  report.model_digest = io::hex_digest(io::encode_checkpoint({erased.model, Json::object()}));
  if (erased.mask) {
    report.mask_digest = io::hex_digest(io::encode_mask(*erased.mask));
    report.pruned_ratio = erased.mask->pruned_ratio();
    report.pruned_count = erased.mask->pruned_count();
    report.mask_size = erased.mask->size();
  }

  const auto model = erased.ref();
  const Rng root(config.seed);
  const eval::SampleOptions so{config.eval.samples_per_prompt, eval_sampler(config)};
  const int c = erased.concept_id;
  report.cer = eval::concept_erasure_rate(model, test_prompts(bench, config, c), c, bench.probe(), so,
                                          root.split("cer"));

  std::vector<diffusion::Prompt> retained_prompts;
  std::vector<int> retained_concepts;
  for (int r = 0; r < diffusion::kConceptCount; ++r) {
    if (r == c) continue;
    const auto prompts = test_prompts(bench, config, r);
    report.retained.push_back(
        {r, eval::concept_accuracy(model, prompts, r, bench.probe(), so, root.split("retained").split(r))});
    retained_prompts.insert(retained_prompts.end(), prompts.begin(), prompts.end());
    retained_concepts.push_back(r);
  }

  if (options.quality) {
    report.frechet = eval::frechet_quality(model, retained_prompts, retained_concepts, bench.data(), bench.probe(),
                                           config.eval.frechet_n, root.split("frechet"), eval_sampler(config));
    report.base_frechet = options.base_frechet;
  }
  if (options.attacks) {
    auto s = run_attacks(bench, config, model);
    report.unattacked_cer = s.unattacked_cer;
    report.robust_cer = s.robust_cer;
    if (suite) *suite = std::move(s);
  }
  return report;
}

std::string eval_csv(const std::vector<EvalReport>& reports) {
  std::ostringstream out;
  out.precision(9);
  out << "method,concept,cer,min_retained_accuracy,frechet,frechet_ratio,unattacked_cer,robust_cer,pruned_ratio,"
         "pruned_count,mask_size,model_digest,mask_digest,config_hash\n";
  const auto opt = [](const std::optional<double>& v) {
    std::ostringstream s;
    s.precision(9);
    if (v) s << *v;
    return s.str();
  };
  for (const auto& r : reports) {
    out << r.method << ',' << diffusion::family_name(r.concept_id) << ',' << r.cer << ',' << r.min_retained() << ','
        << r.frechet << ',' << r.frechet_ratio() << ',' << opt(r.unattacked_cer) << ',' << opt(r.robust_cer) << ','
        << r.pruned_ratio << ',' << r.pruned_count << ',' << r.mask_size << ',' << r.model_digest << ','
        << r.mask_digest << ',' << r.config_hash << '\n';
  }
  return out.str();
}

std::vector<analysis::PromptPair> adversarial_pairs(const attack::SuiteReport& suite,
                                                    const diffusion::Vocabulary& vocab, attack::AttackMode mode) {
  std::vector<analysis::PromptPair> pairs;
  const auto collect = [&](bool successful_only) {
    for (const auto& p : suite.prompts) {
      if (successful_only && p.baseline_success) continue;
      for (const auto& a : p.attacks) {
        if (successful_only && !a.success) continue;
        pairs.push_back({diffusion::Conditioning::from_prompts({p.prompt}, vocab),
                         attack::adversarial_conditioning(a.adversarial, vocab, 1, mode)});
      }
    }
  };
  // erased prompts whose attack brought the concept back; every attack when none did
  collect(true);
  if (pairs.empty()) collect(false);
  return pairs;
}

analysis::ScoreGrid sensitivity_scores(const Workbench& bench, const ExperimentConfig& config,
                                       const diffusion::ModelRef& model, const attack::SuiteReport& suite) {
  const auto pairs = adversarial_pairs(suite, model.model().vocab(), config.attack.config.mode);
  const analysis::ProbeOptions options{config.analysis.timesteps, config.analysis.samples, config.threads};
  return analysis::sensitivity(model, pairs, bench.data().heldout.images_of(config.erase.concept_id), options,
                               Rng(config.seed).split("sensitivity"));
}

std::string software_version() { return "cerase 1.0.0"; }

Json RunManifest::to_json() const {
  Json j;
  j["command"] = command;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  j["seeds"] = seeds;
  j["wall_seconds"] = wall_seconds;
  j["version"] = version;
  Json list = Json::array();
  for (const auto& a : artifacts) {
    list.push_back({{"role", a.role}, {"path", a.path}, {"digest", a.digest}, {"bytes", a.bytes}});
  }
  j["artifacts"] = list;
  return j;
}

RunManifest RunManifest::from_json(const Json& j) {
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.seeds = j.value("seeds", Json::object());
  m.wall_seconds = j.value("wall_seconds", 0.0);
  m.version = j.value("version", "");
  for (const auto& a : j.at("artifacts")) {
    m.artifacts.push_back({a.at("role").get<std::string>(), a.at("path").get<std::string>(),
                           a.at("digest").get<std::string>(), a.at("bytes").get<std::uintmax_t>()});
  }
  return m;
}

void RunManifest::verify(const fs::path& run_dir) const {
  for (const auto& a : artifacts) {
    const fs::path p = run_dir / a.path;
    if (!fs::exists(p)) throw std::runtime_error("manifest: missing artifact " + p.string());
    const std::string bytes = io::read_file(p);
    if (io::hex_digest(bytes) != a.digest) throw std::runtime_error("manifest: digest mismatch for " + p.string());
  }
}

RunManifest load_manifest(const fs::path& run_dir) {
  const auto path = run_dir / kManifestFile;
  try {
    return RunManifest::from_json(Json::parse(io::read_file(path)));
  } catch (const Json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

RunWriter::RunWriter(fs::path dir, std::string command, const ExperimentConfig& config)
    : dir_(std::move(dir)), canonical_(config.canonical()), start_(std::chrono::steady_clock::now()) {
  manifest_.command = std::move(command);
  manifest_.config_hash = config.hash();
  manifest_.seed = config.seed;
  manifest_.version = software_version();
}

fs::path RunWriter::write(const std::string& role, const std::string& relative, std::string_view bytes) {
  const fs::path path = dir_ / relative;
  io::atomic_write(path, bytes);
  manifest_.artifacts.push_back({role, relative, io::hex_digest(bytes), bytes.size()});
  return path;
}

void RunWriter::record(const std::string& role, const std::string& relative) {
  const std::string bytes = io::read_file(dir_ / relative);
  manifest_.artifacts.push_back({role, relative, io::hex_digest(bytes), bytes.size()});
}

RunManifest RunWriter::finish() {
  write("config", "config.ini", canonical_);
  manifest_.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  io::atomic_write(dir_ / kManifestFile, manifest_.to_json().dump(2) + "\n");
  return manifest_;
}

}  // namespace cerase::experiments
