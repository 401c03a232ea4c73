#include "cerase/experiments/recipes.hpp"

#include <functional>
#include <sstream>
#include <stdexcept>

#include "cerase/eval/metrics.hpp"
#include "cerase/io/artifacts.hpp"
#include "cerase/io/files.hpp"

namespace cerase::experiments {

namespace {

std::ostringstream csv_stream() {
  std::ostringstream out;
  out.precision(9);
  return out;
}

std::string curve_csv(const std::vector<double>& curve) {
  auto out = csv_stream();
  out << "iteration,loss\n";
  for (std::size_t i = 0; i < curve.size(); ++i) out << i << ',' << curve[i] << '\n';
  return out.str();
}

Json prune_report_json(const pruning::PruneReport& r) {
  Json j;
  j["pruned_ratio"] = r.pruned_ratio;
  j["pruned_count"] = r.pruned_count;
  j["mask_size"] = r.mask_size;
  j["undecided_fraction"] = r.undecided_fraction;
  j["soft_loss"] = r.soft_loss;
  j["hard_loss"] = r.hard_loss;
  j["histogram"] = std::vector<std::size_t>(r.histogram.begin(), r.histogram.end());
  Json layers = Json::object();
  for (const auto& [layer, n] : r.pruned_per_layer) layers[layer] = n;
  j["pruned_per_layer"] = layers;
  return j;
}

std::string json_text(const Json& j) { return j.dump(2) + "\n"; }

EvalReport base_report(const Workbench& bench, const ExperimentConfig& config, bool attacks) {
  ErasedModel base = erase(bench, config, Method::kBase);
  auto report = evaluate(bench, config, base, {.quality = true, .attacks = attacks});
  report.base_frechet = report.frechet;
  return report;
}

void write_suite(RunWriter& w, const std::string& prefix, const attack::SuiteReport& suite) {
  w.write("attack", prefix + "/attacks.csv", attack::suite_csv(suite));
}

RunManifest recipe_base(const ExperimentConfig& config, const fs::path& cache) {
  RunWriter w(config.out, "repro base", config);
  const auto bench = Workbench::open(config, cache);
  w.write("checkpoint", "base/model.ckpt", io::read_file(bench.base_path()));
  w.write("probe", "base/probe.bin", io::read_file(bench.probe_path()));
  w.write("loss", "base/loss.csv", curve_csv(bench.base_loss_curve()));

  const Rng root(config.seed);
  const eval::SampleOptions so{config.eval.samples_per_prompt,
                               {.steps = config.model.schedule.steps, .guidance = config.eval.guidance}};
  Json j;
  j["probe_heldout_accuracy"] = bench.probe().heldout_accuracy();
  Json acc = Json::object();
  auto out = csv_stream();
  out << "concept,conditional_accuracy\n";
  for (int c = 0; c < diffusion::kConceptCount; ++c) {
    const auto prompts = eval::concept_prompts(c, config.eval.test_prompts, bench.base().vocab(), config.eval.prompt_seed);
    const double a = eval::concept_accuracy(bench.base(), prompts, c, bench.probe(), so, root.split("gate").split(c));
    acc[diffusion::family_name(c)] = a;
    out << diffusion::family_name(c) << ',' << a << '\n';
  }
  j["conditional_accuracy"] = acc;
  j["base_hash"] = bench.base_hash();
  j["config_hash"] = config.hash();
  w.write("report", "base/report.json", json_text(j));
  w.write("report", "base/accuracy.csv", out.str());
  return w.finish();
}

RunManifest recipe_methods(const std::string& name, const std::vector<Method>& methods, const ExperimentConfig& config,
                           const fs::path& cache) {
  RunWriter w(config.out, "repro " + name, config);
  const auto bench = Workbench::open(config, cache);
  const auto base = base_report(bench, config, true);
  std::vector<EvalReport> reports{base};
  Json all = Json::array();
  all.push_back(base.to_json());
  for (const Method m : methods) {
    const auto erased = erase(bench, config, m);
    attack::SuiteReport suite;
    const auto report = evaluate(bench, config, erased, {.base_frechet = base.frechet}, &suite);
    write_erased(w, to_string(m), erased, config, bench);
    write_suite(w, to_string(m), suite);
    reports.push_back(report);
    all.push_back(report.to_json());
  }
  w.write("report", "eval.json", json_text(all));
  w.write("report", "eval.csv", eval_csv(reports));
  return w.finish();
}

RunManifest recipe_fig6(const ExperimentConfig& config, const fs::path& cache) {
  RunWriter w(config.out, "repro fig6-sensitivity", config);
  const auto bench = Workbench::open(config, cache);
  const auto esd = erase(bench, config, Method::kEsd);
  const auto pesd = erase(bench, config, Method::kPEsd);
  const auto neurons = concept_neurons(bench, config, esd.ref(), config.analysis.k);

  std::vector<std::pair<std::string, analysis::SensitivitySummary>> curves;
  Json neuron_json = Json::array();
  for (const auto& block : neurons.channels) neuron_json.push_back(block);
  w.write("neurons", "neurons.json", json_text(neuron_json));
  for (const auto* model : {&esd, &pesd}) {
    const auto suite = run_attacks(bench, config, model->ref());
    const auto delta = sensitivity_scores(bench, config, model->ref(), suite);
    curves.emplace_back(to_string(model->method), analysis::sensitivity_report(delta, neurons));
    write_suite(w, to_string(model->method), suite);
    w.write("scores", to_string(model->method) + "/scores.csv", analysis::score_table_csv(nullptr, &delta, neurons));
  }
  w.write("curve", "sensitivity.csv", analysis::sensitivity_csv(curves));
  return w.finish();
}

RunManifest recipe_fig7(const ExperimentConfig& config, const fs::path& cache) {
  RunWriter w(config.out, "repro fig7-prune-compare", config);
  const auto bench = Workbench::open(config, cache);
  auto out = csv_stream();
  out << "method,cer,unattacked_cer,robust_cer,pruned_ratio,pruned_count,mask_size\n";
  for (const Method m : {Method::kEsd, Method::kPrePrune, Method::kPEsd, Method::kPostPrune}) {
    const auto erased = erase(bench, config, m);
    attack::SuiteReport suite;
    const auto r = evaluate(bench, config, erased, {.quality = false}, &suite);
    write_erased(w, to_string(m), erased, config, bench);
    write_suite(w, to_string(m), suite);
    out << r.method << ',' << r.cer << ',' << *r.unattacked_cer << ',' << *r.robust_cer << ',' << r.pruned_ratio << ','
        << r.pruned_count << ',' << r.mask_size << '\n';
  }
  w.write("report", "prune_compare.csv", out.str());
  return w.finish();
}

RunManifest recipe_temperature(const ExperimentConfig& config, const fs::path& cache) {
  RunWriter w(config.out, "repro temperature-sweep", config);
  const auto bench = Workbench::open(config, cache);
  auto out = csv_stream();
  out << "temperature,pruned_ratio,undecided_fraction,soft_loss,hard_loss,cer\n";
  for (const double t : {5.0, 10.0, 15.0}) {
    ExperimentConfig c = config;
    c.prune.temperature = t;
    const auto erased = erase(bench, c, Method::kPEsd);
    const auto r = evaluate(bench, c, erased, {.quality = false, .attacks = false});
    const auto& p = *erased.prune_report;
    out << t << ',' << p.pruned_ratio << ',' << p.undecided_fraction << ',' << p.soft_loss << ',' << p.hard_loss << ','
        << r.cer << '\n';
  }
  w.write("report", "temperature.csv", out.str());
  return w.finish();
}

RunManifest recipe_distribution(const ExperimentConfig& config, const fs::path& cache) {
  RunWriter w(config.out, "repro pruned-weight-distribution", config);
  const auto bench = Workbench::open(config, cache);
  const auto erased = erase(bench, config, Method::kPEsd);
  write_erased(w, "p-esd", erased, config, bench);
  w.write("report", "distribution.csv", distribution_csv(analysis::pruned_weight_distribution(*erased.mask)));
  return w.finish();
}

struct Recipe {
  const char* name;
  std::function<RunManifest(const ExperimentConfig&, const fs::path&)> run;
};

const std::vector<Recipe>& recipes() {
  static const std::vector<Recipe> table = {
      {"base", recipe_base},
      {"erase-table",
       [](const ExperimentConfig& c, const fs::path& cache) {
         return recipe_methods("erase-table", {Method::kEsd, Method::kAc, Method::kPEsd, Method::kPAc}, c, cache);
       }},
      {"fig6-sensitivity", recipe_fig6},
      {"fig7-prune-compare", recipe_fig7},
      {"np-esd",
       [](const ExperimentConfig& c, const fs::path& cache) {
         return recipe_methods("np-esd", {Method::kEsd, Method::kPEsd, Method::kNpEsd}, c, cache);
       }},
      {"temperature-sweep", recipe_temperature},
      {"pruned-weight-distribution", recipe_distribution},
  };
  return table;
}

}  // namespace

std::vector<std::string> recipe_names() {
  std::vector<std::string> names;
  for (const auto& r : recipes()) names.emplace_back(r.name);
  return names;
}

RunManifest run_recipe(const std::string& name, const ExperimentConfig& config, const fs::path& cache) {
  for (const auto& r : recipes()) {
    if (name == r.name) return r.run(config, cache);
  }
  throw std::invalid_argument("unknown recipe '" + name + "'");
}

Json provenance(const ExperimentConfig& config, const ErasedModel& erased, const Workbench& bench) {
  return {{"method", to_string(erased.method)},
          {"concept", diffusion::family_name(erased.concept_id)},
          {"config_hash", config.hash()},
          {"base_hash", bench.base_hash()},
          {"seed", config.seed}};
}

void write_erased(RunWriter& writer, const std::string& prefix, const ErasedModel& erased, const ExperimentConfig& config,
                  const Workbench& bench) {
  Json report;
  report["method"] = to_string(erased.method);
  report["concept"] = diffusion::family_name(erased.concept_id);
  if (!erased.loss_curve.empty()) {
    report["initial_loss"] = erased.loss_curve.front();
    report["final_loss"] = erased.loss_curve.back();
    writer.write("loss", prefix + "/loss.csv", curve_csv(erased.loss_curve));
  }
  if (erased.prune_report) report["prune"] = prune_report_json(*erased.prune_report);
  if (erased.mask) report["pruned_ratio"] = erased.mask->pruned_ratio();
  Json neurons = Json::array();
  for (const auto& n : erased.neurons) neurons.push_back({{"block", n.block}, {"channel", n.channel}});
  if (!erased.neurons.empty()) report["neurons"] = neurons;

  const Json prov = provenance(config, erased, bench);
  if (erased.method == Method::kPEsd || erased.method == Method::kPAc) {
    // theta* stays untouched; only the mask is stored
    writer.write("mask", prefix + "/mask.bin", io::encode_mask(*erased.mask, prov));
  } else {
    writer.write("checkpoint", prefix + "/model.ckpt", io::encode_checkpoint({erased.model, prov}));
    if (erased.mask) writer.write("mask", prefix + "/mask.bin", io::encode_mask(*erased.mask, prov));
  }
  writer.write("report", prefix + "/erase.json", json_text(report));
}

std::string distribution_csv(const analysis::WeightDistribution& d) {
  auto out = csv_stream();
  out << "layer,percent\n";
  for (const auto& [layer, pct] : d.percent) out << layer << ',' << pct << '\n';
  return out.str();
}

}  // namespace cerase::experiments
