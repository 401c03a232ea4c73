#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cerase/experiments/recipes.hpp"
#include "cerase/io/artifacts.hpp"
#include "cerase/io/files.hpp"

namespace {

using namespace cerase;
using namespace cerase::experiments;

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> threads;
  std::string cache;
  std::vector<std::string> overrides;
};

void add_common(CLI::App& cmd, CommonOptions& o) {
  cmd.add_option("--config", o.config_path, "Config file (INI)");
  cmd.add_option("--seed", o.seed, "Run seed (overrides CERASE_SEED and the config)");
  cmd.add_option("--out", o.out, "Output run directory (overrides CERASE_OUT and the config)");
  cmd.add_option("--threads", o.threads, "Worker threads");
  cmd.add_option("--cache", o.cache, "Directory caching the base model and probe (default CERASE_CACHE or runs/cache)");
  cmd.add_option("--set", o.overrides, "Config override section.key=value (repeatable)");
}

ExperimentConfig resolve(const CommonOptions& o) {
  ExperimentConfig cfg = o.config_path.empty() ? ExperimentConfig{} : load_config(o.config_path);
  if (const char* s = std::getenv("CERASE_SEED")) apply_override(cfg, std::string("run.seed=") + s);
  if (const char* s = std::getenv("CERASE_OUT")) cfg.out = s;
  for (const auto& ov : o.overrides) apply_override(cfg, ov);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty()) cfg.out = o.out;
  if (o.threads) cfg.threads = *o.threads;
  if (cfg.threads == 0) throw UsageError("--threads must be positive");
  return cfg;
}

fs::path cache_dir(const CommonOptions& o) {
  if (!o.cache.empty()) return o.cache;
  if (const char* s = std::getenv("CERASE_CACHE")) return s;
  return "runs/cache";
}

struct ModelInputs {
  std::string checkpoint;
  std::string mask;
};

void add_model_inputs(CLI::App& cmd, ModelInputs& in) {
  cmd.add_option("--checkpoint", in.checkpoint, "Model checkpoint (default: the base model)");
  cmd.add_option("--mask", in.mask, "Mask applied to the checkpoint");
}

int concept_from_provenance(const io::Json& prov, int fallback) {
  const std::string name = prov.value("concept", "");
  for (int c = 0; c < diffusion::kConceptCount; ++c) {
    if (name == diffusion::family_name(c)) return c;
  }
  return fallback;
}

// Fails before the base model is loaded or trained.
void require_inputs(const ModelInputs& in) {
  for (const auto& path : {in.checkpoint, in.mask}) {
    if (!path.empty() && !fs::is_regular_file(path)) throw std::runtime_error("no such file: " + path);
  }
}

/// Loads the model to evaluate; the concept comes from its provenance when recorded.
ErasedModel load_model(const Workbench& bench, ExperimentConfig& cfg, const ModelInputs& in) {
  ErasedModel m;
  m.method = Method::kBase;
  io::Json prov = io::Json::object();
  if (in.checkpoint.empty()) {
    m.model = bench.base();
  } else {
    auto ckpt = io::load_checkpoint(in.checkpoint);
    m.model = std::move(ckpt.model);
    prov = ckpt.provenance;
  }
  if (!in.mask.empty()) {
    io::Json mask_prov;
    auto mask = io::load_mask(in.mask, &mask_prov);
    mask.check_compatible(m.model);
    m.model = pruning::apply_mask(m.model, mask);
    m.mask = std::move(mask);
    if (in.checkpoint.empty()) prov = mask_prov;
  }
  if (prov.contains("method")) {
    try {
      m.method = parse_method(prov["method"].get<std::string>());
    } catch (const std::invalid_argument&) {
    }
  }
  cfg.erase.concept_id = concept_from_provenance(prov, cfg.erase.concept_id);
  m.concept_id = cfg.erase.concept_id;
  return m;
}

std::string json_text(const io::Json& j) { return j.dump(2) + "\n"; }

int cmd_train_base(const CommonOptions& o) {
  const auto cfg = resolve(o);
  const auto manifest = run_recipe("base", cfg, cache_dir(o));
  std::cout << io::read_file(fs::path(cfg.out) / "base/accuracy.csv");
  std::cout << "wrote " << manifest.artifacts.size() << " artifacts to " << cfg.out << "\n";
  return 0;
}

int cmd_erase(const CommonOptions& o, const std::string& method_name, const std::string& concept_name) {
  auto cfg = resolve(o);
  if (!concept_name.empty()) apply_override(cfg, "erase.concept=" + concept_name);
  Method method;
  try {
    method = parse_method(method_name);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto bench = Workbench::open(cfg, cache_dir(o));
  const auto erased = erase(bench, cfg, method);
  RunWriter w(cfg.out, "erase " + method_name, cfg);
  write_erased(w, ".", erased, cfg, bench);
  w.finish();
  std::cout << method_name << " erased " << diffusion::family_name(erased.concept_id);
  if (erased.mask) std::cout << ", pruned ratio " << erased.pruned_ratio();
  std::cout << "\n";
  return 0;
}

int cmd_attack(const CommonOptions& o, const ModelInputs& in) {
  auto cfg = resolve(o);
  require_inputs(in);
  const auto bench = Workbench::open(cfg, cache_dir(o));
  const auto m = load_model(bench, cfg, in);
  const auto suite = run_attacks(bench, cfg, m.ref());
  io::Json j{{"method", to_string(m.method)},
             {"concept", diffusion::family_name(m.concept_id)},
             {"unattacked_cer", suite.unattacked_cer},
             {"robust_cer", suite.robust_cer},
             {"config_hash", cfg.hash()}};
  RunWriter w(cfg.out, "attack", cfg);
  w.write("attack", "attacks.csv", attack::suite_csv(suite));
  w.write("report", "attack.json", json_text(j));
  w.finish();
  std::cout << "robust CER " << suite.robust_cer << " (unattacked " << suite.unattacked_cer << ")\n";
  return 0;
}

int cmd_analyze(const CommonOptions& o, const ModelInputs& in) {
  auto cfg = resolve(o);
  if (in.checkpoint.empty() && in.mask.empty()) throw UsageError("analyze needs --checkpoint or --mask");
  require_inputs(in);
  const auto bench = Workbench::open(cfg, cache_dir(o));
  const auto m = load_model(bench, cfg, in);

  const auto pool = bench.data().heldout.images_of(m.concept_id);
  const analysis::ProbeOptions options{cfg.analysis.timesteps, cfg.analysis.samples, cfg.threads};
  const auto prompts = test_prompts(bench, cfg, m.concept_id);
  const Rng rng = Rng(cfg.seed).split("correlation");
  const auto rho = analysis::concept_correlation(analysis::capture_activations(bench.base(), prompts, pool, options, rng),
                                                 analysis::capture_activations(m.ref(), prompts, pool, options, rng));
  const auto neurons = analysis::identify_concept_neurons(rho, cfg.analysis.k);
  const auto suite = run_attacks(bench, cfg, m.ref());
  const auto delta = sensitivity_scores(bench, cfg, m.ref(), suite);

  RunWriter w(cfg.out, "analyze", cfg);
  io::Json nj = io::Json::array();
  for (const auto& block : neurons.channels) nj.push_back(block);
  w.write("neurons", "neurons.json", json_text(nj));
  w.write("scores", "scores.csv", analysis::score_table_csv(&rho, &delta, neurons));
  w.write("curve", "sensitivity.csv",
          analysis::sensitivity_csv({{to_string(m.method), analysis::sensitivity_report(delta, neurons)}}));
  w.write("attack", "attacks.csv", attack::suite_csv(suite));
  if (m.mask && m.mask->pruned_count() > 0) {
    w.write("report", "distribution.csv", distribution_csv(analysis::pruned_weight_distribution(*m.mask)));
  }
  w.finish();
  std::cout << "concept neurons: " << neurons.count() << " across " << neurons.channels.size() << " blocks\n";
  return 0;
}

int cmd_eval(const CommonOptions& o, const ModelInputs& in, bool no_attacks) {
  auto cfg = resolve(o);
  require_inputs(in);
  const auto bench = Workbench::open(cfg, cache_dir(o));
  const auto m = load_model(bench, cfg, in);
  const auto base = evaluate(bench, cfg, erase(bench, cfg, Method::kBase), {.attacks = false});
  attack::SuiteReport suite;
  const auto report =
      evaluate(bench, cfg, m, {.quality = true, .attacks = !no_attacks, .base_frechet = base.frechet}, &suite);
  RunWriter w(cfg.out, "eval", cfg);
  w.write("report", "eval.json", json_text(report.to_json()));
  w.write("report", "eval.csv", eval_csv({report}));
  if (!no_attacks) w.write("attack", "attacks.csv", attack::suite_csv(suite));
  w.finish();
  std::cout << eval_csv({report});
  return 0;
}

int cmd_report(const std::string& run) {
  const auto manifest = load_manifest(run);
  manifest.verify(run);
  std::cout << manifest.command << " (config " << manifest.config_hash << ", seed " << manifest.seed << ", "
            << manifest.wall_seconds << " s)\n";
  for (const auto& a : manifest.artifacts) {
    if (a.role != "report" && a.role != "curve") continue;
    if (!a.path.ends_with(".csv")) continue;
    std::cout << "\n# " << a.path << "\n" << io::read_file(fs::path(run) / a.path);
  }
  std::cout << "\nverified " << manifest.artifacts.size() << " artifacts\n";
  return 0;
}

int cmd_repro(const CommonOptions& o, const std::string& recipe) {
  const auto names = recipe_names();
  if (std::find(names.begin(), names.end(), recipe) == names.end()) {
    std::string list;
    for (const auto& n : names) list += " " + n;
    throw UsageError("unknown recipe '" + recipe + "'; available:" + list);
  }
  const auto cfg = resolve(o);
  const auto manifest = run_recipe(recipe, cfg, cache_dir(o));
  std::cout << recipe << ": wrote " << manifest.artifacts.size() << " artifacts to " << cfg.out << " in "
            << manifest.wall_seconds << " s\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept erasing experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", software_version());

  CommonOptions common;
  ModelInputs inputs;
  std::string method = "p-esd", concept_name, run_dir, recipe;
  bool no_attacks = false;

  auto* train = app.add_subcommand("train-base", "Train (or load) the base model and probe, check the quality gate");
  add_common(*train, common);

  auto* erase_cmd = app.add_subcommand("erase", "Erase a concept with one method");
  add_common(*erase_cmd, common);
  erase_cmd->add_option("--method", method, "base|esd|ac|p-esd|p-ac|pre-prune|post-prune|np-esd");
  erase_cmd->add_option("--concept", concept_name, "Concept name or id");

  auto* attack_cmd = app.add_subcommand("attack", "Run the adversarial prompt suite against a model");
  add_common(*attack_cmd, common);
  add_model_inputs(*attack_cmd, inputs);

  auto* analyze = app.add_subcommand("analyze", "Concept neurons and sensitivity of an erased model");
  add_common(*analyze, common);
  add_model_inputs(*analyze, inputs);

  auto* eval_cmd = app.add_subcommand("eval", "CER, retained accuracy, quality and robustness of a model");
  add_common(*eval_cmd, common);
  add_model_inputs(*eval_cmd, inputs);
  eval_cmd->add_flag("--no-attacks", no_attacks, "Skip the attack suite");

  auto* report = app.add_subcommand("report", "Verify a run directory and print its reports");
  report->add_option("--run", run_dir, "Run directory")->required();

  auto* repro = app.add_subcommand("repro", "Run a named recipe");
  add_common(*repro, common);
  repro->add_option("recipe,--recipe", recipe, "Recipe name");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (train->parsed()) return cmd_train_base(common);
    if (erase_cmd->parsed()) return cmd_erase(common, method, concept_name);
    if (attack_cmd->parsed()) return cmd_attack(common, inputs);
    if (analyze->parsed()) return cmd_analyze(common, inputs);
    if (eval_cmd->parsed()) return cmd_eval(common, inputs, no_attacks);
    if (report->parsed()) return cmd_report(run_dir);
    if (repro->parsed()) {
      if (recipe.empty()) throw UsageError("repro needs a recipe name");
      return cmd_repro(common, recipe);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsageError;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}
