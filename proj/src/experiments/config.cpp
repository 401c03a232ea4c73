#include "cerase/experiments/config.hpp"

#include <charconv>
#include <functional>
#include <sstream>

#include "cerase/io/files.hpp"

namespace cerase::experiments {

ConfigError::ConfigError(std::size_t line, const std::string& message)
    : std::runtime_error(line ? "line " + std::to_string(line) + ": " + message : message), line_(line) {}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Value parsers throw std::invalid_argument; the caller adds the line.
std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument("expected a non-negative integer, got '" + v + "'");
  return out;
}

std::int64_t to_i64(const std::string& v) {
  std::int64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument("expected an integer, got '" + v + "'");
  return out;
}

double to_f64(const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument("expected a number, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("expected true or false, got '" + v + "'");
}

std::vector<int> to_int_list(const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(to_i64(trim(item))));
  if (out.empty()) throw std::invalid_argument("expected a comma-separated list");
  return out;
}

std::string fmt(double v) {
  char buf[32];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string fmt_list(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

int concept_from(const std::string& v) {
  for (int c = 0; c < diffusion::kConceptCount; ++c) {
    if (v == diffusion::family_name(c)) return c;
  }
  const auto id = to_i64(v);
  if (id < 0 || id >= diffusion::kConceptCount) throw std::invalid_argument("unknown concept '" + v + "'");
  return static_cast<int>(id);
}

struct Field {
  std::string name;  // section.key
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
  bool base = false;  // affects the base model or probe
};

template <typename Get>
Field uint_field(std::string name, Get get, bool base = false) {
  return {std::move(name),
          [get](ExperimentConfig& c, const std::string& v) { get(c) = static_cast<std::remove_reference_t<decltype(get(c))>>(to_u64(v)); },
          [get](const ExperimentConfig& c) { return std::to_string(get(const_cast<ExperimentConfig&>(c))); }, base};
}

template <typename Get>
Field double_field(std::string name, Get get, bool base = false) {
  return {std::move(name), [get](ExperimentConfig& c, const std::string& v) { get(c) = to_f64(v); },
          [get](const ExperimentConfig& c) { return fmt(get(const_cast<ExperimentConfig&>(c))); }, base};
}

template <typename Get>
Field bool_field(std::string name, Get get, bool base = false) {
  return {std::move(name), [get](ExperimentConfig& c, const std::string& v) { get(c) = to_bool(v); },
          [get](const ExperimentConfig& c) { return std::string(get(const_cast<ExperimentConfig&>(c)) ? "true" : "false"); },
          base};
}

template <typename Get>
Field optional_double_field(std::string name, Get get) {
  return {std::move(name),
          [get](ExperimentConfig& c, const std::string& v) {
            if (v == "auto") get(c).reset();
            else get(c) = to_f64(v);
          },
          [get](const ExperimentConfig& c) {
            const auto& o = get(const_cast<ExperimentConfig&>(c));
            return o ? fmt(*o) : std::string("auto");
          }};
}

template <typename Get>
Field optional_uint_field(std::string name, Get get) {
  return {std::move(name),
          [get](ExperimentConfig& c, const std::string& v) {
            if (v == "auto") get(c).reset();
            else get(c) = static_cast<std::size_t>(to_u64(v));
          },
          [get](const ExperimentConfig& c) {
            const auto& o = get(const_cast<ExperimentConfig&>(c));
            return o ? std::to_string(*o) : std::string("auto");
          }};
}

const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> table = {
      uint_field("run.seed", [](C& c) -> auto& { return c.seed; }),
      uint_field("run.threads", [](C& c) -> auto& { return c.threads; }),
      {"run.out", [](C& c, const std::string& v) { c.out = v; }, [](const C& c) { return c.out; }},

      uint_field("data.seed", [](C& c) -> auto& { return c.data.seed; }, true),
      uint_field("data.train_per_concept", [](C& c) -> auto& { return c.data.train_per_concept; }, true),
      uint_field("data.heldout_per_concept", [](C& c) -> auto& { return c.data.heldout_per_concept; }, true),
      uint_field("data.train_background", [](C& c) -> auto& { return c.data.train_background; }, true),
      uint_field("data.heldout_background", [](C& c) -> auto& { return c.data.heldout_background; }, true),

      uint_field("model.hidden", [](C& c) -> auto& { return c.model.hidden; }, true),
      uint_field("model.blocks", [](C& c) -> auto& { return c.model.blocks; }, true),
      uint_field("model.time_dim", [](C& c) -> auto& { return c.model.time_dim; }, true),
      bool_field("model.residual", [](C& c) -> auto& { return c.model.residual; }, true),
      bool_field("model.film_bias", [](C& c) -> auto& { return c.model.film_bias; }, true),
      double_field("model.embedding_scale", [](C& c) -> auto& { return c.model.embedding_scale; }, true),
      {"model.steps",
       [](C& c, const std::string& v) { c.model.schedule.steps = static_cast<int>(to_i64(v)); },
       [](const C& c) { return std::to_string(c.model.schedule.steps); }, true},
      double_field("model.beta_start", [](C& c) -> auto& { return c.model.schedule.beta_start; }, true),
      double_field("model.beta_end", [](C& c) -> auto& { return c.model.schedule.beta_end; }, true),

      uint_field("train.steps", [](C& c) -> auto& { return c.train.steps; }, true),
      uint_field("train.batch", [](C& c) -> auto& { return c.train.batch; }, true),
      double_field("train.lr", [](C& c) -> auto& { return c.train.optimizer.learning_rate; }, true),
      double_field("train.background_fraction", [](C& c) -> auto& { return c.train.background_fraction; }, true),
      double_field("train.null_dropout", [](C& c) -> auto& { return c.train.null_dropout; }, true),
      uint_field("train.max_fillers", [](C& c) -> auto& { return c.train.max_fillers; }, true),
      bool_field("train.train_embeddings", [](C& c) -> auto& { return c.train.train_embeddings; }, true),
      double_field("train.final_lr_fraction", [](C& c) -> auto& { return c.train.final_lr_fraction; }, true),
      uint_field("train.seed", [](C& c) -> auto& { return c.train.seed; }, true),

      uint_field("probe.steps", [](C& c) -> auto& { return c.probe.steps; }, true),
      uint_field("probe.batch", [](C& c) -> auto& { return c.probe.batch; }, true),
      double_field("probe.lr", [](C& c) -> auto& { return c.probe.learning_rate; }, true),
      double_field("probe.augment_noise", [](C& c) -> auto& { return c.probe.augment_noise; }, true),
      double_field("probe.gate", [](C& c) -> auto& { return c.probe.gate; }, true),
      uint_field("probe.seed", [](C& c) -> auto& { return c.probe.seed; }, true),

      {"erase.concept", [](C& c, const std::string& v) { c.erase.concept_id = concept_from(v); },
       [](const C& c) { return diffusion::family_name(c.erase.concept_id); }},
      {"erase.objective", [](C& c, const std::string& v) { c.erase.objective = erasing::parse_objective_kind(v); },
       [](const C& c) { return erasing::to_string(c.erase.objective); }},
      double_field("erase.guidance", [](C& c) -> auto& { return c.erase.guidance; }),
      {"erase.anchor",
       [](C& c, const std::string& v) { c.erase.anchor = v == "auto" ? -1 : concept_from(v); },
       [](const C& c) { return c.erase.anchor < 0 ? std::string("auto") : diffusion::family_name(c.erase.anchor); }},
      {"erase.scope",
       [](C& c, const std::string& v) {
         if (v == "auto") c.erase.scope.reset();
         else c.erase.scope = diffusion::parse_layer_scope(v);
       },
       [](const C& c) { return c.erase.scope ? diffusion::to_string(*c.erase.scope) : std::string("auto"); }},
      double_field("erase.lr", [](C& c) -> auto& { return c.erase.finetune_lr; }),
      uint_field("erase.iterations", [](C& c) -> auto& { return c.erase.finetune_iterations; }),
      uint_field("erase.batch", [](C& c) -> auto& { return c.erase.batch; }),
      uint_field("erase.max_fillers", [](C& c) -> auto& { return c.erase.max_fillers; }),
      uint_field("erase.seed", [](C& c) -> auto& { return c.erase.seed; }),

      optional_double_field("prune.lr", [](C& c) -> auto& { return c.prune.lr; }),
      optional_uint_field("prune.iterations", [](C& c) -> auto& { return c.prune.iterations; }),
      optional_double_field("prune.epsilon", [](C& c) -> auto& { return c.prune.epsilon; }),
      optional_uint_field("prune.batch", [](C& c) -> auto& { return c.prune.batch; }),
      double_field("prune.temperature", [](C& c) -> auto& { return c.prune.temperature; }),
      double_field("prune.threshold", [](C& c) -> auto& { return c.prune.threshold; }),
      double_field("prune.magnitude_ratio", [](C& c) -> auto& { return c.prune.magnitude_ratio; }),

      uint_field("attack.prompts", [](C& c) -> auto& { return c.attack.prompts; }),
      uint_field("attack.tokens", [](C& c) -> auto& { return c.attack.config.n_tokens; }),
      uint_field("attack.iterations", [](C& c) -> auto& { return c.attack.config.iterations; }),
      {"attack.optimizer",
       [](C& c, const std::string& v) { c.attack.config.optimizer.kind = ad::parse_optimizer_kind(v); },
       [](const C& c) { return ad::to_string(c.attack.config.optimizer.kind); }},
      double_field("attack.lr", [](C& c) -> auto& { return c.attack.config.optimizer.learning_rate; }),
      double_field("attack.weight_decay", [](C& c) -> auto& { return c.attack.config.optimizer.weight_decay; }),
      {"attack.timesteps", [](C& c, const std::string& v) { c.attack.config.timesteps = to_int_list(v); },
       [](const C& c) { return fmt_list(c.attack.config.timesteps); }},
      uint_field("attack.restarts", [](C& c) -> auto& { return c.attack.config.attacks_per_prompt; }),
      {"attack.mode", [](C& c, const std::string& v) { c.attack.config.mode = attack::parse_attack_mode(v); },
       [](const C& c) { return attack::to_string(c.attack.config.mode); }},
      uint_field("attack.batch", [](C& c) -> auto& { return c.attack.config.batch; }),
      uint_field("attack.samples", [](C& c) -> auto& { return c.attack.config.samples; }),
      uint_field("attack.check_every", [](C& c) -> auto& { return c.attack.config.check_every; }),
      double_field("attack.guidance", [](C& c) -> auto& { return c.attack.config.sampler.guidance; }),

      uint_field("eval.test_prompts", [](C& c) -> auto& { return c.eval.test_prompts; }),
      uint_field("eval.retained_prompts", [](C& c) -> auto& { return c.eval.retained_prompts; }),
      uint_field("eval.samples_per_prompt", [](C& c) -> auto& { return c.eval.samples_per_prompt; }),
      uint_field("eval.frechet_n", [](C& c) -> auto& { return c.eval.frechet_n; }),
      double_field("eval.guidance", [](C& c) -> auto& { return c.eval.guidance; }),
      uint_field("eval.prompt_seed", [](C& c) -> auto& { return c.eval.prompt_seed; }),

      uint_field("analysis.k", [](C& c) -> auto& { return c.analysis.k; }),
      uint_field("analysis.samples", [](C& c) -> auto& { return c.analysis.samples; }),
      {"analysis.timesteps", [](C& c, const std::string& v) { c.analysis.timesteps = to_int_list(v); },
       [](const C& c) { return fmt_list(c.analysis.timesteps); }},
      uint_field("analysis.np_per_layer", [](C& c) -> auto& { return c.analysis.np_per_layer; }),
  };
  return table;
}

const Field* find_field(const std::string& name) {
  for (const auto& f : fields()) {
    if (f.name == name) return &f;
  }
  return nullptr;
}

void set_field(ExperimentConfig& config, const std::string& name, const std::string& value, std::size_t line) {
  const Field* f = find_field(name);
  if (!f) {
    const auto dot = name.find('.');
    const std::string section = name.substr(0, dot);
    bool known_section = false;
    for (const auto& g : fields()) known_section |= g.name.starts_with(section + ".");
    if (!known_section) throw ConfigError(line, "unknown section [" + section + "]");
    throw ConfigError(line, "unknown key '" + name.substr(dot + 1) + "' in section [" + section + "]");
  }
  try {
    f->set(config, value);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(line, name + ": " + e.what());
  }
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.name);
  return keys;
}

bool execution_only(const std::string& name) { return name == "run.out" || name == "run.threads"; }

std::string ExperimentConfig::canonical() const {
  std::string out;
  for (const auto& f : fields()) {
    if (!execution_only(f.name)) out += f.name + " = " + f.get(*this) + "\n";
  }
  return out;
}

std::string ExperimentConfig::hash() const { return io::hex_digest(canonical()); }

std::string ExperimentConfig::base_hash() const {
  std::string out;
  for (const auto& f : fields()) {
    if (f.base) out += f.name + " = " + f.get(*this) + "\n";
  }
  return io::hex_digest(out);
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig config;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  std::size_t line = 0;
  std::vector<std::string> seen;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find_first_of("#;");
    const std::string s = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError(line, "malformed section header '" + s + "'");
      section = trim(s.substr(1, s.size() - 2));
      if (section.empty()) throw ConfigError(line, "empty section name");
      bool known = false;
      for (const auto& f : fields()) known |= f.name.starts_with(section + ".");
      if (!known) throw ConfigError(line, "unknown section [" + section + "]");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(line, "expected 'key = value', got '" + s + "'");
    if (section.empty()) throw ConfigError(line, "key outside any section");
    const std::string key = trim(s.substr(0, eq));
    const std::string value = trim(s.substr(eq + 1));
    if (key.empty()) throw ConfigError(line, "missing key");
    if (value.empty()) throw ConfigError(line, "missing value for '" + key + "'");
    const std::string name = section + "." + key;
    for (const auto& prev : seen) {
      if (prev == name) throw ConfigError(line, "duplicate key '" + key + "' in section [" + section + "]");
    }
    seen.push_back(name);
    set_field(config, name, value, line);
  }
  return config;
}

ExperimentConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const std::runtime_error& e) {
    throw ConfigError(0, e.what());
  }
  try {
    return parse_config(text);
  } catch (const ConfigError& e) {
    throw ConfigError(e.line(), path + ": " + (e.line() ? std::string(e.what()).substr(std::string(e.what()).find(": ") + 2) : e.what()));
  }
}

void apply_override(ExperimentConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError(0, "override must be section.key=value, got '" + assignment + "'");
  const std::string name = trim(assignment.substr(0, eq));
  if (name.find('.') == std::string::npos) throw ConfigError(0, "override key must be section.key, got '" + name + "'");
  set_field(config, name, trim(assignment.substr(eq + 1)), 0);
}

}  // namespace cerase::experiments
