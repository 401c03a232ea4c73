#include <string>

#include "cerase/experiments/config.hpp"
#include "doctest.h"

using namespace cerase;
using namespace cerase::experiments;

namespace {

std::size_t error_line(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.line();
  }
  return 0;
}

std::string error_text(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("config: parse sections, comments and values") {
  const auto c = parse_config(
      "# comment\n"
      "[run]\n"
      "seed = 7\n"
      "threads = 2 ; trailing\n"
      "\n"
      "[erase]\n"
      "concept = cross\n"
      "objective = ac\n"
      "anchor = disc\n"
      "scope = all\n"
      "[prune]\n"
      "lr = auto\n"
      "epsilon = 1e-5\n"
      "[attack]\n"
      "timesteps = 5, 25, 50\n");
  CHECK(c.seed == 7);
  CHECK(c.threads == 2);
  CHECK(c.erase.concept_id == 1);
  CHECK(c.erase.objective == erasing::ObjectiveKind::kAc);
  CHECK(c.erase.anchor == 0);
  CHECK(c.erase.scope == diffusion::LayerScope::kAll);
  CHECK_FALSE(c.prune.lr.has_value());
  CHECK(c.prune.epsilon == 1e-5);
  CHECK(c.attack.config.timesteps == std::vector<int>{5, 25, 50});
  // untouched fields keep their defaults
  CHECK(c.eval.frechet_n == ExperimentConfig{}.eval.frechet_n);
}

TEST_CASE("config: errors carry the line number") {
  CHECK(error_line("[run]\nseed = 1\nbogus = 2\n") == 3);
  CHECK(error_text("[run]\nseed = 1\nbogus = 2\n").find("line 3") != std::string::npos);
  CHECK(error_line("[nope]\n") == 1);
  CHECK(error_line("[run]\nseed = 1\nseed = 2\n") == 3);
  CHECK(error_line("seed = 1\n") == 1);
  CHECK(error_line("[run]\n\nseed =\n") == 3);
  CHECK(error_line("[run]\nseed = abc\n") == 2);
  CHECK(error_line("[run]\nseed = -4\n") == 2);
  CHECK(error_line("[erase]\nconcept = dragon\n") == 2);
  CHECK(error_line("[model]\nresidual = maybe\n") == 2);
  CHECK(error_line("[run\n") == 1);
  CHECK_THROWS_AS(load_config("/nonexistent/cerase.ini"), ConfigError);
}

TEST_CASE("config: overrides") {
  ExperimentConfig c;
  apply_override(c, "erase.concept=checker");
  apply_override(c, "prune.iterations = 40");
  CHECK(c.erase.concept_id == 3);
  CHECK(c.prune.iterations == std::size_t{40});
  CHECK_THROWS_AS(apply_override(c, "erase.colour=red"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "seed=3"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "run.seed"), ConfigError);
}

TEST_CASE("config: canonical form and hashes") {
  const ExperimentConfig a;
  // canonical text parses back to the same configuration
  std::string ini;
  std::string section;
  for (std::size_t pos = 0; pos < a.canonical().size();) {
    const auto end = a.canonical().find('\n', pos);
    const std::string line = a.canonical().substr(pos, end - pos);
    pos = end + 1;
    const auto dot = line.find('.');
    const std::string s = line.substr(0, dot);
    if (s != section) {
      ini += "[" + s + "]\n";
      section = s;
    }
    ini += line.substr(dot + 1) + "\n";
  }
  const auto round = parse_config(ini);
  CHECK(round.canonical() == a.canonical());
  CHECK(round.hash() == a.hash());

  ExperimentConfig b;
  apply_override(b, "attack.iterations=20");
  CHECK(b.hash() != a.hash());
  CHECK(b.base_hash() == a.base_hash());
  apply_override(b, "train.steps=100");
  CHECK(b.base_hash() != a.base_hash());

  for (const auto& key : config_keys()) {
    CHECK((a.canonical().find(key + " = ") != std::string::npos) != execution_only(key));
  }
  ExperimentConfig moved;
  apply_override(moved, "run.out=/elsewhere");
  apply_override(moved, "run.threads=4");
  CHECK(moved.hash() == a.hash());
}
