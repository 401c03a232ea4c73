#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cerase/experiments/pipeline.hpp"

namespace cerase::experiments {

/// Named experiment recipes runnable by `repro`.
std::vector<std::string> recipe_names();

/// Runs a recipe into config.out; base artifacts are cached under `cache`.
/// Throws std::invalid_argument for an unknown recipe.
RunManifest run_recipe(const std::string& name, const ExperimentConfig& config, const fs::path& cache);

/// Writes the files describing one erased model: checkpoint or mask,
/// loss curve and an erase report. Paths are relative to the run directory.
void write_erased(RunWriter& writer, const std::string& prefix, const ErasedModel& erased, const ExperimentConfig& config,
                  const Workbench& bench);

/// Provenance recorded in checkpoints and masks written by runs.
Json provenance(const ExperimentConfig& config, const ErasedModel& erased, const Workbench& bench);

/// Rows layer,percent of the pruned-weight distribution.
std::string distribution_csv(const analysis::WeightDistribution& d);

}  // namespace cerase::experiments
