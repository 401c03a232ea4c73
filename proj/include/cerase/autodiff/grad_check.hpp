#pragma once

#include <string>
#include <vector>

#include "cerase/autodiff/graph.hpp"
#include "cerase/autodiff/session.hpp"

namespace cerase::ad {

struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-3;
  /// Combine steps h and h/2 to cancel the O(h^2) truncation term.
  bool richardson = true;
  /// Relative error is |a - n| / max(|a|, |n|, floor).
  double floor = 1e-2;
  std::size_t max_params = 10000;
};

/// Compares reverse-mode gradients of `loss` against central finite
/// differences, both evaluated in double precision. `leaves` must bind every
/// leaf of the graph.
GradCheckReport grad_check(const Graph& graph, NodeId loss, const NamedTensors<double>& leaves,
                           const GradCheckOptions& options = {});

}  // namespace cerase::ad
