#include "cerase/autodiff/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cerase::ad {

GradCheckReport grad_check(const Graph& graph, NodeId loss, const NamedTensors<double>& leaves,
                           const GradCheckOptions& options) {
  Session<double> session(graph);
  session.bind_all(leaves);
  session.forward();
  const NamedTensors<double> analytic = session.backward(loss);

  std::size_t total = 0;
  for (const auto& [name, g] : analytic) total += g.size();
  if (total > options.max_params) {
    throw std::invalid_argument("grad_check: " + std::to_string(total) + " parameters exceeds the limit of " +
                                std::to_string(options.max_params));
  }

  GradCheckReport report;
  report.tolerance = options.tolerance;
  auto eval_loss = [&]() {
    session.forward();
    return session.value(loss).item();
  };

  for (const auto& [name, grad] : analytic) {
    for (std::size_t k = 0; k < grad.size(); ++k) {
      const double saved = session.leaf(name)[k];
      auto central = [&](double h) {
        session.leaf(name)[k] = saved + h;
        const double up = eval_loss();
        session.leaf(name)[k] = saved - h;
        const double down = eval_loss();
        session.leaf(name)[k] = saved;
        return (up - down) / (2.0 * h);
      };
      const double coarse = central(options.step);

      GradCheckEntry e;
      e.param = name;
      e.index = k;
      e.analytic = grad[k];
      if (options.richardson) {
        const double fine = central(0.5 * options.step);
        e.numeric = (4.0 * fine - coarse) / 3.0;
      } else {
        e.numeric = coarse;
      }
      const double denom = std::max({std::abs(e.analytic), std::abs(e.numeric), options.floor});
      e.relative_error = std::abs(e.analytic - e.numeric) / denom;
      report.max_relative_error = std::max(report.max_relative_error, e.relative_error);
      report.entries.push_back(std::move(e));
    }
  }
  report.passed = report.max_relative_error < options.tolerance;
  return report;
}

}  // namespace cerase::ad
