#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <utility>

#include "cdepth/graph.hpp"

namespace cdepth {

inline constexpr double kRoundoffUlps = 8.0;

struct LeafGradError {
  double max_rel_error = 0.0;
  Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradReport {
  std::map<std::string, LeafGradError> leaves;
  double step = 0.0;
  double tolerance = 1e-5;
  /// Smallest denominator used in relative errors; see check_gradients.
  double denominator_floor = 1e-8;
  /// Perturbations that moved some relu/clamp/max across its kink; the
  /// central difference is meaningless there, so any crossing fails the check.
  Index kink_crossings = 0;
  bool pass = false;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& [_, e] : leaves) m = std::max(m, e.max_rel_error);
    return m;
  }
};

inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Rounding in the loss itself puts roughly ulps * eps * |f| / h of noise on every
/// central difference. Components smaller than noise / tolerance are compared
/// against that scale instead of their own magnitude.
inline double roundoff_floor(double loss, double h, double tolerance, double ulps = kRoundoffUlps) {
  return std::max(1e-8, ulps * std::numeric_limits<double>::epsilon() * std::abs(loss) / (h * tolerance));
}

/// Central-difference check of d(seed)/d(leaf) for every trainable leaf.
/// Detach nodes are held at their base-point values while perturbing.
/// The graph is left evaluated at the original point.
inline GradReport check_gradients(Graph<double>& graph, Var<double> seed, double h, double tolerance = 1e-5) {
  if (!(h >= 1e-7 && h <= 1e-4)) throw ContractError("check_gradients: step must lie in [1e-7, 1e-4]");
  GradReport report;
  report.step = h;
  report.tolerance = tolerance;

  graph.evaluate();
  graph.backward(seed);
  const auto base_pattern = graph.branch_pattern();
  report.denominator_floor = roundoff_floor(graph.value(seed)[0], h, tolerance);

  const auto loss_at = [&]() {
    graph.evaluate(DetachMode::kHold);
    const double f = graph.value(seed)[0];
    if (!std::isfinite(f)) throw NumericError("check_gradients: non-finite loss at perturbed point");
    return f;
  };

  for (Var<double> leaf : graph.trainable_leaves()) {
    const Tensor<double> analytic = graph.grad(leaf);
    Tensor<double> point = graph.value(leaf);
    LeafGradError err;
    for (Index i = 0; i < point.size(); ++i) {
      const double x0 = point[i];
      point[i] = x0 + h;
      graph.set_leaf(leaf, point);
      const double f_plus = loss_at();
      bool crossed = graph.branch_pattern() != base_pattern;
      point[i] = x0 - h;
      graph.set_leaf(leaf, point);
      const double f_minus = loss_at();
      crossed = crossed || graph.branch_pattern() != base_pattern;
      point[i] = x0;
      if (crossed) ++report.kink_crossings;
      const double numeric = (f_plus - f_minus) / (2.0 * h);
      const double rel = relative_error(analytic[i], numeric, report.denominator_floor);
      if (err.worst_index < 0 || rel > err.max_rel_error) {
        err = {rel, i, analytic[i], numeric};
      }
    }
    graph.set_leaf(leaf, point);
    report.leaves[std::as_const(graph).node(leaf.id).label] = err;
  }
  graph.evaluate();
  graph.backward(seed);
  report.pass = report.kink_crossings == 0 && report.max_rel_error() <= tolerance;
  return report;
}

}  // namespace cdepth
