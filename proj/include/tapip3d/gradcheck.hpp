#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace tapip3d {

/// One differentiable quantity to probe: its values and the analytic
/// gradient slot that `GradCheckCase::backward` fills.
struct GradProbe {
  std::string label;
  std::span<double> value;
  std::span<double> grad;
};

/// A registered op: `loss` evaluates a scalar (typically <r, op(x)> for a
/// fixed random cotangent r); `backward` must leave d loss / d probe in every
/// probe's grad slot.
struct GradCheckCase {
  std::string name;
  std::function<double()> loss;
  std::function<void()> backward;
  std::vector<GradProbe> probes;
};

struct GradCheckReport {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;
  bool passed = false;
  std::string worst_location;
  std::string failure;  // non-empty when probing hit a non-finite value
};

/// Central differences per coordinate; error = |a - n| / max(|a|, |n|, floor).
inline GradCheckReport grad_check(const GradCheckCase& op, double epsilon, double tolerance,
                                  double floor = 1e-6) {
  GradCheckReport report;
  report.name = op.name;
  report.tolerance = tolerance;
  op.backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& probe : op.probes) analytic.emplace_back(probe.grad.begin(), probe.grad.end());

  for (std::size_t p = 0; p < op.probes.size(); ++p) {
    const auto& probe = op.probes[p];
    for (std::size_t i = 0; i < probe.value.size(); ++i) {
      const std::string where = probe.label + "[" + std::to_string(i) + "]";
      const double saved = probe.value[i];
      probe.value[i] = saved + epsilon;
      const double plus = op.loss();
      probe.value[i] = saved - epsilon;
      const double minus = op.loss();
      probe.value[i] = saved;
      const double numeric = (plus - minus) / (2.0 * epsilon);
      const double a = analytic[p][i];
      if (!std::isfinite(plus) || !std::isfinite(minus) || !std::isfinite(a)) {
        report.failure = "non-finite value while probing " + where;
        report.worst_location = where;
        report.passed = false;
        return report;
      }
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++report.checked;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_location = where;
      }
    }
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

}  // namespace tapip3d
