// SPDX-License-Identifier: Apache-2.0
#include "mixformer/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mixformer {

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "PASS" : "FAIL") << " max rel err " << max_rel_error << " (tol " << tolerance << ")";
  for (const auto& p : params) {
    os << "\n  " << p.name << " [" << p.elements << "] rel " << p.max_rel_error << " at " << p.worst_index
       << " analytic " << p.analytic << " numeric " << p.numeric;
  }
  return os.str();
}

GradCheckReport grad_check(const std::function<TensorD()>& loss, const ParamList<double>& params,
                           const GradCheckOptions& options) {
  AnomalyGuard anomaly;
  for (const auto& p : params) {
    TensorD t = p.tensor;
    t.zero_grad();
  }
  loss().backward();

  GradCheckReport report;
  report.tolerance = options.tolerance;
  for (const auto& p : params) {
    if (!p.trainable) continue;  // buffers are constants of the loss
    TensorD t = p.tensor;
    const std::vector<double> analytic = t.grad();
    ParamGradError entry;
    entry.name = p.name;
    entry.elements = t.numel();
    auto values = t.mutable_data();
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + options.step;
      const double up = loss().item();
      values[i] = original - options.step;
      const double down = loss().item();
      values[i] = original;
      const double numeric = (up - down) / (2.0 * options.step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), options.floor});
      const double err = std::abs(analytic[i] - numeric) / denom;
      if (i == 0 || err > entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.worst_index = i;
        entry.analytic = analytic[i];
        entry.numeric = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.params.push_back(std::move(entry));
  }
  for (const auto& p : params) {
    TensorD t = p.tensor;
    t.zero_grad();
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

}  // namespace mixformer
