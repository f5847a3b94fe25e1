// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mixformer/nn.hpp"

namespace mixformer {

struct ParamGradError {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<ParamGradError> params;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;

  std::string summary() const;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor: error = |a - n| / max(|a|, |n|, floor).
  double floor = 1e-3;
};

/// Compares reverse-mode gradients of the scalar `loss` with central
/// differences for every element of every trainable parameter. `loss` must be
/// deterministic; it is re-evaluated twice per element with recording off.
/// Runs under anomaly detection, so a non-finite intermediate throws
/// NumericError naming the op.
GradCheckReport grad_check(const std::function<TensorD()>& loss, const ParamList<double>& params,
                           const GradCheckOptions& options = {});

}  // namespace mixformer
