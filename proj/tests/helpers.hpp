// SPDX-License-Identifier: Apache-2.0
// Shared fixtures and independent reference implementations for the tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mixformer/nn.hpp"

namespace mixformer::testing {

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool track = false) {
  std::vector<T> v(mixformer::numel(shape));
  for (T& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  Tensor<T> t(shape, std::move(v));
  if (track) t.set_requires_grad(true);
  return t;
}

template <typename T = double>
Tensor<T> leaf(const Shape& shape, std::vector<T> values) {
  Tensor<T> t(shape, std::move(values));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

/// Scalar attention: for every query row, explicit exp / normalise / weighted
/// sum over keys, in double precision. q [n,d], k [m,d], v [m,dv].
/// Keys with mask[j] != 0 are skipped.
template <typename T>
std::vector<double> brute_force_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                          const std::vector<int>& mask = {}) {
  const std::size_t n = q.dim(0), d = q.dim(1), m = k.dim(0), dv = v.dim(1);
  std::vector<double> out(n * dv, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> logits(m, -INFINITY);
    double peak = -INFINITY;
    for (std::size_t j = 0; j < m; ++j) {
      if (!mask.empty() && mask[j]) continue;
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += double(q[i * d + c]) * double(k[j * d + c]);
      logits[j] = dot / std::sqrt(double(d));
      peak = std::max(peak, logits[j]);
    }
    double z = 0.0;
    std::vector<double> w(m, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
      if (!mask.empty() && mask[j]) continue;
      w[j] = std::exp(logits[j] - peak);
      z += w[j];
    }
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t c = 0; c < dv; ++c) out[i * dv + c] += w[j] / z * double(v[j * dv + c]);
    }
  }
  return out;
}

/// Concatenates rank-2 tensors along rows without autodiff.
template <typename T>
Tensor<T> stack_rows(const Tensor<T>& a, const Tensor<T>& b) {
  std::vector<T> v(a.data().begin(), a.data().end());
  v.insert(v.end(), b.data().begin(), b.data().end());
  return Tensor<T>({a.dim(0) + b.dim(0), a.dim(1)}, std::move(v));
}

/// Fills every bias with small random values. Zero biases on top of dead
/// ReLU inputs put pre-activations exactly on the kink, where a central
/// difference sees half a slope.
template <typename T>
void randomize_biases(const ParamList<T>& params, Rng& rng, double bound = 0.1) {
  for (auto p : params) {
    const std::string& n = p.name;
    if (n.size() < 5 || n.compare(n.size() - 5, 5, ".bias") != 0) continue;
    for (T& v : p.tensor.mutable_data()) v = static_cast<T>(rng.uniform(-bound, bound));
  }
}

}  // namespace mixformer::testing
