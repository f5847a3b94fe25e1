// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mixformer/ops.hpp"
#include "mixformer/tensor.hpp"

namespace mixformer {

/// Seeded generator whose real-valued draws are computed from the raw 64-bit
/// stream, so sequences do not depend on the standard library's
/// distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
  std::optional<double> spare_;
};

/// Mixes a base seed with a stream id (splitmix64 finaliser).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

/// Tracked leaf filled with U(-bound, bound).
template <typename T>
Tensor<T> uniform_param(const Shape& shape, double bound, Rng& rng);
template <typename T>
Tensor<T> constant_param(const Shape& shape, T value);

template <typename T>
struct Linear {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out], may be undefined

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// Normalises the last axis.
template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;
  T eps = T(1e-5);

  LayerNorm() = default;
  explicit LayerNorm(std::size_t features);
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias, x.rank() - 1, eps); }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct Conv2d {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;    // may be undefined
  Conv2dParams params;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding, Rng& rng,
         bool with_bias = true);
  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, params); }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// Convolution followed by inference-form batch norm and ReLU.
template <typename T>
struct ConvBnRelu {
  Conv2d<T> conv;
  Tensor<T> running_mean;  // buffers: saved, never trained
  Tensor<T> running_var;
  Tensor<T> gain;
  Tensor<T> bias;
  T eps = T(1e-5);

  ConvBnRelu() = default;
  ConvBnRelu(std::size_t in, std::size_t out, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
std::vector<Tensor<T>> trainable_tensors(const ParamList<T>& params);

template <typename T>
std::size_t count_elements(const ParamList<T>& params, bool trainable_only = true);

}  // namespace mixformer
