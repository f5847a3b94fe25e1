// SPDX-License-Identifier: Apache-2.0
#include "mixformer/nn.hpp"

#include <cmath>
#include <numbers>

namespace mixformer {

double Rng::normal() {
  if (spare_) {
    const double v = *spare_;
    spare_.reset();
    return v;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  return radius * std::cos(angle);
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw UsageError("Rng::index on an empty range");
  return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename T>
Tensor<T> uniform_param(const Shape& shape, double bound, Rng& rng) {
  std::vector<T> values(numel(shape));
  for (T& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  Tensor<T> t(shape, std::move(values));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> constant_param(const Shape& shape, T value) {
  Tensor<T> t = Tensor<T>::full(shape, value);
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Linear<T>::Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = uniform_param<T>({out, in}, bound, rng);
  if (with_bias) bias = uniform_param<T>({out}, bound, rng);
}

template <typename T>
void Linear<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight, true});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, true});
}

template <typename T>
LayerNorm<T>::LayerNorm(std::size_t features)
    : gain(constant_param<T>({features}, T(1))), bias(constant_param<T>({features}, T(0))) {}

template <typename T>
void LayerNorm<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".gain", gain, true});
  out.push_back({prefix + ".bias", bias, true});
}

template <typename T>
Conv2d<T>::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding,
                  Rng& rng, bool with_bias)
    : params{stride, padding} {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
  weight = uniform_param<T>({out, in, kernel, kernel}, bound, rng);
  if (with_bias) bias = uniform_param<T>({out}, bound, rng);
}

template <typename T>
void Conv2d<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight, true});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, true});
}

template <typename T>
ConvBnRelu<T>::ConvBnRelu(std::size_t in, std::size_t out, Rng& rng)
    : conv(in, out, 3, 1, 1, rng, /*with_bias=*/false),
      running_mean(Tensor<T>::zeros({out})),
      running_var(Tensor<T>::full({out}, T(1))),
      gain(constant_param<T>({out}, T(1))),
      bias(constant_param<T>({out}, T(0))) {
  // He-uniform scale: frozen BN cannot renormalise, so each ReLU layer must
  // preserve activation variance on its own.
  for (T& w : conv.weight.mutable_data()) w *= static_cast<T>(std::sqrt(6.0));
}

template <typename T>
Tensor<T> ConvBnRelu<T>::operator()(const Tensor<T>& x) const {
  return relu(batch_norm_frozen(conv(x), running_mean, running_var, gain, bias, eps));
}

template <typename T>
void ConvBnRelu<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  conv.collect(out, prefix + ".conv");
  out.push_back({prefix + ".bn.gain", gain, true});
  out.push_back({prefix + ".bn.bias", bias, true});
  out.push_back({prefix + ".bn.running_mean", running_mean, false});
  out.push_back({prefix + ".bn.running_var", running_var, false});
}

template <typename T>
std::vector<Tensor<T>> trainable_tensors(const ParamList<T>& params) {
  std::vector<Tensor<T>> out;
  for (const auto& p : params) {
    if (p.trainable) out.push_back(p.tensor);
  }
  return out;
}

template <typename T>
std::size_t count_elements(const ParamList<T>& params, bool trainable_only) {
  std::size_t n = 0;
  for (const auto& p : params) {
    if (p.trainable || !trainable_only) n += p.tensor.numel();
  }
  return n;
}

#define MIXFORMER_INSTANTIATE_NN(T)                                                 \
  template Tensor<T> uniform_param<T>(const Shape&, double, Rng&);                  \
  template Tensor<T> constant_param<T>(const Shape&, T);                            \
  template struct Linear<T>;                                                        \
  template struct LayerNorm<T>;                                                     \
  template struct Conv2d<T>;                                                        \
  template struct ConvBnRelu<T>;                                                    \
  template std::vector<Tensor<T>> trainable_tensors<T>(const ParamList<T>&);       \
  template std::size_t count_elements<T>(const ParamList<T>&, bool);

MIXFORMER_INSTANTIATE_NN(float)
MIXFORMER_INSTANTIATE_NN(double)

}  // namespace mixformer
