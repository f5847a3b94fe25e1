// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mixformer {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised when operand extents are incompatible.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for invalid hyper-parameters, layouts and other static configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an API is called in a state that does not allow it.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised when a NaN or infinity shows up while anomaly detection is active.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or missing files: images, sequences, checkpoints, configs.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct TensorImpl;

/// Receives the gradient of an op's output together with the output values
/// and accumulates vector-Jacobian products into the op's inputs.
template <typename T>
using BackwardFn = std::function<void(std::span<const T>, std::span<const T>)>;

/// One recorded operation.
template <typename T>
struct GradNode {
  const char* name = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  BackwardFn<T> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first contribution arrives
  bool requires_grad = false;
  std::shared_ptr<GradNode<T>> grad_fn;

  /// Gradient buffer to accumulate into, or nullptr for untracked tensors.
  T* grad_buffer();
};

/// Dense row-major tensor handle. Copies alias the same storage; a tensor
/// produced while gradient recording is on keeps its producing op alive so
/// that `backward()` can replay the graph in reverse topological order.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, T value);
  static Tensor scalar(T value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  /// Direct write access; only meant for leaves (initialisation, optimiser).
  std::span<T> mutable_data() { return impl_->data; }
  T item() const;
  T operator[](std::size_t flat_index) const { return impl_->data[flat_index]; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Accumulated gradient; all zeros if nothing was accumulated yet.
  std::vector<T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  /// Reverse-mode sweep from this scalar. Gradients are added, never
  /// overwritten.
  void backward() const;

  /// Same values, no graph history, not tracked.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(impl_->data.begin(), impl_->data.end());
    return Tensor<U>(impl_->shape, std::move(out));
  }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }
  static Tensor from_impl(std::shared_ptr<TensorImpl<T>> impl);

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Makes every op check its output for NaN/inf and throw NumericError
/// naming the op.
class AnomalyGuard {
 public:
  AnomalyGuard();
  ~AnomalyGuard();
  AnomalyGuard(const AnomalyGuard&) = delete;
  AnomalyGuard& operator=(const AnomalyGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();
bool anomaly_mode_enabled();

namespace detail {

/// Builds the result of an op, wiring it into the graph when any input is
/// tracked and recording is on.
template <typename T>
Tensor<T> make_result(const char* name, Shape shape, std::vector<T> values,
                      std::initializer_list<const Tensor<T>*> inputs,
                      BackwardFn<T> backward);

template <typename T>
Tensor<T> make_result(const char* name, Shape shape, std::vector<T> values,
                      const std::vector<Tensor<T>>& inputs,
                      BackwardFn<T> backward);

}  // namespace detail

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace mixformer
