// SPDX-License-Identifier: Apache-2.0
#include "mixformer/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace mixformer {

namespace {
thread_local bool g_grad_enabled = true;
thread_local bool g_anomaly_enabled = false;
}  // namespace

bool grad_mode_enabled() { return g_grad_enabled; }
bool anomaly_mode_enabled() { return g_anomaly_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

AnomalyGuard::AnomalyGuard() : previous_(g_anomaly_enabled) { g_anomaly_enabled = true; }
AnomalyGuard::~AnomalyGuard() { g_anomaly_enabled = previous_; }

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
T* TensorImpl<T>::grad_buffer() {
  if (!requires_grad) return nullptr;
  if (grad.empty()) grad.assign(data.size(), T(0));
  return grad.data();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<TensorImpl<T>>()) {
  if (mixformer::numel(shape) != values.size()) {
    throw DimensionError("tensor of shape " + to_string(shape) + " needs " +
                         std::to_string(mixformer::numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape) {
  return Tensor(shape, std::vector<T>(mixformer::numel(shape), T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value) {
  return Tensor(shape, std::vector<T>(mixformer::numel(shape), value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::from_impl(std::shared_ptr<TensorImpl<T>> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  if (impl_->data.size() != 1) {
    throw UsageError("item() on tensor of shape " + to_string(impl_->shape));
  }
  return impl_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  if (impl_->grad_fn && !flag) {
    throw UsageError("cannot stop tracking a non-leaf tensor; use detach()");
  }
  impl_->requires_grad = flag;
  if (!flag) impl_->grad.clear();
  return *this;
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  if (impl_->grad.empty()) return std::vector<T>(impl_->data.size(), T(0));
  return impl_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  T* g = impl_->grad_buffer();
  if (!g) return {};
  return {g, impl_->data.size()};
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(impl_->shape, impl_->data);
}

template <typename T>
void Tensor<T>::backward() const {
  if (impl_->data.size() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " + to_string(impl_->shape));
  }
  if (!impl_->requires_grad) {
    throw UsageError("backward() on a tensor that is not attached to any tracked input");
  }

  // Post-order DFS: every tensor appears after all of its inputs.
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<const TensorImpl<T>*> visited;
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    const auto& fn = node->grad_fn;
    if (fn && next_child < fn->inputs.size()) {
      TensorImpl<T>* child = fn->inputs[next_child++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  impl_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* node = *it;
    if (node->grad_fn && !node->grad.empty()) {
      node->grad_fn->backward(node->grad, node->data);
    }
  }
}

namespace detail {

template <typename T>
static void check_finite(const char* name, const std::vector<T>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << "non-finite value " << values[i] << " produced by op '" << name << "' at element " << i;
      throw NumericError(os.str());
    }
  }
}

template <typename T>
static Tensor<T> finish(const char* name, Shape shape, std::vector<T> values,
                        std::vector<std::shared_ptr<TensorImpl<T>>> tracked, BackwardFn<T> backward) {
  if (g_anomaly_enabled) check_finite(name, values);
  Tensor<T> out(std::move(shape), std::move(values));
  if (!tracked.empty()) {
    auto node = std::make_shared<GradNode<T>>();
    node->name = name;
    node->inputs = std::move(tracked);
    node->backward = std::move(backward);
    out.impl()->requires_grad = true;
    out.impl()->grad_fn = std::move(node);
  }
  return out;
}

template <typename T>
Tensor<T> make_result(const char* name, Shape shape, std::vector<T> values,
                      std::initializer_list<const Tensor<T>*> inputs, BackwardFn<T> backward) {
  std::vector<std::shared_ptr<TensorImpl<T>>> tracked;
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor<T>* t : inputs) any = any || t->requires_grad();
    if (any) {
      for (const Tensor<T>* t : inputs) tracked.push_back(t->impl());
    }
  }
  return finish(name, std::move(shape), std::move(values), std::move(tracked), std::move(backward));
}

template <typename T>
Tensor<T> make_result(const char* name, Shape shape, std::vector<T> values,
                      const std::vector<Tensor<T>>& inputs, BackwardFn<T> backward) {
  std::vector<std::shared_ptr<TensorImpl<T>>> tracked;
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor<T>& t : inputs) any = any || t.requires_grad();
    if (any) {
      for (const Tensor<T>& t : inputs) tracked.push_back(t.impl());
    }
  }
  return finish(name, std::move(shape), std::move(values), std::move(tracked), std::move(backward));
}

template Tensor<float> make_result(const char*, Shape, std::vector<float>,
                                   std::initializer_list<const Tensor<float>*>, BackwardFn<float>);
template Tensor<double> make_result(const char*, Shape, std::vector<double>,
                                    std::initializer_list<const Tensor<double>*>, BackwardFn<double>);
template Tensor<float> make_result(const char*, Shape, std::vector<float>,
                                   const std::vector<Tensor<float>>&, BackwardFn<float>);
template Tensor<double> make_result(const char*, Shape, std::vector<double>,
                                    const std::vector<Tensor<double>>&, BackwardFn<double>);

}  // namespace detail

template struct TensorImpl<float>;
template struct TensorImpl<double>;
template class Tensor<float>;
template class Tensor<double>;

}  // namespace mixformer
