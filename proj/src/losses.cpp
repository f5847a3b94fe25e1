// SPDX-License-Identifier: Apache-2.0
#include "mixformer/losses.hpp"

#include <algorithm>
#include <cmath>

namespace mixformer {

void LossConfig::validate() const {
  if (!(lambda_l1 >= 0.0) || !(lambda_giou >= 0.0)) throw ConfigError("loss weights must be >= 0");
}

namespace {

double intersection(const BoundingBox& a, const BoundingBox& b) {
  const double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  return std::max(0.0, w) * std::max(0.0, h);
}

}  // namespace

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double inter = intersection(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double giou(const BoundingBox& a, const BoundingBox& b) {
  const double enclosing = (std::max(a.x1, b.x1) - std::min(a.x0, b.x0)) * (std::max(a.y1, b.y1) - std::min(a.y0, b.y0));
  if (enclosing <= 0.0) return a == b ? 1.0 : 0.0;
  const double inter = intersection(a, b);
  const double uni = a.area() + b.area() - inter;
  const double overlap = uni > 0.0 ? inter / uni : 0.0;
  return overlap - (enclosing - uni) / enclosing;
}

namespace {

template <typename T>
Tensor<T> product2(const Tensor<T>& v) {
  return mul(narrow(v, 0, 0, 1), narrow(v, 0, 1, 1));
}

}  // namespace

template <typename T>
Tensor<T> giou(const Tensor<T>& pred, const BoundingBox& target) {
  if (pred.numel() != 4) throw DimensionError("giou expects a [4] box, got " + to_string(pred.shape()));
  const Tensor<T> p = reshape(pred, {4});
  const Tensor<T> p_lo = narrow(p, 0, 0, 2), p_hi = narrow(p, 0, 2, 2);
  const Tensor<T> g_lo({2}, {T(target.x0), T(target.y0)});
  const Tensor<T> g_hi({2}, {T(target.x1), T(target.y1)});

  const Tensor<T> area_c = product2(sub(maximum(p_hi, g_hi), minimum(p_lo, g_lo)));
  if (!(area_c[0] > T(0))) {
    const bool same = BoundingBox::from_tensor(p) == target;
    return Tensor<T>::scalar(same ? T(1) : T(0));
  }
  const Tensor<T> inter = product2(relu(sub(minimum(p_hi, g_hi), maximum(p_lo, g_lo))));
  const Tensor<T> uni = sub(add_scalar(product2(sub(p_hi, p_lo)), static_cast<T>(target.area())), inter);
  const Tensor<T> overlap = uni[0] > T(0) ? div(inter, uni) : Tensor<T>::zeros({1});
  return reshape(sub(overlap, div(sub(area_c, uni), area_c)), {});
}

template <typename T>
Tensor<T> loc_loss(const Tensor<T>& pred, const BoundingBox& target, const LossConfig& config) {
  const Tensor<T> l1 = mean(abs(sub(reshape(pred, {4}), target.to_tensor<T>())));
  const Tensor<T> giou_term = add_scalar(neg(giou(pred, target)), T(1));
  return add(scale(l1, static_cast<T>(config.lambda_l1)), scale(giou_term, static_cast<T>(config.lambda_giou)));
}

template <typename T>
Tensor<T> score_loss(const Tensor<T>& p, int label) {
  if (label != 0 && label != 1) throw UsageError("score label must be 0 or 1, got " + std::to_string(label));
  const Tensor<T> pc = clamp(p, static_cast<T>(kScoreEpsilon), static_cast<T>(1.0 - kScoreEpsilon));
  return label == 1 ? neg(log(pc)) : neg(log(add_scalar(neg(pc), T(1))));
}

double score_loss(double p, int label) {
  if (label != 0 && label != 1) throw UsageError("score label must be 0 or 1, got " + std::to_string(label));
  const double pc = std::clamp(p, kScoreEpsilon, 1.0 - kScoreEpsilon);
  return label == 1 ? -std::log(pc) : -std::log(1.0 - pc);
}

template Tensor<float> giou(const Tensor<float>&, const BoundingBox&);
template Tensor<double> giou(const Tensor<double>&, const BoundingBox&);
template Tensor<float> loc_loss(const Tensor<float>&, const BoundingBox&, const LossConfig&);
template Tensor<double> loc_loss(const Tensor<double>&, const BoundingBox&, const LossConfig&);
template Tensor<float> score_loss(const Tensor<float>&, int);
template Tensor<double> score_loss(const Tensor<double>&, int);

}  // namespace mixformer
