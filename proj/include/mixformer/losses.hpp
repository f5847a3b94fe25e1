// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mixformer/heads.hpp"

namespace mixformer {

struct LossConfig {
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;

  void validate() const;
};

/// Intersection over union; 0 when the union is empty.
double iou(const BoundingBox& a, const BoundingBox& b);
/// IoU minus the empty fraction of the enclosing box. When the enclosing
/// box has zero area: 1 for identical boxes, 0 otherwise.
double giou(const BoundingBox& a, const BoundingBox& b);

/// Differentiable GIoU of a predicted box [4] against a fixed target.
template <typename T>
Tensor<T> giou(const Tensor<T>& pred, const BoundingBox& target);

/// lambda_l1 * mean|pred - target| + lambda_giou * (1 - giou). `pred` is
/// used unclamped.
template <typename T>
Tensor<T> loc_loss(const Tensor<T>& pred, const BoundingBox& target, const LossConfig& config = {});

constexpr double kScoreEpsilon = 1e-7;

/// Binary cross-entropy -[y log p + (1-y) log(1-p)], p clamped to
/// [1e-7, 1 - 1e-7].
template <typename T>
Tensor<T> score_loss(const Tensor<T>& p, int label);
double score_loss(double p, int label);

}  // namespace mixformer
