// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mixformer/heads.hpp"

namespace mixformer {

/// Single-head cross-attention with pre-norm and a residual on the query:
/// q + Wo softmax(Wq LN(q) (Wk LN(kv))^T / sqrt(d)) Wv LN(kv).
template <typename T>
struct CrossAttentionBlock {
  LayerNorm<T> norm_q, norm_kv;
  Linear<T> wq, wk, wv, wo;

  CrossAttentionBlock() = default;
  CrossAttentionBlock(std::size_t dim, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& query, const Tensor<T>& kv) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

constexpr std::size_t kRoiGrid = 4;

/// Search features under a box, bilinearly pooled onto a grid x grid
/// lattice: [grid*grid, C]. The box is clamped to [0,1] first.
template <typename T>
Tensor<T> roi_tokens(const Tensor<T>& search_feat, const BoundingBox& box, std::size_t grid = kRoiGrid);

/// Score token -> attends ROI tokens -> attends first-template tokens ->
/// 3-layer perceptron -> sigmoid.
template <typename T>
struct ScorePredictor {
  std::size_t grid = kRoiGrid;
  Tensor<T> token;  // [1, dim]
  CrossAttentionBlock<T> roi_block, template_block;
  Linear<T> fc1, fc2, fc3;

  ScorePredictor() = default;
  ScorePredictor(std::size_t dim, Rng& rng, std::size_t grid = kRoiGrid);

  /// Pre-sigmoid logit, shape [].
  Tensor<T> logit(const Tensor<T>& search_feat, const BoundingBox& box, const Tensor<T>& first_template_tokens) const;
  /// Confidence in (0,1), shape [].
  Tensor<T> operator()(const Tensor<T>& search_feat, const BoundingBox& box,
                       const Tensor<T>& first_template_tokens) const {
    return sigmoid(logit(search_feat, box, first_template_tokens));
  }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

}  // namespace mixformer
