// SPDX-License-Identifier: Apache-2.0
#include "mixformer/spm.hpp"

#include <cmath>

namespace mixformer {

template <typename T>
CrossAttentionBlock<T>::CrossAttentionBlock(std::size_t dim, Rng& rng)
    : norm_q(dim), norm_kv(dim), wq(dim, dim, rng), wk(dim, dim, rng), wv(dim, dim, rng), wo(dim, dim, rng) {}

template <typename T>
Tensor<T> CrossAttentionBlock<T>::operator()(const Tensor<T>& query, const Tensor<T>& kv) const {
  const Tensor<T> k_in = norm_kv(kv);
  const Tensor<T> q = wq(norm_q(query));
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(q.dim(1)));
  const Tensor<T> weights = softmax(scale(matmul(q, transpose(wk(k_in))), inv_sqrt_d), 1);
  return add(query, wo(matmul(weights, wv(k_in))));
}

template <typename T>
void CrossAttentionBlock<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  norm_q.collect(out, prefix + ".norm_q");
  norm_kv.collect(out, prefix + ".norm_kv");
  wq.collect(out, prefix + ".wq");
  wk.collect(out, prefix + ".wk");
  wv.collect(out, prefix + ".wv");
  wo.collect(out, prefix + ".wo");
}

template <typename T>
Tensor<T> roi_tokens(const Tensor<T>& search_feat, const BoundingBox& box, std::size_t grid) {
  return roi_align(search_feat, box.clamped().as_array(), grid);
}

template <typename T>
ScorePredictor<T>::ScorePredictor(std::size_t dim, Rng& rng, std::size_t grid_)
    : grid(grid_),
      token(uniform_param<T>({1, dim}, 0.02, rng)),
      roi_block(dim, rng),
      template_block(dim, rng),
      fc1(dim, dim, rng),
      fc2(dim, dim, rng),
      fc3(dim, 1, rng) {}

template <typename T>
Tensor<T> ScorePredictor<T>::logit(const Tensor<T>& search_feat, const BoundingBox& box,
                                   const Tensor<T>& first_template_tokens) const {
  if (search_feat.rank() != 3 || search_feat.dim(0) != token.dim(1)) {
    throw DimensionError("score predictor expects [" + std::to_string(token.dim(1)) + ",h,w] features, got " +
                         to_string(search_feat.shape()));
  }
  Tensor<T> x = roi_block(token, roi_tokens(search_feat, box, grid));
  x = template_block(x, first_template_tokens);
  return reshape(fc3(relu(fc2(relu(fc1(x))))), {});
}

template <typename T>
void ScorePredictor<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".token", token, true});
  roi_block.collect(out, prefix + ".roi_attn");
  template_block.collect(out, prefix + ".template_attn");
  fc1.collect(out, prefix + ".mlp.fc1");
  fc2.collect(out, prefix + ".mlp.fc2");
  fc3.collect(out, prefix + ".mlp.fc3");
}

template struct CrossAttentionBlock<float>;
template struct CrossAttentionBlock<double>;
template struct ScorePredictor<float>;
template struct ScorePredictor<double>;
template Tensor<float> roi_tokens(const Tensor<float>&, const BoundingBox&, std::size_t);
template Tensor<double> roi_tokens(const Tensor<double>&, const BoundingBox&, std::size_t);

}  // namespace mixformer
