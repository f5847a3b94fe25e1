// SPDX-License-Identifier: Apache-2.0
#include "mixformer/model.hpp"

namespace mixformer {

ModelConfig ModelConfig::make(Preset preset, HeadType head, AttentionMode mode, std::size_t templates) {
  ModelConfig c;
  c.preset = preset;
  c.backbone = BackboneConfig::preset(preset, templates, mode);
  c.head = head;
  return c;
}

namespace {
// Independent streams so that swapping the head never changes backbone or
// score-predictor initialisation.
constexpr std::uint64_t kBackboneStream = 1;
constexpr std::uint64_t kHeadStream = 2;
constexpr std::uint64_t kScoreStream = 3;
}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng backbone_rng(derive_seed(seed, kBackboneStream));
  backbone_ = Backbone<T>(config_.backbone, backbone_rng);
  Rng head_rng(derive_seed(seed, kHeadStream));
  const std::size_t dim = config_.backbone.final_dim();
  if (config_.head == HeadType::Corner) {
    corner_ = CornerHead<T>(dim, head_rng);
  } else {
    query_ = QueryHead<T>(dim, head_rng);
  }
  Rng spm_rng(derive_seed(seed, kScoreStream));
  spm_ = ScorePredictor<T>(dim, spm_rng, config_.roi_grid);
}

template <typename T>
Tensor<T> Model<T>::regression_token() const {
  return config_.head == HeadType::Query ? query_.token : Tensor<T>();
}

template <typename T>
Prediction<T> Model<T>::decode(BackboneOutput<T> features) const {
  Prediction<T> p;
  p.box = config_.head == HeadType::Corner ? corner_(features.search_feat) : query_(features.extra_tokens);
  p.features = std::move(features);
  return p;
}

template <typename T>
Prediction<T> Model<T>::forward(const std::vector<Tensor<T>>& templates, const Tensor<T>& search) const {
  return decode(backbone_.forward(templates, search, regression_token()));
}

template <typename T>
TemplateCache<T> Model<T>::encode_templates(const std::vector<Tensor<T>>& templates) const {
  return backbone_.encode_templates(templates);
}

template <typename T>
Prediction<T> Model<T>::forward_cached(const TemplateCache<T>& cache, const Tensor<T>& search) const {
  return decode(backbone_.forward_cached(cache, search, regression_token()));
}

template <typename T>
AttentionDump Model<T>::attention_dump(const std::vector<Tensor<T>>& templates, const Tensor<T>& search,
                                       std::size_t stage, std::size_t block) const {
  const Tensor<T> extra = regression_token();
  const Tensor<T> x = backbone_.block_input(templates, search, stage, block, extra);
  const bool last = stage + 1 == kStageCount;
  const TokenLayout layout = config_.backbone.layout(stage, last && extra.defined() ? 1 : 0);
  return attention_weights_dump(backbone_.stages()[stage].blocks[block], x, layout);
}

template <typename T>
Tensor<T> Model<T>::first_template_tokens(const BackboneOutput<T>& features) const {
  const TokenLayout layout = config_.backbone.layout(kStageCount - 1);
  return narrow(features.template_tokens, 0, 0, layout.tokens_per_template());
}

template <typename T>
Tensor<T> Model<T>::score_logit(const BackboneOutput<T>& features, const BoundingBox& box) const {
  return spm_.logit(features.search_feat, box, first_template_tokens(features));
}

template <typename T>
Tensor<T> Model<T>::score(const BackboneOutput<T>& features, const BoundingBox& box) const {
  return sigmoid(score_logit(features, box));
}

template <typename T>
ParamList<T> Model<T>::localization_parameters() const {
  ParamList<T> out;
  backbone_.collect(out, "backbone");
  if (config_.head == HeadType::Corner) {
    corner_.collect(out, "head.corner");
  } else {
    query_.collect(out, "head.query");
  }
  return out;
}

template <typename T>
ParamList<T> Model<T>::spm_parameters() const {
  ParamList<T> out;
  spm_.collect(out, "spm");
  return out;
}

template <typename T>
ParamList<T> Model<T>::parameters() const {
  ParamList<T> out = localization_parameters();
  spm_.collect(out, "spm");
  return out;
}

template class Model<float>;
template class Model<double>;

}  // namespace mixformer
