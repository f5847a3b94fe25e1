// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>

#include "mixformer/backbone.hpp"
#include "mixformer/heads.hpp"
#include "mixformer/spm.hpp"

namespace mixformer {

struct ModelConfig {
  Preset preset = Preset::Tiny;
  BackboneConfig backbone = BackboneConfig::preset(Preset::Tiny);
  HeadType head = HeadType::Corner;
  std::size_t roi_grid = kRoiGrid;

  static ModelConfig make(Preset preset, HeadType head = HeadType::Corner, AttentionMode mode = AttentionMode::Full,
                          std::size_t templates = 2);
  void validate() const { backbone.validate(); }
};

template <typename T>
struct Prediction {
  Tensor<T> box;  // [4] corner form, unclamped
  BackboneOutput<T> features;

  /// Reported box: clamped into the unit square.
  BoundingBox reported() const { return BoundingBox::from_tensor(box).clamped(); }
};

/// Backbone, the configured localisation head and the score predictor.
/// Only the active head owns parameters.
template <typename T>
class Model {
 public:
  Model() = default;
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const Backbone<T>& backbone() const { return backbone_; }
  const CornerHead<T>& corner_head() const { return corner_; }
  const QueryHead<T>& query_head() const { return query_; }
  const ScorePredictor<T>& score_predictor() const { return spm_; }

  Prediction<T> forward(const std::vector<Tensor<T>>& templates, const Tensor<T>& search) const;
  /// ASYMMETRIC only.
  TemplateCache<T> encode_templates(const std::vector<Tensor<T>>& templates) const;
  Prediction<T> forward_cached(const TemplateCache<T>& cache, const Tensor<T>& search) const;

  /// Attention maps of block `block` in stage `stage` (both 0-based).
  AttentionDump attention_dump(const std::vector<Tensor<T>>& templates, const Tensor<T>& search, std::size_t stage,
                               std::size_t block) const;

  /// Stage-3 tokens of the first (static) template.
  Tensor<T> first_template_tokens(const BackboneOutput<T>& features) const;
  /// Confidence of `box` given the features of one forward pass, shape [].
  Tensor<T> score(const BackboneOutput<T>& features, const BoundingBox& box) const;
  Tensor<T> score_logit(const BackboneOutput<T>& features, const BoundingBox& box) const;

  /// Every tensor under its checkpoint name: backbone.*, head.corner.* or
  /// head.query.*, spm.*. Buffers are listed with trainable = false.
  ParamList<T> parameters() const;
  ParamList<T> localization_parameters() const;
  ParamList<T> spm_parameters() const;

 private:
  Prediction<T> decode(BackboneOutput<T> features) const;
  Tensor<T> regression_token() const;

  ModelConfig config_;
  Backbone<T> backbone_;
  CornerHead<T> corner_;
  QueryHead<T> query_;
  ScorePredictor<T> spm_;
};

}  // namespace mixformer
