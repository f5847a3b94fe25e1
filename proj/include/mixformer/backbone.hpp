// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "mixformer/attention.hpp"

namespace mixformer {

struct StageConfig {
  std::size_t embed_kernel = 3;
  std::size_t embed_stride = 2;
  std::size_t embed_dim = 16;
  std::size_t blocks = 1;
  std::size_t heads = 1;
  double mlp_ratio = 4.0;

  std::size_t embed_padding() const { return embed_kernel / 2; }
};

enum class Preset { MixFormer, MixFormerL, Tiny };

std::string to_string(Preset preset);
Preset parse_preset(std::string_view text);

constexpr std::size_t kStageCount = 3;
constexpr std::size_t kTotalStride = 16;

struct BackboneConfig {
  std::array<StageConfig, kStageCount> stages;
  std::size_t template_h = 32, template_w = 32;
  std::size_t search_h = 64, search_w = 64;
  std::size_t templates = 1;
  AttentionMode mode = AttentionMode::Full;

  static BackboneConfig preset(Preset preset, std::size_t templates = 2,
                               AttentionMode mode = AttentionMode::Full);

  /// Throws ConfigError naming the violated constraint.
  void validate() const;

  /// Grid extents of stage `stage` (0-based) for template and search regions.
  std::size_t stage_template_h(std::size_t stage) const;
  std::size_t stage_template_w(std::size_t stage) const;
  std::size_t stage_search_h(std::size_t stage) const;
  std::size_t stage_search_w(std::size_t stage) const;
  TokenLayout layout(std::size_t stage, std::size_t extra_tokens = 0) const;
  std::size_t final_dim() const { return stages.back().embed_dim; }
};

/// Overlapped convolutional token embedding: conv to D_i channels
/// (pad = kernel/2) followed by layer norm over channels at every position.
template <typename T>
struct PatchEmbed {
  Conv2d<T> conv;
  LayerNorm<T> norm;

  PatchEmbed() = default;
  PatchEmbed(std::size_t in_channels, const StageConfig& stage, Rng& rng);
  /// [c,h,w] -> tokens [h'*w', D_i] in raster order.
  Tensor<T> tokens(const Tensor<T>& map) const;
  /// [c,h,w] -> [D_i,h',w'].
  Tensor<T> operator()(const Tensor<T>& map) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct BackboneStage {
  PatchEmbed<T> embed;
  std::vector<MamBlock<T>> blocks;
};

template <typename T>
struct BackboneOutput {
  Tensor<T> search_feat;      // [D_3, H_s/16, W_s/16]
  Tensor<T> template_tokens;  // [T * H_t/16 * W_t/16, D_3], template order preserved
  Tensor<T> extra_tokens;     // processed trailing tokens [n, D_3]; undefined when none
  std::array<std::size_t, kStageCount> stage_lengths{};
};

/// Template streams of an ASYMMETRIC backbone, valid for a fixed template
/// set: the token sequence entering every block plus the final tokens.
template <typename T>
struct TemplateCache {
  std::vector<std::vector<Tensor<T>>> block_inputs;  // [stage][block]
  Tensor<T> final_tokens;
};

template <typename T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& config, Rng& rng);

  const BackboneConfig& config() const { return config_; }
  const std::array<BackboneStage<T>, kStageCount>& stages() const { return stages_; }

  /// `extra` rows ([n, D_3], may be undefined) are appended to the stage-3
  /// sequence after the search tokens.
  BackboneOutput<T> forward(const std::vector<Tensor<T>>& templates, const Tensor<T>& search,
                            const Tensor<T>& extra = {}) const;

  /// ASYMMETRIC only.
  TemplateCache<T> encode_templates(const std::vector<Tensor<T>>& templates) const;
  /// ASYMMETRIC only; bit-identical to forward() on the cached templates.
  BackboneOutput<T> forward_cached(const TemplateCache<T>& cache, const Tensor<T>& search,
                                   const Tensor<T>& extra = {}) const;

  /// Stage-3 token sequence entering block `block` of stage `stage`, used
  /// for attention inspection.
  Tensor<T> block_input(const std::vector<Tensor<T>>& templates, const Tensor<T>& search, std::size_t stage,
                        std::size_t block, const Tensor<T>& extra = {}) const;

  void collect(ParamList<T>& out, const std::string& prefix) const;

 private:
  void check_inputs(const std::vector<Tensor<T>>* templates, const Tensor<T>* search) const;

  BackboneConfig config_;
  std::array<BackboneStage<T>, kStageCount> stages_;
  LayerNorm<T> final_norm_;
};

}  // namespace mixformer
