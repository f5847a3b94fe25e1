// SPDX-License-Identifier: Apache-2.0
#include "mixformer/backbone.hpp"

namespace mixformer {

std::string to_string(Preset preset) {
  switch (preset) {
    case Preset::MixFormer: return "mixformer";
    case Preset::MixFormerL: return "mixformer_l";
    case Preset::Tiny: return "tiny";
  }
  return "unknown";
}

Preset parse_preset(std::string_view text) {
  if (text == "mixformer") return Preset::MixFormer;
  if (text == "mixformer_l") return Preset::MixFormerL;
  if (text == "tiny") return Preset::Tiny;
  throw ConfigError("unknown preset '" + std::string(text) + "' (expected mixformer|mixformer_l|tiny)");
}

BackboneConfig BackboneConfig::preset(Preset preset, std::size_t templates, AttentionMode mode) {
  BackboneConfig c;
  c.templates = templates;
  c.mode = mode;
  switch (preset) {
    case Preset::MixFormer:
      c.stages = {StageConfig{7, 4, 64, 1, 1, 4.0}, StageConfig{3, 2, 192, 4, 3, 4.0},
                  StageConfig{3, 2, 384, 16, 6, 4.0}};
      c.template_h = c.template_w = 128;
      c.search_h = c.search_w = 320;
      break;
    case Preset::MixFormerL:
      c.stages = {StageConfig{7, 4, 192, 2, 3, 4.0}, StageConfig{3, 2, 768, 2, 12, 4.0},
                  StageConfig{3, 2, 1024, 12, 16, 4.0}};
      c.template_h = c.template_w = 128;
      c.search_h = c.search_w = 320;
      break;
    case Preset::Tiny:
      c.stages = {StageConfig{7, 4, 16, 1, 1, 4.0}, StageConfig{3, 2, 32, 1, 2, 4.0},
                  StageConfig{3, 2, 64, 2, 4, 4.0}};
      c.template_h = c.template_w = 32;
      c.search_h = c.search_w = 64;
      break;
  }
  c.validate();
  return c;
}

void BackboneConfig::validate() const {
  for (std::size_t extent : {template_h, template_w, search_h, search_w}) {
    if (extent == 0 || extent % kTotalStride != 0) {
      throw ConfigError("template/search extents must be positive multiples of " + std::to_string(kTotalStride) +
                        ", got " + std::to_string(extent));
    }
  }
  if (templates == 0) throw ConfigError("at least one template is required");
  for (std::size_t i = 0; i < kStageCount; ++i) {
    const StageConfig& s = stages[i];
    const std::string where = "stage " + std::to_string(i + 1) + ": ";
    const std::size_t want_kernel = i == 0 ? 7 : 3, want_stride = i == 0 ? 4 : 2;
    if (s.embed_kernel != want_kernel || s.embed_stride != want_stride) {
      throw ConfigError(where + "embedding must be kernel " + std::to_string(want_kernel) + " stride " +
                        std::to_string(want_stride));
    }
    if (s.embed_dim == 0 || s.heads == 0 || s.embed_dim % s.heads != 0) {
      throw ConfigError(where + "dim " + std::to_string(s.embed_dim) + " not divisible by " +
                        std::to_string(s.heads) + " heads");
    }
    if (s.blocks == 0) throw ConfigError(where + "needs at least one block");
    if (!(s.mlp_ratio >= 1.0)) throw ConfigError(where + "mlp ratio must be >= 1");
  }
}

namespace {
std::size_t stage_extent(const BackboneConfig& c, std::size_t input, std::size_t stage) {
  std::size_t extent = input;
  for (std::size_t i = 0; i <= stage; ++i) {
    const StageConfig& s = c.stages[i];
    extent = conv_output_extent(extent, s.embed_kernel, s.embed_stride, s.embed_padding());
  }
  return extent;
}
}  // namespace

std::size_t BackboneConfig::stage_template_h(std::size_t stage) const { return stage_extent(*this, template_h, stage); }
std::size_t BackboneConfig::stage_template_w(std::size_t stage) const { return stage_extent(*this, template_w, stage); }
std::size_t BackboneConfig::stage_search_h(std::size_t stage) const { return stage_extent(*this, search_h, stage); }
std::size_t BackboneConfig::stage_search_w(std::size_t stage) const { return stage_extent(*this, search_w, stage); }

TokenLayout BackboneConfig::layout(std::size_t stage, std::size_t extra_tokens) const {
  TokenLayout l;
  l.templates = templates;
  l.template_h = stage_template_h(stage);
  l.template_w = stage_template_w(stage);
  l.search_h = stage_search_h(stage);
  l.search_w = stage_search_w(stage);
  l.dim = stages[stage].embed_dim;
  l.extra_tokens = extra_tokens;
  return l;
}

template <typename T>
PatchEmbed<T>::PatchEmbed(std::size_t in_channels, const StageConfig& stage, Rng& rng)
    : conv(in_channels, stage.embed_dim, stage.embed_kernel, stage.embed_stride, stage.embed_padding(), rng),
      norm(stage.embed_dim) {}

template <typename T>
Tensor<T> PatchEmbed<T>::tokens(const Tensor<T>& map) const {
  return norm(map_to_tokens(conv(map)));
}

template <typename T>
Tensor<T> PatchEmbed<T>::operator()(const Tensor<T>& map) const {
  const std::size_t h = conv_output_extent(map.dim(1), conv.weight.dim(2), conv.params.stride, conv.params.padding);
  const std::size_t w = conv_output_extent(map.dim(2), conv.weight.dim(3), conv.params.stride, conv.params.padding);
  return tokens_to_map(tokens(map), h, w);
}

template <typename T>
void PatchEmbed<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  conv.collect(out, prefix + ".conv");
  norm.collect(out, prefix + ".norm");
}

template <typename T>
Backbone<T>::Backbone(const BackboneConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  std::size_t in_channels = 3;
  for (std::size_t s = 0; s < kStageCount; ++s) {
    const StageConfig& sc = config_.stages[s];
    stages_[s].embed = PatchEmbed<T>(in_channels, sc, rng);
    for (std::size_t b = 0; b < sc.blocks; ++b) {
      stages_[s].blocks.emplace_back(sc.embed_dim, sc.heads, sc.mlp_ratio, config_.mode, rng);
    }
    in_channels = sc.embed_dim;
  }
  final_norm_ = LayerNorm<T>(config_.final_dim());
}

template <typename T>
void Backbone<T>::check_inputs(const std::vector<Tensor<T>>* templates, const Tensor<T>* search) const {
  if (templates && templates->size() != config_.templates) {
    throw ConfigError("backbone built for " + std::to_string(config_.templates) + " templates, got " +
                      std::to_string(templates->size()));
  }
  const Shape want_t{3, config_.template_h, config_.template_w};
  for (const auto& t : templates ? *templates : std::vector<Tensor<T>>{}) {
    if (t.shape() != want_t) {
      throw ConfigError("template input " + to_string(t.shape()) + ", expected " + to_string(want_t));
    }
  }
  const Shape want_s{3, config_.search_h, config_.search_w};
  if (search && search->shape() != want_s) {
    throw ConfigError("search input " + to_string(search->shape()) + ", expected " + to_string(want_s));
  }
}

namespace {

template <typename T>
std::size_t extra_count(const Tensor<T>& extra, std::size_t dim) {
  if (!extra.defined()) return 0;
  if (extra.rank() != 2 || extra.dim(1) != dim) {
    throw DimensionError("extra tokens " + to_string(extra.shape()) + " must be [n, " + std::to_string(dim) + "]");
  }
  return extra.dim(0);
}

template <typename T>
std::vector<Tensor<T>> split_templates(const Tensor<T>& tokens, const TokenLayout& layout) {
  std::vector<Tensor<T>> maps;
  const std::size_t per = layout.tokens_per_template();
  for (std::size_t i = 0; i < layout.templates; ++i) {
    maps.push_back(tokens_to_map(narrow(tokens, 0, i * per, per), layout.template_h, layout.template_w));
  }
  return maps;
}

}  // namespace

template <typename T>
BackboneOutput<T> Backbone<T>::forward(const std::vector<Tensor<T>>& templates, const Tensor<T>& search,
                                       const Tensor<T>& extra) const {
  check_inputs(&templates, &search);
  const std::size_t n_extra = extra_count(extra, config_.final_dim());
  BackboneOutput<T> out;
  std::vector<Tensor<T>> tmaps = templates;
  Tensor<T> smap = search;
  Tensor<T> x;
  TokenLayout layout;
  for (std::size_t s = 0; s < kStageCount; ++s) {
    const bool last = s + 1 == kStageCount;
    layout = config_.layout(s, last ? n_extra : 0);
    std::vector<Tensor<T>> parts;
    for (const auto& m : tmaps) parts.push_back(stages_[s].embed.tokens(m));
    parts.push_back(stages_[s].embed.tokens(smap));
    if (last && n_extra > 0) parts.push_back(extra);
    x = concat(parts, 0);
    out.stage_lengths[s] = x.dim(0);
    for (const auto& block : stages_[s].blocks) x = block.forward(x, layout);
    if (!last) {
      RegionMaps<T> maps = split_and_reshape(x, layout);
      tmaps = std::move(maps.templates);
      smap = maps.search;
    }
  }
  x = final_norm_(x);
  RegionMaps<T> maps = split_and_reshape(x, layout);
  out.search_feat = maps.search;
  out.template_tokens = narrow(x, 0, 0, layout.template_tokens());
  out.extra_tokens = maps.extra;
  return out;
}

template <typename T>
TemplateCache<T> Backbone<T>::encode_templates(const std::vector<Tensor<T>>& templates) const {
  if (config_.mode != AttentionMode::Asymmetric) {
    throw UsageError("template caching requires asymmetric attention");
  }
  check_inputs(&templates, nullptr);
  TemplateCache<T> cache;
  cache.block_inputs.resize(kStageCount);
  std::vector<Tensor<T>> tmaps = templates;
  Tensor<T> x;
  for (std::size_t s = 0; s < kStageCount; ++s) {
    const TokenLayout layout = config_.layout(s);
    std::vector<Tensor<T>> parts;
    for (const auto& m : tmaps) parts.push_back(stages_[s].embed.tokens(m));
    x = concat(parts, 0);
    for (const auto& block : stages_[s].blocks) {
      cache.block_inputs[s].push_back(x);
      x = block.forward_templates(x, layout);
    }
    if (s + 1 < kStageCount) tmaps = split_templates(x, layout);
  }
  cache.final_tokens = final_norm_(x);
  return cache;
}

template <typename T>
BackboneOutput<T> Backbone<T>::forward_cached(const TemplateCache<T>& cache, const Tensor<T>& search,
                                              const Tensor<T>& extra) const {
  if (config_.mode != AttentionMode::Asymmetric) {
    throw UsageError("template caching requires asymmetric attention");
  }
  check_inputs(nullptr, &search);
  if (cache.block_inputs.size() != kStageCount) throw UsageError("template cache is empty");
  const std::size_t n_extra = extra_count(extra, config_.final_dim());
  BackboneOutput<T> out;
  Tensor<T> smap = search;
  Tensor<T> xs;
  TokenLayout layout;
  for (std::size_t s = 0; s < kStageCount; ++s) {
    const bool last = s + 1 == kStageCount;
    layout = config_.layout(s, last ? n_extra : 0);
    xs = stages_[s].embed.tokens(smap);
    if (last && n_extra > 0) xs = concat<T>({xs, extra}, 0);
    out.stage_lengths[s] = layout.total_tokens();
    for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
      xs = stages_[s].blocks[b].forward_search(cache.block_inputs[s].at(b), xs, layout);
    }
    if (!last) smap = tokens_to_map(xs, layout.search_h, layout.search_w);
  }
  xs = final_norm_(xs);
  out.search_feat = tokens_to_map(narrow(xs, 0, 0, layout.search_grid_tokens()), layout.search_h, layout.search_w);
  if (n_extra > 0) out.extra_tokens = narrow(xs, 0, layout.search_grid_tokens(), n_extra);
  out.template_tokens = cache.final_tokens;
  return out;
}

template <typename T>
Tensor<T> Backbone<T>::block_input(const std::vector<Tensor<T>>& templates, const Tensor<T>& search,
                                   std::size_t stage, std::size_t block, const Tensor<T>& extra) const {
  check_inputs(&templates, &search);
  if (stage >= kStageCount || block >= stages_[stage].blocks.size()) {
    throw UsageError("no block " + std::to_string(block) + " in stage " + std::to_string(stage + 1));
  }
  const std::size_t n_extra = extra_count(extra, config_.final_dim());
  std::vector<Tensor<T>> tmaps = templates;
  Tensor<T> smap = search;
  for (std::size_t s = 0;; ++s) {
    const bool last = s + 1 == kStageCount;
    const TokenLayout layout = config_.layout(s, last ? n_extra : 0);
    std::vector<Tensor<T>> parts;
    for (const auto& m : tmaps) parts.push_back(stages_[s].embed.tokens(m));
    parts.push_back(stages_[s].embed.tokens(smap));
    if (last && n_extra > 0) parts.push_back(extra);
    Tensor<T> x = concat(parts, 0);
    for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
      if (s == stage && b == block) return x;
      x = stages_[s].blocks[b].forward(x, layout);
    }
    RegionMaps<T> maps = split_and_reshape(x, layout);
    tmaps = std::move(maps.templates);
    smap = maps.search;
  }
}

template <typename T>
void Backbone<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  for (std::size_t s = 0; s < kStageCount; ++s) {
    const std::string stage = prefix + ".stage" + std::to_string(s + 1);
    stages_[s].embed.collect(out, stage + ".embed");
    for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
      stages_[s].blocks[b].collect(out, stage + ".block" + std::to_string(b + 1));
    }
  }
  final_norm_.collect(out, prefix + ".final_norm");
}

template struct PatchEmbed<float>;
template struct PatchEmbed<double>;
template class Backbone<float>;
template class Backbone<double>;

}  // namespace mixformer
