// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mixformer/nn.hpp"

namespace mixformer {

/// FULL: every query attends template and search keys.
/// ASYMMETRIC: template queries attend template keys only, so template
/// features never depend on the search region.
enum class AttentionMode { Full, Asymmetric };

std::string to_string(AttentionMode mode);
AttentionMode parse_attention_mode(std::string_view text);

/// How a fused token sequence splits into T template grids, one search grid
/// and optional trailing non-spatial tokens (the regression token).
struct TokenLayout {
  std::size_t templates = 1;
  std::size_t template_h = 1;
  std::size_t template_w = 1;
  std::size_t search_h = 1;
  std::size_t search_w = 1;
  std::size_t dim = 1;
  std::size_t extra_tokens = 0;

  std::size_t tokens_per_template() const { return template_h * template_w; }
  std::size_t template_tokens() const { return templates * tokens_per_template(); }
  std::size_t search_grid_tokens() const { return search_h * search_w; }
  /// Search grid plus trailing tokens: everything on the search branch.
  std::size_t search_tokens() const { return search_grid_tokens() + extra_tokens; }
  std::size_t total_tokens() const { return template_tokens() + search_tokens(); }

  /// Extents of the stride-2 key/value grids.
  std::size_t key_template_h() const;
  std::size_t key_template_w() const;
  std::size_t key_search_h() const;
  std::size_t key_search_w() const;
  std::size_t key_template_tokens() const { return templates * key_template_h() * key_template_w(); }
  std::size_t key_search_tokens() const { return key_search_h() * key_search_w() + extra_tokens; }
  std::size_t key_tokens() const { return key_template_tokens() + key_search_tokens(); }

  void validate() const;
  bool operator==(const TokenLayout&) const = default;
};

template <typename T>
struct RegionMaps {
  std::vector<Tensor<T>> templates;  // each [dim, template_h, template_w]
  Tensor<T> search;                  // [dim, search_h, search_w]
  Tensor<T> extra;                   // [extra_tokens, dim], undefined when none
};

template <typename T>
RegionMaps<T> split_and_reshape(const Tensor<T>& tokens, const TokenLayout& layout);
/// Exact inverse of split_and_reshape.
template <typename T>
Tensor<T> flatten_and_concat(const RegionMaps<T>& maps);

enum class ProjectionRole { Query, Key, Value };

constexpr std::size_t kProjectionKernel = 3;
constexpr std::size_t kProjectionPadding = 1;
constexpr std::size_t kKeyValueStride = 2;

/// Weights of one mixed attention layer: depth-wise 3x3 projections (query
/// stride 1, key/value stride 2) followed by linear q/k/v projections and the
/// output projection.
template <typename T>
struct AttentionWeights {
  std::size_t dim = 0;
  std::size_t heads = 1;
  Tensor<T> conv_q, conv_k, conv_v;  // [dim, 3, 3]
  Linear<T> proj_q, proj_k, proj_v, proj_out;

  AttentionWeights() = default;
  AttentionWeights(std::size_t dim, std::size_t heads, Rng& rng);
  std::size_t head_dim() const { return dim / heads; }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// Depth-wise projection of one region map; never mixes regions.
template <typename T>
Tensor<T> conv_projection(const Tensor<T>& map, ProjectionRole role, const AttentionWeights<T>& weights);

/// softmax(q k^T / sqrt(d)) v for one head, d = q.dim(1). Keys flagged in
/// `key_mask` get zero weight.
template <typename T>
Tensor<T> attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                         std::span<const std::uint8_t> key_mask = {});

template <typename T>
struct AttentionPair {
  Tensor<T> template_out;
  Tensor<T> search_out;
};

/// Both branches attend the concatenated template-then-search keys/values.
template <typename T>
AttentionPair<T> mixed_attention(const Tensor<T>& q_t, const Tensor<T>& k_t, const Tensor<T>& v_t,
                                 const Tensor<T>& q_s, const Tensor<T>& k_s, const Tensor<T>& v_s, std::size_t d);

/// Template branch attends template keys only; search branch as in
/// mixed_attention.
template <typename T>
AttentionPair<T> asymmetric_attention(const Tensor<T>& q_t, const Tensor<T>& k_t, const Tensor<T>& v_t,
                                      const Tensor<T>& q_s, const Tensor<T>& k_s, const Tensor<T>& v_s,
                                      std::size_t d);

/// Splits the width of every input into `heads` equal slices, runs the
/// mode's attention per slice and concatenates the head outputs.
template <typename T>
AttentionPair<T> multi_head_attention(const Tensor<T>& q_t, const Tensor<T>& k_t, const Tensor<T>& v_t,
                                      const Tensor<T>& q_s, const Tensor<T>& k_s, const Tensor<T>& v_s,
                                      std::size_t heads, AttentionMode mode);

/// Pre-norm residual block: x + MAM(LN(x)), then y + MLP(LN(y)).
template <typename T>
struct MamBlock {
  LayerNorm<T> norm1;
  AttentionWeights<T> attn;
  LayerNorm<T> norm2;
  Linear<T> fc1, fc2;
  AttentionMode mode = AttentionMode::Full;

  MamBlock() = default;
  MamBlock(std::size_t dim, std::size_t heads, double mlp_ratio, AttentionMode mode, Rng& rng);

  Tensor<T> forward(const Tensor<T>& tokens, const TokenLayout& layout) const;

  /// ASYMMETRIC only: advances the search-branch tokens given the template
  /// stream entering this block, without recomputing template outputs.
  /// Bit-identical to the search rows of forward().
  Tensor<T> forward_search(const Tensor<T>& template_tokens, const Tensor<T>& search_tokens,
                           const TokenLayout& layout) const;

  /// ASYMMETRIC only: the template rows of forward(), computed without any
  /// search input.
  Tensor<T> forward_templates(const Tensor<T>& template_tokens, const TokenLayout& layout) const;

  /// Head-averaged attention probabilities [L, key_tokens]; pruned entries
  /// of the asymmetric scheme are exactly zero.
  std::vector<double> attention_probabilities(const Tensor<T>& tokens, const TokenLayout& layout) const;

  void collect(ParamList<T>& out, const std::string& prefix) const;

 private:
  Tensor<T> mlp(const Tensor<T>& x) const;
};

/// One region-to-region slice of an attention matrix, rows are queries
/// (raster order of the query grid), columns keys (raster order of the
/// down-sampled key grid).
struct AttentionMap {
  std::size_t query_h = 0, query_w = 0;
  std::size_t key_h = 0, key_w = 0;
  std::vector<double> values;  // [query_h*query_w, key_h*key_w]

  std::size_t rows() const { return query_h * query_w; }
  std::size_t cols() const { return key_h * key_w; }
  double at(std::size_t row, std::size_t col) const { return values[row * cols() + col]; }
};

/// The four standard attention maps: search-to-template,
/// search-to-online-template, search-to-search and
/// online-template-to-template. Online maps are absent when T < 2.
struct AttentionDump {
  AttentionMap search_to_template;
  std::optional<AttentionMap> search_to_online;
  AttentionMap search_to_search;
  std::optional<AttentionMap> online_to_template;
};

/// Query/key region of a token layout: template index or the search grid.
struct Region {
  bool search = false;
  std::size_t template_index = 0;
  static Region search_region() { return {true, 0}; }
  static Region template_region(std::size_t i) { return {false, i}; }
};

AttentionMap slice_attention(std::span<const double> probabilities, const TokenLayout& layout, Region query,
                             Region key);

template <typename T>
AttentionDump attention_weights_dump(const MamBlock<T>& block, const Tensor<T>& tokens, const TokenLayout& layout);

/// CSV with one row per query and one column per key.
std::string attention_map_csv(const AttentionMap& map);

}  // namespace mixformer
