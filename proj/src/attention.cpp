// SPDX-License-Identifier: Apache-2.0
#include "mixformer/attention.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace mixformer {

std::string to_string(AttentionMode mode) { return mode == AttentionMode::Full ? "full" : "asymmetric"; }

AttentionMode parse_attention_mode(std::string_view text) {
  if (text == "full") return AttentionMode::Full;
  if (text == "asymmetric") return AttentionMode::Asymmetric;
  throw ConfigError("unknown attention mode '" + std::string(text) + "' (expected full|asymmetric)");
}

namespace {
std::size_t kv_extent(std::size_t extent) {
  return conv_output_extent(extent, kProjectionKernel, kKeyValueStride, kProjectionPadding);
}
}  // namespace

std::size_t TokenLayout::key_template_h() const { return kv_extent(template_h); }
std::size_t TokenLayout::key_template_w() const { return kv_extent(template_w); }
std::size_t TokenLayout::key_search_h() const { return kv_extent(search_h); }
std::size_t TokenLayout::key_search_w() const { return kv_extent(search_w); }

void TokenLayout::validate() const {
  if (templates == 0 || template_h == 0 || template_w == 0 || search_h == 0 || search_w == 0 || dim == 0) {
    throw ConfigError("token layout extents must all be >= 1");
  }
}

template <typename T>
RegionMaps<T> split_and_reshape(const Tensor<T>& tokens, const TokenLayout& layout) {
  layout.validate();
  if (tokens.rank() != 2 || tokens.dim(0) != layout.total_tokens() || tokens.dim(1) != layout.dim) {
    std::ostringstream os;
    os << "layout error: tokens " << to_string(tokens.shape()) << " do not match layout of " << layout.templates
       << " x " << layout.template_h << "x" << layout.template_w << " templates + " << layout.search_h << "x"
       << layout.search_w << " search + " << layout.extra_tokens << " extra (" << layout.total_tokens() << " x "
       << layout.dim << ")";
    throw DimensionError(os.str());
  }
  RegionMaps<T> maps;
  const std::size_t per = layout.tokens_per_template();
  for (std::size_t i = 0; i < layout.templates; ++i) {
    maps.templates.push_back(tokens_to_map(narrow(tokens, 0, i * per, per), layout.template_h, layout.template_w));
  }
  maps.search = tokens_to_map(narrow(tokens, 0, layout.template_tokens(), layout.search_grid_tokens()),
                              layout.search_h, layout.search_w);
  if (layout.extra_tokens > 0) {
    maps.extra = narrow(tokens, 0, layout.template_tokens() + layout.search_grid_tokens(), layout.extra_tokens);
  }
  return maps;
}

template <typename T>
Tensor<T> flatten_and_concat(const RegionMaps<T>& maps) {
  std::vector<Tensor<T>> parts;
  for (const auto& m : maps.templates) parts.push_back(map_to_tokens(m));
  parts.push_back(map_to_tokens(maps.search));
  if (maps.extra.defined()) parts.push_back(maps.extra);
  return concat(parts, 0);
}

template <typename T>
AttentionWeights<T>::AttentionWeights(std::size_t dim_, std::size_t heads_, Rng& rng) : dim(dim_), heads(heads_) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("attention dim " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const double conv_bound = 1.0 / std::sqrt(double(kProjectionKernel * kProjectionKernel));
  const Shape kshape{dim, kProjectionKernel, kProjectionKernel};
  conv_q = uniform_param<T>(kshape, conv_bound, rng);
  conv_k = uniform_param<T>(kshape, conv_bound, rng);
  conv_v = uniform_param<T>(kshape, conv_bound, rng);
  proj_q = Linear<T>(dim, dim, rng);
  proj_k = Linear<T>(dim, dim, rng);
  proj_v = Linear<T>(dim, dim, rng);
  proj_out = Linear<T>(dim, dim, rng);
}

template <typename T>
void AttentionWeights<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".conv_q", conv_q, true});
  out.push_back({prefix + ".conv_k", conv_k, true});
  out.push_back({prefix + ".conv_v", conv_v, true});
  proj_q.collect(out, prefix + ".wq");
  proj_k.collect(out, prefix + ".wk");
  proj_v.collect(out, prefix + ".wv");
  proj_out.collect(out, prefix + ".wo");
}

template <typename T>
Tensor<T> conv_projection(const Tensor<T>& map, ProjectionRole role, const AttentionWeights<T>& weights) {
  const Tensor<T>& kernel =
      role == ProjectionRole::Query ? weights.conv_q : (role == ProjectionRole::Key ? weights.conv_k : weights.conv_v);
  const std::size_t stride = role == ProjectionRole::Query ? 1 : kKeyValueStride;
  return depthwise_conv2d(map, kernel, Tensor<T>(), Conv2dParams{stride, kProjectionPadding});
}

template <typename T>
Tensor<T> attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                         std::span<const std::uint8_t> key_mask) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
    throw DimensionError("attention: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + ", v " +
                         to_string(v.shape()) + " are inconsistent");
  }
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(q.dim(1)));
  Tensor<T> logits = scale(matmul(q, transpose(k)), inv_sqrt_d);
  if (!key_mask.empty()) logits = mask_columns(logits, key_mask);
  return matmul(softmax(logits, 1), v);
}

namespace {

template <typename T>
void check_branch(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t d, const char* branch) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != d || k.dim(1) != d) {
    throw DimensionError(std::string("attention ") + branch + " branch: key dimension must be " + std::to_string(d) +
                         ", got q " + to_string(q.shape()) + " k " + to_string(k.shape()));
  }
  if (k.dim(0) != v.dim(0)) {
    throw DimensionError(std::string("attention ") + branch + " branch: " + std::to_string(k.dim(0)) + " keys but " +
                         std::to_string(v.dim(0)) + " values");
  }
}

}  // namespace

template <typename T>
AttentionPair<T> mixed_attention(const Tensor<T>& q_t, const Tensor<T>& k_t, const Tensor<T>& v_t,
                                 const Tensor<T>& q_s, const Tensor<T>& k_s, const Tensor<T>& v_s, std::size_t d) {
  check_branch(q_t, k_t, v_t, d, "template");
  check_branch(q_s, k_s, v_s, d, "search");
  const Tensor<T> k_m = concat<T>({k_t, k_s}, 0);
  const Tensor<T> v_m = concat<T>({v_t, v_s}, 0);
  return {attention_core(q_t, k_m, v_m), attention_core(q_s, k_m, v_m)};
}

template <typename T>
AttentionPair<T> asymmetric_attention(const Tensor<T>& q_t, const Tensor<T>& k_t, const Tensor<T>& v_t,
                                      const Tensor<T>& q_s, const Tensor<T>& k_s, const Tensor<T>& v_s,
                                      std::size_t d) {
  check_branch(q_t, k_t, v_t, d, "template");
  check_branch(q_s, k_s, v_s, d, "search");
  const Tensor<T> k_m = concat<T>({k_t, k_s}, 0);
  const Tensor<T> v_m = concat<T>({v_t, v_s}, 0);
  return {attention_core(q_t, k_t, v_t), attention_core(q_s, k_m, v_m)};
}

namespace {

template <typename T>
struct ProjectedBranch {
  Tensor<T> q, k, v;  // [tokens, dim] after the linear projections; q may be undefined
};

template <typename T>
ProjectedBranch<T> project_templates(const std::vector<Tensor<T>>& maps, const AttentionWeights<T>& w,
                                     bool with_queries) {
  std::vector<Tensor<T>> qs, ks, vs;
  for (const auto& m : maps) {
    if (with_queries) qs.push_back(map_to_tokens(conv_projection(m, ProjectionRole::Query, w)));
    ks.push_back(map_to_tokens(conv_projection(m, ProjectionRole::Key, w)));
    vs.push_back(map_to_tokens(conv_projection(m, ProjectionRole::Value, w)));
  }
  ProjectedBranch<T> out;
  if (with_queries) out.q = w.proj_q(concat(qs, 0));
  out.k = w.proj_k(concat(ks, 0));
  out.v = w.proj_v(concat(vs, 0));
  return out;
}

// Trailing tokens have no spatial extent: they skip the depth-wise stage.
template <typename T>
ProjectedBranch<T> project_search(const Tensor<T>& map, const Tensor<T>& extra, const AttentionWeights<T>& w) {
  auto with_extra = [&](Tensor<T> grid_tokens) {
    return extra.defined() ? concat<T>({grid_tokens, extra}, 0) : grid_tokens;
  };
  ProjectedBranch<T> out;
  out.q = w.proj_q(with_extra(map_to_tokens(conv_projection(map, ProjectionRole::Query, w))));
  out.k = w.proj_k(with_extra(map_to_tokens(conv_projection(map, ProjectionRole::Key, w))));
  out.v = w.proj_v(with_extra(map_to_tokens(conv_projection(map, ProjectionRole::Value, w))));
  return out;
}

template <typename T>
Tensor<T> head_slice(const Tensor<T>& x, std::size_t head, std::size_t d, std::size_t heads) {
  return heads == 1 ? x : narrow(x, 1, head * d, d);
}

template <typename T>
RegionMaps<T> template_maps_only(const Tensor<T>& template_tokens, const TokenLayout& layout) {
  RegionMaps<T> maps;
  const std::size_t per = layout.tokens_per_template();
  if (template_tokens.rank() != 2 || template_tokens.dim(0) != layout.template_tokens()) {
    throw DimensionError("layout error: template stream " + to_string(template_tokens.shape()) + " for " +
                         std::to_string(layout.template_tokens()) + " template tokens");
  }
  for (std::size_t i = 0; i < layout.templates; ++i) {
    maps.templates.push_back(
        tokens_to_map(narrow(template_tokens, 0, i * per, per), layout.template_h, layout.template_w));
  }
  return maps;
}

}  // namespace

template <typename T>
AttentionPair<T> multi_head_attention(const Tensor<T>& q_t, const Tensor<T>& k_t, const Tensor<T>& v_t,
                                      const Tensor<T>& q_s, const Tensor<T>& k_s, const Tensor<T>& v_s,
                                      std::size_t heads, AttentionMode mode) {
  if (heads == 0 || q_t.rank() != 2 || q_t.dim(1) % heads != 0) {
    throw DimensionError("multi_head_attention: width " + to_string(q_t.shape()) + " is not divisible into " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t d = q_t.dim(1) / heads;
  std::vector<Tensor<T>> t_heads, s_heads;
  for (std::size_t head = 0; head < heads; ++head) {
    auto slice = [&](const Tensor<T>& x) { return head_slice(x, head, d, heads); };
    const AttentionPair<T> pair =
        mode == AttentionMode::Full
            ? mixed_attention(slice(q_t), slice(k_t), slice(v_t), slice(q_s), slice(k_s), slice(v_s), d)
            : asymmetric_attention(slice(q_t), slice(k_t), slice(v_t), slice(q_s), slice(k_s), slice(v_s), d);
    t_heads.push_back(pair.template_out);
    s_heads.push_back(pair.search_out);
  }
  if (heads == 1) return {t_heads[0], s_heads[0]};
  return {concat(t_heads, 1), concat(s_heads, 1)};
}

template <typename T>
MamBlock<T>::MamBlock(std::size_t dim, std::size_t heads, double mlp_ratio, AttentionMode mode_, Rng& rng)
    : norm1(dim), attn(dim, heads, rng), norm2(dim), mode(mode_) {
  if (mlp_ratio < 1.0) throw ConfigError("mlp ratio must be >= 1");
  const auto hidden = static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(dim)));
  fc1 = Linear<T>(dim, hidden, rng);
  fc2 = Linear<T>(hidden, dim, rng);
}

template <typename T>
Tensor<T> MamBlock<T>::mlp(const Tensor<T>& x) const {
  return fc2(gelu(fc1(x)));
}

template <typename T>
Tensor<T> MamBlock<T>::forward(const Tensor<T>& tokens, const TokenLayout& layout) const {
  const Tensor<T> h = norm1(tokens);
  const RegionMaps<T> maps = split_and_reshape(h, layout);
  const ProjectedBranch<T> t = project_templates(maps.templates, attn, true);
  const ProjectedBranch<T> s = project_search(maps.search, maps.extra, attn);

  const AttentionPair<T> pair = multi_head_attention(t.q, t.k, t.v, s.q, s.k, s.v, attn.heads, mode);
  const Tensor<T> merged = concat<T>({pair.template_out, pair.search_out}, 0);
  const Tensor<T> x = add(tokens, attn.proj_out(merged));
  return add(x, mlp(norm2(x)));
}

template <typename T>
Tensor<T> MamBlock<T>::forward_search(const Tensor<T>& template_tokens, const Tensor<T>& search_tokens,
                                      const TokenLayout& layout) const {
  if (mode != AttentionMode::Asymmetric) {
    throw UsageError("forward_search reuses template features, which is only valid in asymmetric mode");
  }
  if (search_tokens.rank() != 2 || search_tokens.dim(0) != layout.search_tokens()) {
    throw DimensionError("layout error: search stream " + to_string(search_tokens.shape()) + " for " +
                         std::to_string(layout.search_tokens()) + " search tokens");
  }
  const RegionMaps<T> tmaps = template_maps_only(norm1(template_tokens), layout);
  const ProjectedBranch<T> t = project_templates(tmaps.templates, attn, false);

  const Tensor<T> hs = norm1(search_tokens);
  const Tensor<T> search_map =
      tokens_to_map(narrow(hs, 0, 0, layout.search_grid_tokens()), layout.search_h, layout.search_w);
  const Tensor<T> extra =
      layout.extra_tokens > 0 ? narrow(hs, 0, layout.search_grid_tokens(), layout.extra_tokens) : Tensor<T>();
  const ProjectedBranch<T> s = project_search(search_map, extra, attn);

  const std::size_t d = attn.head_dim();
  std::vector<Tensor<T>> s_heads;
  for (std::size_t head = 0; head < attn.heads; ++head) {
    auto slice = [&](const Tensor<T>& x) { return head_slice(x, head, d, attn.heads); };
    const Tensor<T> k_m = concat<T>({slice(t.k), slice(s.k)}, 0);
    const Tensor<T> v_m = concat<T>({slice(t.v), slice(s.v)}, 0);
    s_heads.push_back(attention_core(slice(s.q), k_m, v_m));
  }
  const Tensor<T> x = add(search_tokens, attn.proj_out(concat(s_heads, 1)));
  return add(x, mlp(norm2(x)));
}

template <typename T>
Tensor<T> MamBlock<T>::forward_templates(const Tensor<T>& template_tokens, const TokenLayout& layout) const {
  if (mode != AttentionMode::Asymmetric) {
    throw UsageError("template-only forward is only valid in asymmetric mode");
  }
  const RegionMaps<T> tmaps = template_maps_only(norm1(template_tokens), layout);
  const ProjectedBranch<T> t = project_templates(tmaps.templates, attn, true);
  const std::size_t d = attn.head_dim();
  std::vector<Tensor<T>> t_heads;
  for (std::size_t head = 0; head < attn.heads; ++head) {
    auto slice = [&](const Tensor<T>& x) { return head_slice(x, head, d, attn.heads); };
    t_heads.push_back(attention_core(slice(t.q), slice(t.k), slice(t.v)));
  }
  const Tensor<T> x = add(template_tokens, attn.proj_out(concat(t_heads, 1)));
  return add(x, mlp(norm2(x)));
}

template <typename T>
std::vector<double> MamBlock<T>::attention_probabilities(const Tensor<T>& tokens, const TokenLayout& layout) const {
  NoGradGuard no_grad;
  const RegionMaps<T> maps = split_and_reshape(norm1(tokens), layout);
  const ProjectedBranch<T> t = project_templates(maps.templates, attn, true);
  const ProjectedBranch<T> s = project_search(maps.search, maps.extra, attn);
  const Tensor<T> q = concat<T>({t.q, s.q}, 0);
  const Tensor<T> k = concat<T>({t.k, s.k}, 0);
  const std::size_t rows = q.dim(0), cols = k.dim(0);
  const std::size_t lt = layout.template_tokens(), lkt = layout.key_template_tokens();

  const std::size_t d = attn.head_dim();
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
  std::vector<double> out(rows * cols, 0.0);
  for (std::size_t head = 0; head < attn.heads; ++head) {
    const Tensor<T> logits = scale(matmul(head_slice(q, head, d, attn.heads), transpose(head_slice(k, head, d, attn.heads))), inv_sqrt_d);
    std::vector<T> values(logits.data().begin(), logits.data().end());
    if (mode == AttentionMode::Asymmetric) {
      for (std::size_t r = 0; r < lt; ++r) {
        for (std::size_t c = lkt; c < cols; ++c) values[r * cols + c] = -std::numeric_limits<T>::infinity();
      }
    }
    const Tensor<T> probs = softmax(Tensor<T>({rows, cols}, std::move(values)), 1);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += static_cast<double>(probs[i]) / double(attn.heads);
  }
  return out;
}

template <typename T>
void MamBlock<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  norm1.collect(out, prefix + ".norm1");
  attn.collect(out, prefix + ".attn");
  norm2.collect(out, prefix + ".norm2");
  fc1.collect(out, prefix + ".mlp.fc1");
  fc2.collect(out, prefix + ".mlp.fc2");
}

AttentionMap slice_attention(std::span<const double> probabilities, const TokenLayout& layout, Region query,
                             Region key) {
  const std::size_t rows = layout.total_tokens(), cols = layout.key_tokens();
  if (probabilities.size() != rows * cols) {
    throw DimensionError("attention matrix of " + std::to_string(probabilities.size()) + " entries for a " +
                         std::to_string(rows) + "x" + std::to_string(cols) + " layout");
  }
  AttentionMap map;
  std::size_t row0, col0;
  if (query.search) {
    map.query_h = layout.search_h;
    map.query_w = layout.search_w;
    row0 = layout.template_tokens();
  } else {
    if (query.template_index >= layout.templates) throw UsageError("template index out of range");
    map.query_h = layout.template_h;
    map.query_w = layout.template_w;
    row0 = query.template_index * layout.tokens_per_template();
  }
  if (key.search) {
    map.key_h = layout.key_search_h();
    map.key_w = layout.key_search_w();
    col0 = layout.key_template_tokens();
  } else {
    if (key.template_index >= layout.templates) throw UsageError("template index out of range");
    map.key_h = layout.key_template_h();
    map.key_w = layout.key_template_w();
    col0 = key.template_index * map.key_h * map.key_w;
  }
  map.values.resize(map.rows() * map.cols());
  for (std::size_t r = 0; r < map.rows(); ++r) {
    for (std::size_t c = 0; c < map.cols(); ++c) {
      map.values[r * map.cols() + c] = probabilities[(row0 + r) * cols + col0 + c];
    }
  }
  return map;
}

template <typename T>
AttentionDump attention_weights_dump(const MamBlock<T>& block, const Tensor<T>& tokens, const TokenLayout& layout) {
  const std::vector<double> probs = block.attention_probabilities(tokens, layout);
  AttentionDump dump;
  dump.search_to_template = slice_attention(probs, layout, Region::search_region(), Region::template_region(0));
  dump.search_to_search = slice_attention(probs, layout, Region::search_region(), Region::search_region());
  if (layout.templates >= 2) {
    dump.search_to_online = slice_attention(probs, layout, Region::search_region(), Region::template_region(1));
    dump.online_to_template =
        slice_attention(probs, layout, Region::template_region(1), Region::template_region(0));
  }
  return dump;
}

std::string attention_map_csv(const AttentionMap& map) {
  std::ostringstream os;
  os.precision(9);
  os << "query";
  for (std::size_t c = 0; c < map.cols(); ++c) os << ",k" << c;
  os << '\n';
  for (std::size_t r = 0; r < map.rows(); ++r) {
    os << r;
    for (std::size_t c = 0; c < map.cols(); ++c) os << ',' << map.at(r, c);
    os << '\n';
  }
  return os.str();
}

#define MIXFORMER_INSTANTIATE_ATTENTION(T)                                                                       \
  template RegionMaps<T> split_and_reshape(const Tensor<T>&, const TokenLayout&);                                \
  template Tensor<T> flatten_and_concat(const RegionMaps<T>&);                                                   \
  template struct AttentionWeights<T>;                                                                           \
  template Tensor<T> conv_projection(const Tensor<T>&, ProjectionRole, const AttentionWeights<T>&);              \
  template Tensor<T> attention_core(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                        \
                                    std::span<const std::uint8_t>);                                              \
  template AttentionPair<T> mixed_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                \
                                            const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);  \
  template AttentionPair<T> asymmetric_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                                 const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                                 std::size_t);                                                   \
  template AttentionPair<T> multi_head_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                                 const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                                 std::size_t, AttentionMode);                                    \
  template struct MamBlock<T>;                                                                                   \
  template AttentionDump attention_weights_dump(const MamBlock<T>&, const Tensor<T>&, const TokenLayout&);

MIXFORMER_INSTANTIATE_ATTENTION(float)
MIXFORMER_INSTANTIATE_ATTENTION(double)

}  // namespace mixformer
