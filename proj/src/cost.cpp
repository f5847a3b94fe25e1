// SPDX-License-Identifier: Apache-2.0
#include "mixformer/cost.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace mixformer {

namespace {

using u64 = std::uint64_t;

u64 hidden_dim(std::size_t dim, double mlp_ratio) {
  return static_cast<u64>(std::lround(mlp_ratio * static_cast<double>(dim)));
}

u64 linear_params(u64 in, u64 out) { return in * out + out; }

std::string with_unit(double value, const char* unit) {
  char buf[64];
  if (value >= 1e9) {
    std::snprintf(buf, sizeof buf, "%.2f G%s", value / 1e9, unit);
  } else if (value >= 1e6) {
    std::snprintf(buf, sizeof buf, "%.2f M%s", value / 1e6, unit);
  } else if (value >= 1e3) {
    std::snprintf(buf, sizeof buf, "%.2f K%s", value / 1e3, unit);
  } else {
    std::snprintf(buf, sizeof buf, "%.0f %s", value, unit);
  }
  return buf;
}

}  // namespace

u64 block_params(std::size_t dim, double mlp_ratio) {
  const u64 d = dim, hidden = hidden_dim(dim, mlp_ratio);
  const u64 norms = 2 * 2 * d;
  const u64 depthwise = 3 * 9 * d;
  const u64 projections = 4 * linear_params(d, d);
  const u64 mlp = linear_params(d, hidden) + linear_params(hidden, d);
  return norms + depthwise + projections + mlp;
}

u64 block_macs(const TokenLayout& layout, double mlp_ratio, AttentionMode mode) {
  const u64 d = layout.dim, hidden = hidden_dim(layout.dim, mlp_ratio);
  const u64 extra = layout.extra_tokens;
  const u64 grid_queries = layout.template_tokens() + layout.search_grid_tokens();
  const u64 queries = grid_queries + extra;
  const u64 keys = layout.key_tokens();
  const u64 grid_keys = keys - extra;

  const u64 depthwise = 9 * d * (grid_queries + 2 * grid_keys);
  const u64 projections = d * d * (2 * queries + 2 * keys);
  u64 products = 0;  // q k^T and attention-weighted v
  if (mode == AttentionMode::Full) {
    products = 2 * queries * keys * d;
  } else {
    products = 2 * d * (layout.template_tokens() * layout.key_template_tokens() + layout.search_tokens() * keys);
  }
  const u64 mlp = 2 * queries * d * hidden;
  return depthwise + projections + products + mlp;
}

u64 patch_embed_params(std::size_t in_channels, const StageConfig& stage) {
  const u64 d = stage.embed_dim, k = stage.embed_kernel;
  return in_channels * d * k * k + d + 2 * d;
}

CostReport count_params_flops(const ModelConfig& config) {
  config.validate();
  const BackboneConfig& bc = config.backbone;
  const bool query = config.head == HeadType::Query;
  CostReport r;
  std::size_t in_channels = 3;
  for (std::size_t s = 0; s < kStageCount; ++s) {
    const StageConfig& sc = bc.stages[s];
    const bool last = s + 1 == kStageCount;
    const TokenLayout layout = bc.layout(s, last && query ? 1 : 0);
    CostEntry e;
    e.name = "stage" + std::to_string(s + 1);
    const u64 kernel_macs = static_cast<u64>(in_channels) * sc.embed_dim * sc.embed_kernel * sc.embed_kernel;
    e.macs = kernel_macs * (layout.template_tokens() + layout.search_grid_tokens());
    e.params = patch_embed_params(in_channels, sc) + sc.blocks * block_params(sc.embed_dim, sc.mlp_ratio);
    e.macs += sc.blocks * block_macs(layout, sc.mlp_ratio, bc.mode);
    r.backbone.params += e.params;
    r.backbone.macs += e.macs;
    r.stages.push_back(e);
    in_channels = sc.embed_dim;
  }
  const u64 dim = bc.final_dim();
  r.backbone.name = "backbone";
  r.backbone.params += 2 * dim;

  const u64 positions = static_cast<u64>(bc.stage_search_h(kStageCount - 1)) * bc.stage_search_w(kStageCount - 1);
  if (query) {
    r.head.name = "query head";
    r.head.params = dim + 2 * linear_params(dim, dim) + linear_params(dim, 4);
    r.head.macs = 2 * dim * dim + 4 * dim;
  } else {
    r.head.name = "corner head";
    const auto ch = CornerHead<float>::channel_schedule(dim);
    u64 stack_params = 0, stack_macs = 0;
    for (std::size_t i = 0; i + 1 < ch.size(); ++i) {
      stack_params += static_cast<u64>(ch[i]) * ch[i + 1] * 9 + 2 * ch[i + 1];
      stack_macs += positions * ch[i] * ch[i + 1] * 9;
    }
    stack_params += linear_params(ch.back(), 1);
    stack_macs += positions * ch.back();
    r.head.params = 2 * stack_params;
    r.head.macs = 2 * stack_macs;
  }

  const u64 grid = config.roi_grid * config.roi_grid;
  const u64 template_tokens = static_cast<u64>(bc.stage_template_h(kStageCount - 1)) * bc.stage_template_w(kStageCount - 1);
  r.score_predictor.name = "score predictor";
  const u64 cross_params = 4 * dim + 4 * linear_params(dim, dim);
  r.score_predictor.params = dim + 2 * cross_params + 2 * linear_params(dim, dim) + linear_params(dim, 1);
  auto cross_macs = [&](u64 kv) { return 2 * dim * dim + 2 * kv * dim * dim + 2 * kv * dim; };
  r.score_predictor.macs = cross_macs(grid) + cross_macs(template_tokens) + 2 * dim * dim + dim;
  return r;
}

std::string CostReport::table() const {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-18s %16s %16s\n", "component", "params", "MACs");
  os << line;
  auto row = [&](const CostEntry& e) {
    std::snprintf(line, sizeof line, "%-18s %16s %16s\n", e.name.c_str(), with_unit(double(e.params), "").c_str(),
                  with_unit(double(e.macs), "").c_str());
    os << line;
  };
  for (const auto& s : stages) row(s);
  row(backbone);
  row(head);
  std::snprintf(line, sizeof line, "%-18s %16s %16s\n", "total", with_unit(double(total_params()), "").c_str(),
                with_unit(double(total_macs()), "").c_str());
  os << line;
  row(score_predictor);
  std::snprintf(line, sizeof line, "FLOPs (MAC count) %.2f G; arithmetic operations %.2f G\n",
                double(total_macs()) / 1e9, 2.0 * double(total_macs()) / 1e9);
  os << line;
  return os.str();
}

}  // namespace mixformer
