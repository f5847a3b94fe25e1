// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mixformer/model.hpp"

namespace mixformer {

/// Analytic cost of one forward pass. Compute is counted in
/// multiply-accumulates over convolutions, projections, attention products
/// and MLPs; normalisation, activations and softmax are not counted.
/// Tracking literature tabulates this MAC count under the name "FLOPs".
struct CostEntry {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

struct CostReport {
  std::vector<CostEntry> stages;  // one per backbone stage
  CostEntry backbone;             // stages plus the final norm
  CostEntry head;                 // the active localisation head
  CostEntry score_predictor;      // reported separately, not in the total

  std::uint64_t total_params() const { return backbone.params + head.params; }
  std::uint64_t total_macs() const { return backbone.macs + head.macs; }
  /// Aligned text table with a per-stage breakdown.
  std::string table() const;
};

std::uint64_t block_params(std::size_t dim, double mlp_ratio);
std::uint64_t block_macs(const TokenLayout& layout, double mlp_ratio, AttentionMode mode);
std::uint64_t patch_embed_params(std::size_t in_channels, const StageConfig& stage);

CostReport count_params_flops(const ModelConfig& config);

}  // namespace mixformer
