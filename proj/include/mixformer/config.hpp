// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mixformer/data.hpp"
#include "mixformer/losses.hpp"
#include "mixformer/model.hpp"
#include "mixformer/tracker.hpp"
#include "mixformer/train.hpp"

namespace mixformer {

/// Everything a run needs: architecture, tracking, training and the
/// synthetic training corpus. Plain-text form is one `key = value` per
/// line; `#` starts a comment; unknown keys are rejected.
struct RunConfig {
  Preset preset = Preset::Tiny;
  HeadType head = HeadType::Corner;
  AttentionMode attention = AttentionMode::Full;
  TrackerConfig tracker;
  TrainConfig train;  // train.seed also seeds model initialisation
  LossConfig loss;
  SyntheticConfig synthetic = default_synthetic();
  std::size_t synthetic_sequences = 128;
  std::uint64_t synthetic_seed = 7;

  static SyntheticConfig default_synthetic();

  /// Template count is 1 + tracker.online_templates.
  ModelConfig model_config() const;
  void validate() const;
  /// Canonical text listing every key, parseable back to an equal config.
  std::string to_text() const;
};

/// Errors cite the 1-based line number.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);
std::vector<std::string> run_config_keys();

struct TrainingRun {
  Model<float> model;
  std::vector<LossRecord> stage1;
  std::vector<LossRecord> stage2;
};

/// Builds the model from `config`, generates the corpus, and runs stage 1
/// then stage 2. Deterministic for a given config.
TrainingRun train_from_config(const RunConfig& config, const ProgressFn& stage1_progress = {},
                              const ProgressFn& stage2_progress = {});

}  // namespace mixformer
