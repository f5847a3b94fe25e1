// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mixformer/model.hpp"

namespace mixformer {

// Layout, all integers u32 little-endian:
//   "MIXF" | version | count | count x (name_len, name, rank, dims[rank], f32 payload) | crc32
// The CRC covers every byte before it.
inline constexpr char kCheckpointMagic[4] = {'M', 'I', 'X', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;  // size == numel(shape)

  bool operator==(const CheckpointEntry&) const = default;
};

std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries);
/// Throws IoError on bad magic, unsupported version, truncation, trailing
/// bytes or CRC mismatch.
std::vector<CheckpointEntry> decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Copies every tensor (buffers included) in list order.
std::vector<CheckpointEntry> snapshot(const ParamList<float>& params);

struct LoadReport {
  std::size_t loaded = 0;
  std::vector<std::string> ignored;  // checkpoint entries outside the allowlist
};

/// Overwrites parameter values in place.
///
/// With an empty allowlist the checkpoint must name exactly the parameter
/// set. Otherwise only parameters whose name starts with an allowlisted
/// prefix are loaded; each of those must be present, and checkpoint entries
/// outside the allowlist are reported as ignored. Shape mismatches and
/// missing tensors throw ConfigError before any value is written.
LoadReport load_parameters(const ParamList<float>& params, const std::vector<CheckpointEntry>& entries,
                           const std::vector<std::string>& allowlist = {});

void save_checkpoint(const Model<float>& model, const std::filesystem::path& path);
LoadReport load_checkpoint(const Model<float>& model, const std::filesystem::path& path,
                           const std::vector<std::string>& allowlist = {});

/// Independent copy: same config, freshly allocated tensors holding the
/// source values.
Model<float> clone_model(const Model<float>& model);

}  // namespace mixformer
