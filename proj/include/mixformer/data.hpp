// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mixformer/image.hpp"

namespace mixformer {

struct Sequence {
  std::string name;
  std::vector<Image> frames;
  /// One box per frame, or a single initial box for unlabelled sequences.
  std::vector<PixelBox> boxes;

  void validate() const;
};

/// Textured rectangle over a noisy background. The object is rendered with
/// exact area coverage, so the recorded box is the ground truth.
struct SyntheticConfig {
  std::size_t width = 128, height = 128;
  std::size_t frames = 20;
  double object_w = 20.0, object_h = 20.0;
  /// Std-dev of the per-frame centre random walk, pixels.
  double motion = 0.0;
  /// Std-dev of the per-frame log-scale random walk.
  double scale_jitter = 0.0;
  /// Per-frame brightness factor drawn from [1 - a, 1 + a].
  double brightness_jitter = 0.0;
  /// Std-dev of per-pixel background noise, 0..255 units.
  double noise = 8.0;
  std::size_t distractors = 0;

  void validate() const;
};

Sequence generate_synthetic(const SyntheticConfig& config, std::uint64_t seed);

/// `dir` holds 00000001.ppm, 00000002.ppm, ... and groundtruth.txt with one
/// `x,y,w,h` line per frame (or a single line).
Sequence load_sequence(const std::filesystem::path& dir);
void save_sequence(const Sequence& sequence, const std::filesystem::path& dir);
std::string frame_file_name(std::size_t index);  // 1-based

PixelBox parse_box_line(const std::string& line, std::size_t line_number);
std::vector<PixelBox> parse_groundtruth(const std::string& text);
std::string format_box(const PixelBox& box);

constexpr std::size_t kAucThresholds = 101;
constexpr double kPrecisionThreshold = 20.0;

/// Mean over t in {0, 0.01, ..., 1} of the fraction of frames with IoU > t.
/// Perfect tracking scores 100/101 because no IoU exceeds 1.
double success_auc(const std::vector<PixelBox>& pred, const std::vector<PixelBox>& gt);
/// Fraction of frames whose centre error is at most `threshold` pixels.
double precision(const std::vector<PixelBox>& pred, const std::vector<PixelBox>& gt,
                 double threshold = kPrecisionThreshold);
double mean_iou(const std::vector<PixelBox>& pred, const std::vector<PixelBox>& gt);

}  // namespace mixformer
