// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mixformer/image.hpp"
#include "mixformer/model.hpp"

namespace mixformer {

struct TrackerConfig {
  double search_factor = 5.0;
  double template_factor = 2.0;
  double min_search_side = 16.0;
  std::size_t update_interval = 200;
  double score_threshold = 0.5;
  std::size_t online_templates = 1;
  /// Reuse template features across frames (asymmetric attention only).
  bool cache_templates = false;

  void validate() const;
};

/// Interval-gated online template selection. Each observed frame offers one
/// candidate; the highest score of an interval wins (ties keep the earliest
/// frame) and replaces the oldest slot when its score reaches the threshold.
class TemplateUpdater {
 public:
  struct Decision {
    bool new_best = false;             // this frame is the interval's best so far
    bool boundary = false;             // this frame closes an interval
    std::optional<std::size_t> slot;   // slot to overwrite with the best candidate
    double best_score = 0.0;
    std::size_t best_frame = 0;
  };

  TemplateUpdater() = default;
  TemplateUpdater(std::size_t interval, double threshold, std::size_t slots);

  Decision observe(std::size_t frame, double score);

  std::size_t counter() const { return counter_; }
  std::size_t mutations() const { return mutations_; }
  std::optional<double> best_score() const { return best_score_; }

 private:
  std::size_t interval_ = 200;
  double threshold_ = 0.5;
  std::size_t slots_ = 1;
  std::size_t counter_ = 0;
  std::size_t next_slot_ = 0;  // slots are refreshed round-robin: always the oldest
  std::size_t mutations_ = 0;
  std::optional<double> best_score_;
  std::size_t best_frame_ = 0;
};

struct TrackResult {
  PixelBox box;
  double score = 0.0;
};

/// `frame,x,y,w,h,score` with a header row; frames are 1-based. Numbers use
/// the shortest round-trip form, so equal results give equal bytes.
std::string track_csv(const std::vector<TrackResult>& results);
/// Inverse of track_csv; rows must be numbered 1, 2, ... in order.
std::vector<TrackResult> parse_track_csv(const std::string& text);

/// One tracking session. Not shareable between threads; the model is only
/// read and may back any number of trackers.
class Tracker {
 public:
  Tracker(const Model<float>& model, const TrackerConfig& config);

  /// Crops the static template around `box` and seeds every online slot
  /// with the same crop.
  void init(const Image& frame, const PixelBox& box);
  TrackResult step(const Image& frame);

  const Patch& first_template() const { return first_; }
  const std::vector<Patch>& online_templates() const { return online_; }
  std::size_t frame_index() const { return frame_index_; }
  const PixelBox& previous_box() const { return prev_box_; }
  const TemplateUpdater& updater() const { return updater_; }

  Patch crop_template(const Image& frame, const PixelBox& box) const;
  Patch crop_search(const Image& frame, const PixelBox& box) const;
  std::vector<Tensor<float>> template_inputs() const;

 private:
  void refresh_cache();

  const Model<float>& model_;
  TrackerConfig config_;
  Patch first_;
  std::vector<Patch> online_;
  std::optional<Patch> best_candidate_;
  TemplateUpdater updater_;
  std::optional<TemplateCache<float>> cache_;
  PixelBox prev_box_;
  std::size_t frame_index_ = 0;
  std::size_t frame_w_ = 0, frame_h_ = 0;
  bool initialized_ = false;
};

}  // namespace mixformer
