// SPDX-License-Identifier: Apache-2.0
#include "mixformer/tracker.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

#include "mixformer/data.hpp"

namespace mixformer {

void TrackerConfig::validate() const {
  if (!(search_factor > 1.0) || !(template_factor > 1.0)) throw ConfigError("crop factors must exceed 1");
  if (update_interval == 0) throw ConfigError("update_interval must be >= 1");
  if (!(score_threshold >= 0.0 && score_threshold <= 1.0)) throw ConfigError("score_threshold must lie in [0,1]");
  if (!(min_search_side > 0.0)) throw ConfigError("min_search_side must be positive");
}

TemplateUpdater::TemplateUpdater(std::size_t interval, double threshold, std::size_t slots)
    : interval_(interval), threshold_(threshold), slots_(slots) {
  if (interval == 0) throw ConfigError("update interval must be >= 1");
}

TemplateUpdater::Decision TemplateUpdater::observe(std::size_t frame, double score) {
  Decision d;
  ++counter_;
  if (!best_score_ || score > *best_score_) {
    best_score_ = score;
    best_frame_ = frame;
    d.new_best = true;
  }
  d.best_score = *best_score_;
  d.best_frame = best_frame_;
  if (counter_ == interval_) {
    d.boundary = true;
    if (slots_ > 0 && *best_score_ >= threshold_) {
      d.slot = next_slot_;
      next_slot_ = (next_slot_ + 1) % slots_;
      ++mutations_;
    }
    counter_ = 0;
    best_score_.reset();
  }
  return d;
}

Tracker::Tracker(const Model<float>& model, const TrackerConfig& config)
    : model_(model), config_(config), updater_(config.update_interval, config.score_threshold, config.online_templates) {
  config_.validate();
  const std::size_t want = model.config().backbone.templates;
  if (want != 1 + config_.online_templates) {
    throw ConfigError("model expects " + std::to_string(want) + " templates but the tracker supplies 1 + " +
                      std::to_string(config_.online_templates));
  }
  if (config_.cache_templates && model.config().backbone.mode != AttentionMode::Asymmetric) {
    throw ConfigError("template caching requires attention = asymmetric");
  }
}

namespace {

PixelBox clip_to_frame(const PixelBox& b, std::size_t width, std::size_t height) {
  const double x0 = std::clamp(b.x, 0.0, double(width)), y0 = std::clamp(b.y, 0.0, double(height));
  const double x1 = std::clamp(b.x1(), 0.0, double(width)), y1 = std::clamp(b.y1(), 0.0, double(height));
  return {x0, y0, x1 - x0, y1 - y0};
}

}  // namespace

Patch Tracker::crop_template(const Image& frame, const PixelBox& box) const {
  const BackboneConfig& bc = model_.config().backbone;
  const double side = std::max(1.0, crop_side(box, config_.template_factor));
  return crop_square(frame, box.center_x(), box.center_y(), side, bc.template_w, bc.template_h);
}

Patch Tracker::crop_search(const Image& frame, const PixelBox& box) const {
  const BackboneConfig& bc = model_.config().backbone;
  const double side = crop_side(box, config_.search_factor, config_.min_search_side);
  return crop_square(frame, box.center_x(), box.center_y(), side, bc.search_w, bc.search_h);
}

std::vector<Tensor<float>> Tracker::template_inputs() const {
  std::vector<Tensor<float>> out{to_input<float>(first_)};
  for (const auto& p : online_) out.push_back(to_input<float>(p));
  return out;
}

void Tracker::refresh_cache() {
  if (!config_.cache_templates) return;
  NoGradGuard no_grad;
  cache_ = model_.encode_templates(template_inputs());
}

void Tracker::init(const Image& frame, const PixelBox& box) {
  const PixelBox clipped = clip_to_frame(box, frame.width, frame.height);
  if (!(clipped.area() > 0.0)) throw ConfigError("initial box is empty or outside the frame");
  frame_w_ = frame.width;
  frame_h_ = frame.height;
  first_ = crop_template(frame, clipped);
  online_.assign(config_.online_templates, first_);
  best_candidate_.reset();
  updater_ = TemplateUpdater(config_.update_interval, config_.score_threshold, config_.online_templates);
  prev_box_ = clipped;
  frame_index_ = 0;
  initialized_ = true;
  refresh_cache();
}

TrackResult Tracker::step(const Image& frame) {
  if (!initialized_) throw UsageError("Tracker::step before init");
  if (frame.width != frame_w_ || frame.height != frame_h_) throw ConfigError("frame size changed mid-sequence");
  NoGradGuard no_grad;
  ++frame_index_;
  const Patch search = crop_search(frame, prev_box_);
  const Tensor<float> input = to_input<float>(search);
  const Prediction<float> pred = cache_ ? model_.forward_cached(*cache_, input) : model_.forward(template_inputs(), input);
  const BoundingBox reported = pred.reported();
  TrackResult result;
  result.box = search.transform.to_frame(reported);
  result.score = double(model_.score(pred.features, reported).item());

  const TemplateUpdater::Decision d = updater_.observe(frame_index_, result.score);
  if (d.new_best) best_candidate_ = crop_template(frame, result.box);
  if (d.slot) {
    online_[*d.slot] = *best_candidate_;
    refresh_cache();
  }
  if (d.boundary) best_candidate_.reset();

  const PixelBox next = clip_to_frame(result.box, frame.width, frame.height);
  if (next.area() > 0.0) prev_box_ = next;
  return result;
}

std::string track_csv(const std::vector<TrackResult>& results) {
  std::string out = "frame,x,y,w,h,score\n";
  char buf[64];
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, results[i].score);
    out += std::to_string(i + 1) + "," + format_box(results[i].box) + "," + std::string(buf, end) + "\n";
  }
  return out;
}

std::vector<TrackResult> parse_track_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("frame,x,y,w,h,score", 0) != 0) {
    throw IoError("box file must start with the header 'frame,x,y,w,h,score'");
  }
  std::vector<TrackResult> out;
  std::size_t line_number = 1;
  while (std::getline(in, line)) {
    ++line_number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto first = line.find(','), last = line.rfind(',');
    const std::string where = "box file line " + std::to_string(line_number) + ": ";
    if (first == std::string::npos || first == last) throw IoError(where + "expected 6 fields");
    std::size_t frame = 0;
    const auto fr = std::from_chars(line.data(), line.data() + first, frame);
    if (fr.ec != std::errc() || fr.ptr != line.data() + first || frame != out.size() + 1) {
      throw IoError(where + "expected frame number " + std::to_string(out.size() + 1));
    }
    TrackResult r;
    r.box = parse_box_line(line.substr(first + 1, last - first - 1), line_number);
    const auto sc = std::from_chars(line.data() + last + 1, line.data() + line.size(), r.score);
    if (sc.ec != std::errc() || sc.ptr != line.data() + line.size()) throw IoError(where + "bad score");
    out.push_back(r);
  }
  return out;
}

}  // namespace mixformer
