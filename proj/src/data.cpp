// SPDX-License-Identifier: Apache-2.0
#include "mixformer/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "mixformer/io.hpp"
#include "mixformer/nn.hpp"

namespace mixformer {

void Sequence::validate() const {
  if (frames.empty()) throw ConfigError("sequence '" + name + "' has no frames");
  if (boxes.size() != frames.size() && boxes.size() != 1) {
    throw ConfigError("sequence '" + name + "' has " + std::to_string(frames.size()) + " frames but " +
                      std::to_string(boxes.size()) + " boxes");
  }
  for (const auto& f : frames) {
    if (f.width != frames[0].width || f.height != frames[0].height) {
      throw ConfigError("sequence '" + name + "' mixes frame sizes");
    }
  }
}

void SyntheticConfig::validate() const {
  if (width == 0 || height == 0 || frames == 0) throw ConfigError("synthetic frame size and count must be positive");
  if (!(object_w > 0.0) || !(object_h > 0.0)) throw ConfigError("synthetic object must have positive size");
  if (object_w > double(width) || object_h > double(height)) {
    throw ConfigError("synthetic object (" + std::to_string(object_w) + "x" + std::to_string(object_h) +
                      ") is larger than the frame");
  }
  if (motion < 0.0 || scale_jitter < 0.0 || brightness_jitter < 0.0 || brightness_jitter >= 1.0 || noise < 0.0) {
    throw ConfigError("synthetic jitter amplitudes must be non-negative (brightness below 1)");
  }
}

namespace {

constexpr std::size_t kTextureCells = 4;

using Color = std::array<double, 3>;

struct Texture {
  std::array<Color, kTextureCells * kTextureCells> cells;

  static Texture random(Rng& rng) {
    Texture t;
    // Each channel is either dark or bright, never in the mid-tone band
    // the background occupies, so object edges stay visible.
    for (auto& c : t.cells) {
      for (double& v : c) v = rng.uniform() < 0.5 ? rng.uniform(20.0, 50.0) : rng.uniform(205.0, 235.0);
    }
    return t;
  }

  /// Colour at local coordinates u, v in [0,1].
  const Color& at(double u, double v) const {
    const auto i = std::min(kTextureCells - 1, static_cast<std::size_t>(std::max(0.0, v) * kTextureCells));
    const auto j = std::min(kTextureCells - 1, static_cast<std::size_t>(std::max(0.0, u) * kTextureCells));
    return cells[i * kTextureCells + j];
  }
};

struct Rect {
  double x0, y0, x1, y1;
};

/// Alpha-composites a textured rectangle using exact per-pixel area coverage.
void draw(std::vector<Color>& canvas, std::size_t width, std::size_t height, const Rect& r, const Texture& tex) {
  const auto px0 = static_cast<std::size_t>(std::max(0.0, std::floor(r.x0)));
  const auto py0 = static_cast<std::size_t>(std::max(0.0, std::floor(r.y0)));
  const auto px1 = std::min(width, static_cast<std::size_t>(std::max(0.0, std::ceil(r.x1))));
  const auto py1 = std::min(height, static_cast<std::size_t>(std::max(0.0, std::ceil(r.y1))));
  for (std::size_t y = py0; y < py1; ++y) {
    const double cover_y = std::min(r.y1, double(y + 1)) - std::max(r.y0, double(y));
    if (cover_y <= 0.0) continue;
    const double v = (double(y) + 0.5 - r.y0) / (r.y1 - r.y0);
    for (std::size_t x = px0; x < px1; ++x) {
      const double cover_x = std::min(r.x1, double(x + 1)) - std::max(r.x0, double(x));
      if (cover_x <= 0.0) continue;
      const double alpha = cover_x * cover_y;
      const Color& c = tex.at((double(x) + 0.5 - r.x0) / (r.x1 - r.x0), v);
      Color& dst = canvas[y * width + x];
      for (std::size_t k = 0; k < 3; ++k) dst[k] = alpha * c[k] + (1.0 - alpha) * dst[k];
    }
  }
}

}  // namespace

Sequence generate_synthetic(const SyntheticConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t W = config.width, H = config.height;

  Color bg_a, bg_b;
  for (std::size_t k = 0; k < 3; ++k) {
    bg_a[k] = rng.uniform(85.0, 165.0);
    bg_b[k] = bg_a[k] + rng.uniform(-25.0, 25.0);
  }
  const Texture object_tex = Texture::random(rng);

  struct Distractor {
    Rect rect;
    Texture tex;
  };
  std::vector<Distractor> distractors;
  for (std::size_t i = 0; i < config.distractors; ++i) {
    const double w = config.object_w * rng.uniform(0.6, 1.4), h = config.object_h * rng.uniform(0.6, 1.4);
    const double x = rng.uniform(0.0, std::max(0.0, double(W) - w)), y = rng.uniform(0.0, std::max(0.0, double(H) - h));
    distractors.push_back({Rect{x, y, x + w, y + h}, Texture::random(rng)});
  }

  const double margin_x = 0.5 * config.object_w, margin_y = 0.5 * config.object_h;
  double cx = rng.uniform(margin_x, double(W) - margin_x);
  double cy = rng.uniform(margin_y, double(H) - margin_y);
  double log_scale = 0.0;
  const double max_log_scale =
      std::min({std::log(2.0), std::log(double(W) / config.object_w), std::log(double(H) / config.object_h)});

  Sequence seq;
  seq.name = "synthetic-" + std::to_string(seed);
  std::vector<Color> canvas(W * H);
  for (std::size_t f = 0; f < config.frames; ++f) {
    if (f > 0) {
      if (config.motion > 0.0) {
        cx += config.motion * rng.normal();
        cy += config.motion * rng.normal();
      }
      if (config.scale_jitter > 0.0) {
        log_scale = std::clamp(log_scale + config.scale_jitter * rng.normal(), std::log(0.5), max_log_scale);
      }
    }
    const double scale = std::exp(log_scale);
    const double w = config.object_w * scale, h = config.object_h * scale;
    // Fully inside the frame, which implies at least half inside.
    cx = std::clamp(cx, 0.5 * w, double(W) - 0.5 * w);
    cy = std::clamp(cy, 0.5 * h, double(H) - 0.5 * h);
    const PixelBox box{cx - 0.5 * w, cy - 0.5 * h, w, h};

    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const double t = (double(x) + double(y)) / double(W + H);
        Color& c = canvas[y * W + x];
        for (std::size_t k = 0; k < 3; ++k) c[k] = (1.0 - t) * bg_a[k] + t * bg_b[k] + config.noise * rng.normal();
      }
    }
    for (const auto& d : distractors) draw(canvas, W, H, d.rect, d.tex);
    draw(canvas, W, H, Rect{box.x, box.y, box.x1(), box.y1()}, object_tex);

    const double brightness =
        config.brightness_jitter > 0.0 ? rng.uniform(1.0 - config.brightness_jitter, 1.0 + config.brightness_jitter) : 1.0;
    Image img(W, H);
    for (std::size_t i = 0; i < W * H; ++i) {
      for (std::size_t k = 0; k < 3; ++k) {
        img.data[i * 3 + k] = static_cast<std::uint8_t>(std::lround(std::clamp(canvas[i][k] * brightness, 0.0, 255.0)));
      }
    }
    seq.frames.push_back(std::move(img));
    seq.boxes.push_back(box);
  }
  return seq;
}

std::string frame_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%08zu.ppm", index);
  return buf;
}

PixelBox parse_box_line(const std::string& line, std::size_t line_number) {
  std::array<double, 4> v{};
  const char* p = line.data();
  const char* end = line.data() + line.size();
  auto fail = [&](const std::string& what) -> PixelBox {
    throw IoError("groundtruth line " + std::to_string(line_number) + ": " + what + " in '" + line + "'");
  };
  for (std::size_t i = 0; i < 4; ++i) {
    while (p < end && (*p == ' ' || *p == '\t')) ++p;
    const auto [next, ec] = std::from_chars(p, end, v[i]);
    if (ec != std::errc() || !std::isfinite(v[i])) return fail("expected a number for field " + std::to_string(i + 1));
    p = next;
    while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
    if (i < 3) {
      if (p == end || *p != ',') return fail("expected ',' after field " + std::to_string(i + 1));
      ++p;
    }
  }
  if (p != end) return fail("trailing characters");
  return {v[0], v[1], v[2], v[3]};
}

std::vector<PixelBox> parse_groundtruth(const std::string& text) {
  std::vector<PixelBox> boxes;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    boxes.push_back(parse_box_line(line, number));
  }
  return boxes;
}

std::string format_box(const PixelBox& box) {
  std::string out;
  char buf[64];
  for (double v : {box.x, box.y, box.w, box.h}) {
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (!out.empty()) out.push_back(',');
    out.append(buf, end);
  }
  return out;
}

Sequence load_sequence(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("sequence directory " + dir.string() + " does not exist");
  Sequence seq;
  seq.name = dir.filename().string();
  if (seq.name.empty()) seq.name = dir.parent_path().filename().string();
  seq.boxes = parse_groundtruth(read_text_file(dir / "groundtruth.txt"));
  if (seq.boxes.empty()) throw IoError(dir.string() + "/groundtruth.txt has no boxes");

  std::size_t last = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() != 12 || entry.path().extension() != ".ppm") continue;
    std::size_t index = 0;
    const auto [p, ec] = std::from_chars(name.data(), name.data() + 8, index);
    if (ec == std::errc() && p == name.data() + 8) last = std::max(last, index);
  }
  const std::size_t count = seq.boxes.size() > 1 ? std::max(last, seq.boxes.size()) : last;
  if (count == 0) throw IoError(dir.string() + " contains no frame files");
  for (std::size_t i = 1; i <= count; ++i) {
    const auto path = dir / frame_file_name(i);
    if (!std::filesystem::exists(path)) {
      throw IoError("sequence " + dir.string() + ": missing frame " + std::to_string(i) + " (" + frame_file_name(i) + ")");
    }
    seq.frames.push_back(read_ppm(path));
  }
  if (seq.boxes.size() != 1 && seq.boxes.size() != seq.frames.size()) {
    throw IoError("sequence " + dir.string() + ": " + std::to_string(seq.frames.size()) + " frames but " +
                  std::to_string(seq.boxes.size()) + " groundtruth lines");
  }
  seq.validate();
  return seq;
}

void save_sequence(const Sequence& sequence, const std::filesystem::path& dir) {
  sequence.validate();
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < sequence.frames.size(); ++i) {
    write_file_atomic(dir / frame_file_name(i + 1), encode_ppm(sequence.frames[i]));
  }
  std::string gt;
  for (const auto& b : sequence.boxes) gt += format_box(b) + "\n";
  write_file_atomic(dir / "groundtruth.txt", gt);
}

namespace {
void check_lengths(const std::vector<PixelBox>& pred, const std::vector<PixelBox>& gt) {
  if (pred.size() != gt.size()) {
    throw DimensionError("metric inputs differ in length: " + std::to_string(pred.size()) + " predictions, " +
                         std::to_string(gt.size()) + " ground-truth boxes");
  }
  if (pred.empty()) throw DimensionError("metrics need at least one frame");
}
}  // namespace

double success_auc(const std::vector<PixelBox>& pred, const std::vector<PixelBox>& gt) {
  check_lengths(pred, gt);
  std::vector<double> overlaps(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) overlaps[i] = iou(pred[i], gt[i]);
  double total = 0.0;
  for (std::size_t t = 0; t < kAucThresholds; ++t) {
    const double threshold = double(t) / double(kAucThresholds - 1);
    std::size_t hits = 0;
    for (double o : overlaps) hits += o > threshold ? 1 : 0;
    total += double(hits) / double(overlaps.size());
  }
  return total / double(kAucThresholds);
}

double precision(const std::vector<PixelBox>& pred, const std::vector<PixelBox>& gt, double threshold) {
  check_lengths(pred, gt);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double dx = pred[i].center_x() - gt[i].center_x(), dy = pred[i].center_y() - gt[i].center_y();
    hits += std::hypot(dx, dy) <= threshold ? 1 : 0;
  }
  return double(hits) / double(pred.size());
}

double mean_iou(const std::vector<PixelBox>& pred, const std::vector<PixelBox>& gt) {
  check_lengths(pred, gt);
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) total += iou(pred[i], gt[i]);
  return total / double(pred.size());
}

}  // namespace mixformer
