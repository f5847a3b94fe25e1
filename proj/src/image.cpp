// SPDX-License-Identifier: Apache-2.0
#include "mixformer/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <string>

#include "mixformer/io.hpp"

namespace mixformer {

std::array<double, 3> Image::channel_mean() const {
  std::array<double, 3> sum{0.0, 0.0, 0.0};
  const std::size_t n = width * height;
  if (n == 0) return sum;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) sum[c] += data[i * 3 + c];
  }
  for (double& s : sum) s /= static_cast<double>(n);
  return sum;
}

namespace {

class HeaderReader {
 public:
  HeaderReader(const std::vector<std::uint8_t>& bytes, const std::string& name) : bytes_(bytes), name_(name) {}

  std::string token() {
    skip_space();
    std::string t;
    while (pos_ < bytes_.size() && !std::isspace(bytes_[pos_])) t.push_back(static_cast<char>(bytes_[pos_++]));
    if (t.empty()) fail("truncated header");
    return t;
  }

  std::size_t number() {
    const std::string t = token();
    if (!std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
      fail("bad header field '" + t + "'");
    }
    return std::stoul(t);
  }

  /// Position after the single whitespace byte that ends the header.
  std::size_t data_start() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) fail("missing separator before pixel data");
    return pos_ + 1;
  }

  [[noreturn]] void fail(const std::string& what) const { throw IoError(name_ + ": " + what); }

 private:
  void skip_space() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<std::uint8_t>& bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  HeaderReader reader(bytes, path.string());
  if (reader.token() != "P6") reader.fail("not a binary PPM (P6)");
  Image img;
  img.width = reader.number();
  img.height = reader.number();
  if (reader.number() != 255) reader.fail("only maxval 255 is supported");
  const std::size_t start = reader.data_start();
  const std::size_t need = img.width * img.height * 3;
  if (bytes.size() - start < need) reader.fail("truncated pixel data");
  img.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                  bytes.begin() + static_cast<std::ptrdiff_t>(start + need));
  return img;
}

std::vector<std::uint8_t> encode_ppm(const Image& image) {
  const std::string header = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.data.begin(), image.data.end());
  return out;
}

double iou(const PixelBox& a, const PixelBox& b) {
  const double w = std::min(a.x1(), b.x1()) - std::max(a.x, b.x);
  const double h = std::min(a.y1(), b.y1()) - std::max(a.y, b.y);
  const double inter = std::max(0.0, w) * std::max(0.0, h);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::array<double, 2> CropTransform::frame_to_normalized(double fx, double fy) const {
  return {(fx - origin_x) / side, (fy - origin_y) / side};
}

std::array<double, 2> CropTransform::normalized_to_frame(double nx, double ny) const {
  return {origin_x + nx * side, origin_y + ny * side};
}

BoundingBox CropTransform::normalize(const PixelBox& box) const {
  const auto a = frame_to_normalized(box.x, box.y);
  const auto b = frame_to_normalized(box.x1(), box.y1());
  return {a[0], a[1], b[0], b[1]};
}

PixelBox CropTransform::to_frame(const BoundingBox& box) const {
  const auto a = normalized_to_frame(box.x0, box.y0);
  const auto b = normalized_to_frame(box.x1, box.y1);
  return {a[0], a[1], b[0] - a[0], b[1] - a[1]};
}

Patch crop_square(const Image& frame, double cx, double cy, double side, std::size_t out_w, std::size_t out_h) {
  if (frame.width == 0 || frame.height == 0) throw ConfigError("cannot crop an empty frame");
  if (!(side > 0.0) || out_w == 0 || out_h == 0) throw ConfigError("crop side and output size must be positive");
  Patch p;
  p.width = out_w;
  p.height = out_h;
  p.transform = {cx - 0.5 * side, cy - 0.5 * side, side, out_w, out_h};
  p.pixels.resize(3 * out_w * out_h);
  const auto mean = frame.channel_mean();
  const auto W = static_cast<long>(frame.width), H = static_cast<long>(frame.height);
  auto sample = [&](long x, long y, std::size_t c) -> double {
    return (x < 0 || y < 0 || x >= W || y >= H) ? mean[c] : double(frame.at(std::size_t(x), std::size_t(y), c));
  };
  const double step_x = side / double(out_w), step_y = side / double(out_h);
  for (std::size_t v = 0; v < out_h; ++v) {
    // Pixel centres sit at half-integer frame coordinates.
    const double sy = p.transform.origin_y + (double(v) + 0.5) * step_y - 0.5;
    const double fy = std::floor(sy), wy = sy - fy;
    const long y0 = static_cast<long>(fy);
    for (std::size_t u = 0; u < out_w; ++u) {
      const double sx = p.transform.origin_x + (double(u) + 0.5) * step_x - 0.5;
      const double fx = std::floor(sx), wx = sx - fx;
      const long x0 = static_cast<long>(fx);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = (1 - wx) * sample(x0, y0, c) + wx * sample(x0 + 1, y0, c);
        const double bottom = (1 - wx) * sample(x0, y0 + 1, c) + wx * sample(x0 + 1, y0 + 1, c);
        p.pixels[(c * out_h + v) * out_w + u] = static_cast<float>((1 - wy) * top + wy * bottom);
      }
    }
  }
  return p;
}

double crop_side(const PixelBox& box, double factor, double min_side) {
  return std::max(min_side, factor * std::sqrt(std::max(0.0, box.w) * std::max(0.0, box.h)));
}

Patch flip_horizontal(const Patch& patch) {
  Patch out = patch;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t v = 0; v < patch.height; ++v) {
      const std::size_t row = (c * patch.height + v) * patch.width;
      for (std::size_t u = 0; u < patch.width; ++u) {
        out.pixels[row + u] = patch.pixels[row + patch.width - 1 - u];
      }
    }
  }
  return out;
}

Patch scale_brightness(const Patch& patch, double factor) {
  Patch out = patch;
  for (float& v : out.pixels) v = std::clamp(static_cast<float>(v * factor), 0.0f, 255.0f);
  return out;
}

template <typename T>
Tensor<T> to_input(const Patch& patch) {
  static constexpr double kMean[3] = {0.485, 0.456, 0.406};
  static constexpr double kStd[3] = {0.229, 0.224, 0.225};
  std::vector<T> values(patch.pixels.size());
  const std::size_t plane = patch.width * patch.height;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t c = i / plane;
    values[i] = static_cast<T>((double(patch.pixels[i]) / 255.0 - kMean[c]) / kStd[c]);
  }
  return Tensor<T>({3, patch.height, patch.width}, std::move(values));
}

template Tensor<float> to_input(const Patch&);
template Tensor<double> to_input(const Patch&);

}  // namespace mixformer
