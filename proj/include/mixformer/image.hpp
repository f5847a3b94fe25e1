// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "mixformer/heads.hpp"

namespace mixformer {

/// 8-bit RGB, row-major, interleaved.
struct Image {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> data;

  Image() = default;
  Image(std::size_t width, std::size_t height) : width(width), height(height), data(width * height * 3, 0) {}

  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return data[(y * width + x) * 3 + c]; }
  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return data[(y * width + x) * 3 + c]; }
  std::array<double, 3> channel_mean() const;
  bool operator==(const Image&) const = default;
};

/// Binary PPM (P6, maxval 255).
Image read_ppm(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_ppm(const Image& image);

/// Frame-space box: top-left corner plus size, in pixels.
struct PixelBox {
  double x = 0.0, y = 0.0, w = 0.0, h = 0.0;

  double x1() const { return x + w; }
  double y1() const { return y + h; }
  double center_x() const { return x + 0.5 * w; }
  double center_y() const { return y + 0.5 * h; }
  double area() const { return w > 0.0 && h > 0.0 ? w * h : 0.0; }
  bool operator==(const PixelBox&) const = default;
};

double iou(const PixelBox& a, const PixelBox& b);

/// Square crop of side `side` frame pixels with top-left at `origin`,
/// resampled to out_w x out_h. Normalised patch coordinates are
/// (frame - origin) / side, so the mapping is an exact affine bijection.
struct CropTransform {
  double origin_x = 0.0, origin_y = 0.0, side = 1.0;
  std::size_t out_w = 1, out_h = 1;

  std::array<double, 2> frame_to_normalized(double fx, double fy) const;
  std::array<double, 2> normalized_to_frame(double nx, double ny) const;
  BoundingBox normalize(const PixelBox& box) const;
  PixelBox to_frame(const BoundingBox& box) const;
};

/// Resampled crop: planar RGB [3, height, width] in 0..255 plus its mapping.
struct Patch {
  std::size_t width = 0, height = 0;
  std::vector<float> pixels;
  CropTransform transform;

  bool operator==(const Patch& o) const { return width == o.width && height == o.height && pixels == o.pixels; }
};

/// Bilinear resampling of the square centred at (cx, cy); samples outside
/// the frame take the per-channel frame mean.
Patch crop_square(const Image& frame, double cx, double cy, double side, std::size_t out_w, std::size_t out_h);

/// factor * sqrt(w * h), at least `min_side`.
double crop_side(const PixelBox& box, double factor, double min_side = 0.0);

Patch flip_horizontal(const Patch& patch);
Patch scale_brightness(const Patch& patch, double factor);

/// ImageNet mean/std normalisation to a [3,h,w] tensor.
template <typename T>
Tensor<T> to_input(const Patch& patch);

}  // namespace mixformer
