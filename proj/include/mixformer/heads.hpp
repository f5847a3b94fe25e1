// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "mixformer/nn.hpp"

namespace mixformer {

/// Corner-form box in normalised search-region coordinates.
struct BoundingBox {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const;  // 0 for inverted or degenerate boxes
  double center_x() const { return 0.5 * (x0 + x1); }
  double center_y() const { return 0.5 * (y0 + y1); }
  bool valid() const { return x0 <= x1 && y0 <= y1; }
  /// Coordinates clamped into [0,1].
  BoundingBox clamped() const;
  std::array<double, 4> as_array() const { return {x0, y0, x1, y1}; }
  /// (cx, cy, w, h).
  std::array<double, 4> to_center() const;
  static BoundingBox from_center(double cx, double cy, double w, double h);
  template <typename T>
  static BoundingBox from_tensor(const Tensor<T>& box);
  template <typename T>
  Tensor<T> to_tensor() const;

  bool operator==(const BoundingBox&) const = default;
};

enum class HeadType { Corner, Query };

std::string to_string(HeadType head);
HeadType parse_head_type(std::string_view text);

/// Expected (x, y) under softmax(map) over all h*w positions, with column j
/// at j/(w-1) and row i at i/(h-1). An extent of 1 sits at 0.5. Returns [2].
template <typename T>
Tensor<T> soft_argmax(const Tensor<T>& score_map);

/// Two Conv-BN-ReLU stacks (top-left, bottom-right), channels halving per
/// layer, each closed by a 1x1 conv to a single score map.
template <typename T>
struct CornerHead {
  static constexpr std::size_t kLayers = 4;

  std::vector<ConvBnRelu<T>> top_left, bottom_right;
  Conv2d<T> top_left_out, bottom_right_out;

  CornerHead() = default;
  CornerHead(std::size_t in_channels, Rng& rng);

  /// Score maps [h, w] of the two corners.
  std::array<Tensor<T>, 2> score_maps(const Tensor<T>& feat) const;
  /// Box [x0, y0, x1, y1]; corners are ordered per axis with min/max, so the
  /// box is valid and inside [0,1]^2.
  Tensor<T> operator()(const Tensor<T>& feat) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;

  static std::vector<std::size_t> channel_schedule(std::size_t in_channels);
};

/// Regression token plus a 3-layer FFN decoded through a logistic squash to
/// (cx, cy, w, h) and then to corner form.
template <typename T>
struct QueryHead {
  Tensor<T> token;  // [1, dim]
  Linear<T> fc1, fc2, fc3;

  QueryHead() = default;
  QueryHead(std::size_t dim, Rng& rng);

  /// `processed` is the regression token after the final stage, [1, dim].
  /// Returns the unclamped corner box [4].
  Tensor<T> operator()(const Tensor<T>& processed) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

}  // namespace mixformer
