// SPDX-License-Identifier: Apache-2.0
#include "mixformer/heads.hpp"

#include <algorithm>

namespace mixformer {

double BoundingBox::area() const {
  return std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0);
}

BoundingBox BoundingBox::clamped() const {
  auto c = [](double v) { return std::clamp(v, 0.0, 1.0); };
  return {c(x0), c(y0), c(x1), c(y1)};
}

std::array<double, 4> BoundingBox::to_center() const {
  return {center_x(), center_y(), width(), height()};
}

BoundingBox BoundingBox::from_center(double cx, double cy, double w, double h) {
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

template <typename T>
BoundingBox BoundingBox::from_tensor(const Tensor<T>& box) {
  if (box.numel() != 4) throw DimensionError("box tensor must hold 4 values, got " + to_string(box.shape()));
  return {double(box[0]), double(box[1]), double(box[2]), double(box[3])};
}

template <typename T>
Tensor<T> BoundingBox::to_tensor() const {
  return Tensor<T>({4}, {T(x0), T(y0), T(x1), T(y1)});
}

template BoundingBox BoundingBox::from_tensor(const Tensor<float>&);
template BoundingBox BoundingBox::from_tensor(const Tensor<double>&);
template Tensor<float> BoundingBox::to_tensor<float>() const;
template Tensor<double> BoundingBox::to_tensor<double>() const;

std::string to_string(HeadType head) { return head == HeadType::Corner ? "corner" : "query"; }

HeadType parse_head_type(std::string_view text) {
  if (text == "corner") return HeadType::Corner;
  if (text == "query") return HeadType::Query;
  throw ConfigError("unknown head '" + std::string(text) + "' (expected corner|query)");
}

template <typename T>
Tensor<T> soft_argmax(const Tensor<T>& score_map) {
  if (score_map.rank() != 2) throw DimensionError("soft_argmax expects [h,w], got " + to_string(score_map.shape()));
  const std::size_t h = score_map.dim(0), w = score_map.dim(1);
  if (h == 0 || w == 0) throw ConfigError("soft_argmax on an empty map");
  std::vector<T> coords(h * w * 2);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      coords[(i * w + j) * 2] = w == 1 ? T(0.5) : static_cast<T>(double(j) / double(w - 1));
      coords[(i * w + j) * 2 + 1] = h == 1 ? T(0.5) : static_cast<T>(double(i) / double(h - 1));
    }
  }
  const Tensor<T> p = softmax(reshape(score_map, {1, h * w}), 1);
  return reshape(matmul(p, Tensor<T>({h * w, 2}, std::move(coords))), {2});
}

template <typename T>
std::vector<std::size_t> CornerHead<T>::channel_schedule(std::size_t in_channels) {
  std::vector<std::size_t> channels{in_channels};
  for (std::size_t i = 0; i < kLayers; ++i) channels.push_back(std::max<std::size_t>(1, channels.back() / 2));
  return channels;
}

template <typename T>
CornerHead<T>::CornerHead(std::size_t in_channels, Rng& rng) {
  const auto ch = channel_schedule(in_channels);
  for (auto* stack : {&top_left, &bottom_right}) {
    for (std::size_t i = 0; i < kLayers; ++i) stack->emplace_back(ch[i], ch[i + 1], rng);
  }
  top_left_out = Conv2d<T>(ch.back(), 1, 1, 1, 0, rng);
  bottom_right_out = Conv2d<T>(ch.back(), 1, 1, 1, 0, rng);
}

template <typename T>
std::array<Tensor<T>, 2> CornerHead<T>::score_maps(const Tensor<T>& feat) const {
  if (feat.rank() != 3) throw DimensionError("corner head expects [C,h,w], got " + to_string(feat.shape()));
  auto run = [&](const std::vector<ConvBnRelu<T>>& stack, const Conv2d<T>& out) {
    Tensor<T> x = feat;
    for (const auto& layer : stack) x = layer(x);
    return reshape(out(x), {feat.dim(1), feat.dim(2)});
  };
  return {run(top_left, top_left_out), run(bottom_right, bottom_right_out)};
}

template <typename T>
Tensor<T> CornerHead<T>::operator()(const Tensor<T>& feat) const {
  const auto maps = score_maps(feat);
  const Tensor<T> tl = soft_argmax(maps[0]);
  const Tensor<T> br = soft_argmax(maps[1]);
  return concat<T>({minimum(tl, br), maximum(tl, br)}, 0);
}

template <typename T>
void CornerHead<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < top_left.size(); ++i) top_left[i].collect(out, prefix + ".tl.layer" + std::to_string(i + 1));
  top_left_out.collect(out, prefix + ".tl.out");
  for (std::size_t i = 0; i < bottom_right.size(); ++i) {
    bottom_right[i].collect(out, prefix + ".br.layer" + std::to_string(i + 1));
  }
  bottom_right_out.collect(out, prefix + ".br.out");
}

template <typename T>
QueryHead<T>::QueryHead(std::size_t dim, Rng& rng)
    : token(uniform_param<T>({1, dim}, 0.02, rng)), fc1(dim, dim, rng), fc2(dim, dim, rng), fc3(dim, 4, rng) {}

template <typename T>
Tensor<T> QueryHead<T>::operator()(const Tensor<T>& processed) const {
  const Tensor<T> cxcywh = sigmoid(fc3(relu(fc2(relu(fc1(processed))))));
  // Rows give x0, y0, x1, y1 as combinations of (cx, cy, w, h).
  static const Tensor<T> to_corners({4, 4}, {T(1), T(0), T(-0.5), T(0),  //
                                             T(0), T(1), T(0), T(-0.5),  //
                                             T(1), T(0), T(0.5), T(0),   //
                                             T(0), T(1), T(0), T(0.5)});
  return reshape(linear(cxcywh, to_corners, Tensor<T>()), {4});
}

template <typename T>
void QueryHead<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".token", token, true});
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
  fc3.collect(out, prefix + ".fc3");
}

template Tensor<float> soft_argmax(const Tensor<float>&);
template Tensor<double> soft_argmax(const Tensor<double>&);
template struct CornerHead<float>;
template struct CornerHead<double>;
template struct QueryHead<float>;
template struct QueryHead<double>;

}  // namespace mixformer
