// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "mixformer/tensor.hpp"

// Differentiable tensor operations. Every op is deterministic: reductions run
// in a fixed sequential order so repeated calls are bit-identical.
namespace mixformer {

// Elementwise binary ops. `b` must have the same shape as `a` or a trailing
// suffix of it (including a scalar), in which case it is repeated over the
// leading axes of `a`.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

// Elementwise min/max of equal-shape tensors; ties route the gradient to `a`.
template <typename T> Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T value);
template <typename T> Tensor<T> neg(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
template <typename T> Tensor<T> abs(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
/// Exact GELU, x * Phi(x).
template <typename T> Tensor<T> gelu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
/// Gradient passes only where lo < a < hi.
template <typename T> Tensor<T> clamp(const Tensor<T>& a, T lo, T hi);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

/// [..,m,k] x [..,k,n]. Rank 2 or 3; a rank-2 operand (or batch extent 1)
/// is shared across the other operand's batch.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// Swaps the last two axes.
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, const Shape& shape);
template <typename T> Tensor<T> narrow(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

/// Max-subtracted softmax along `axis`. Entries equal to -inf get weight 0.
template <typename T> Tensor<T> softmax(const Tensor<T>& a, std::size_t axis);
/// Sets the listed columns (last axis) of a matrix to -inf; they receive no gradient.
template <typename T> Tensor<T> mask_columns(const Tensor<T>& a, std::span<const std::uint8_t> masked);

/// Normalises along `axis` and applies per-feature gain and bias (both shaped
/// like that axis).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, std::size_t axis, T eps);

/// x[.., in] * W[out, in]^T + b[out]. `bias` may be undefined.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

std::size_t conv_output_extent(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t padding);

/// Dense zero-padded convolution, x[Cin,H,W] with weight[Cout,Cin,kh,kw].
/// `bias` may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dParams params);

/// Per-channel zero-padded convolution, x[C,H,W] with kernel[C,kh,kw].
/// `bias` may be undefined.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, Conv2dParams params);

/// Inference-form batch norm on x[C,H,W]; running statistics are constants.
template <typename T>
Tensor<T> batch_norm_frozen(const Tensor<T>& x, const Tensor<T>& running_mean, const Tensor<T>& running_var,
                            const Tensor<T>& gain, const Tensor<T>& bias, T eps);

/// [C,H,W] -> [H*W, C] tokens in raster order.
template <typename T> Tensor<T> map_to_tokens(const Tensor<T>& map);
/// [H*W, C] -> [C,H,W].
template <typename T> Tensor<T> tokens_to_map(const Tensor<T>& tokens, std::size_t height, std::size_t width);

/// Bilinear sampling of x[C,H,W] on a grid x grid lattice spanning the
/// normalised box (x0, y0, x1, y1); corner samples sit exactly on the box
/// corners. Returns [grid*grid, C]. A zero-area box copies the nearest cell.
template <typename T>
Tensor<T> roi_align(const Tensor<T>& x, const std::array<double, 4>& box, std::size_t grid);

}  // namespace mixformer
