// SPDX-License-Identifier: Apache-2.0
#include "mixformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace mixformer {

namespace {

template <typename T>
using Impl = TensorImpl<T>;

// C[m,n] (+)= op(A) * op(B) with fixed accumulation order.
// trans_a: A is stored [k,m]; trans_b: B is stored [n,k].
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool trans_a, bool trans_b) {
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = c + i * n;
      const T* arow = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = arow[p];
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const T* arow = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        T acc = T(0);
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        c[i * n + j] += acc;
      }
    }
  } else if (trans_a && !trans_b) {
    for (std::size_t p = 0; p < k; ++p) {
      const T* arow = a + p * m;
      const T* brow = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const T av = arow[i];
        T* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        T acc = T(0);
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] += acc;
      }
    }
  }
}

// Number of repetitions of `b` inside `a` under suffix broadcasting.
std::size_t broadcast_outer(const Shape& a, const Shape& b, const char* op) {
  bool ok = b.size() <= a.size();
  for (std::size_t i = 0; ok && i < b.size(); ++i) ok = a[a.size() - b.size() + i] == b[i];
  if (!ok) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(b) + " onto " + to_string(a));
  }
  return numel(b) == 0 ? 0 : numel(a) / numel(b);
}

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_broadcast(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Bwd bwd) {
  const std::size_t outer = broadcast_outer(a.shape(), b.shape(), name);
  const std::size_t inner = b.numel();
  std::vector<T> out(a.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = fwd(ad[o * inner + i], bd[i]);
  }
  Impl<T>* ai = a.impl().get();
  Impl<T>* bi = b.impl().get();
  return detail::make_result<T>(name, a.shape(), std::move(out), {&a, &b},
                                [ai, bi, outer, inner, bwd](std::span<const T> g, std::span<const T> y) {
                                  T* ga = ai->grad_buffer();
                                  T* gb = bi->grad_buffer();
                                  for (std::size_t o = 0; o < outer; ++o) {
                                    for (std::size_t i = 0; i < inner; ++i) {
                                      const std::size_t idx = o * inner + i;
                                      T da, db;
                                      bwd(ai->data[idx], bi->data[i], y[idx], g[idx], da, db);
                                      if (ga) ga[idx] += da;
                                      if (gb) gb[i] += db;
                                    }
                                  }
                                });
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const char* name, const Tensor<T>& a, Fwd fwd, Deriv deriv) {
  std::vector<T> out(a.numel());
  const auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i]);
  Impl<T>* ai = a.impl().get();
  return detail::make_result<T>(name, a.shape(), std::move(out), {&a},
                                [ai, deriv](std::span<const T> g, std::span<const T> y) {
                                  T* ga = ai->grad_buffer();
                                  if (!ga) return;
                                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(ai->data[i], y[i]);
                                });
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) + " differ");
}

// outer x n x inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + to_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_broadcast<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T, T, T g, T& da, T& db) { da = g; db = g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_broadcast<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T, T, T, T g, T& da, T& db) { da = g; db = -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_broadcast<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T x, T y, T, T g, T& da, T& db) { da = g * y; db = g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_broadcast<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T, T y, T out, T g, T& da, T& db) { da = g / y; db = -g * out / y; });
}

template <typename T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "minimum");
  return binary_broadcast<T>(
      "minimum", a, b, [](T x, T y) { return x <= y || std::isnan(x) ? x : y; },
      [](T x, T y, T, T g, T& da, T& db) {
        const bool first = x <= y;
        da = first ? g : T(0);
        db = first ? T(0) : g;
      });
}

template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "maximum");
  return binary_broadcast<T>(
      "maximum", a, b, [](T x, T y) { return x >= y || std::isnan(x) ? x : y; },
      [](T x, T y, T, T g, T& da, T& db) {
        const bool first = x >= y;
        da = first ? g : T(0);
        db = first ? T(0) : g;
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary<T>("scale", a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  return unary<T>("add_scalar", a, [value](T x) { return x + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary<T>("neg", a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary<T>("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return unary<T>("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return unary<T>(
      "abs", a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary<T>(
      "relu", a, [](T x) { return x > T(0) || std::isnan(x) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return unary<T>(
      "gelu", a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
        return cdf + x * pdf;
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary<T>(
      "sigmoid", a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  if (!(lo <= hi)) throw ConfigError("clamp: lower bound exceeds upper bound");
  return unary<T>(
      "clamp", a, [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  Impl<T>* ai = a.impl().get();
  return detail::make_result<T>("sum", Shape{}, {acc}, {&a}, [ai](std::span<const T> g, std::span<const T>) {
    T* ga = ai->grad_buffer();
    if (!ga) return;
    for (std::size_t i = 0; i < ai->data.size(); ++i) ga[i] += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto fail = [&] {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  };
  if (a.rank() < 2 || a.rank() > 3 || b.rank() < 2 || b.rank() > 3) fail();
  const std::size_t ba = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t bb = b.rank() == 3 ? b.dim(0) : 1;
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t k2 = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != k2) fail();
  if (ba != bb && ba != 1 && bb != 1) fail();
  const std::size_t batch = std::max(ba, bb);
  const bool batched = a.rank() == 3 || b.rank() == 3;
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};

  std::vector<T> out(batch * m * n, T(0));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  const std::size_t a_step = ba == 1 ? 0 : m * k;
  const std::size_t b_step = bb == 1 ? 0 : k * n;
  for (std::size_t i = 0; i < batch; ++i) {
    gemm(ad + i * a_step, bd + i * b_step, out.data() + i * m * n, m, k, n, false, false);
  }
  Impl<T>* ai = a.impl().get();
  Impl<T>* bi = b.impl().get();
  return detail::make_result<T>(
      "matmul", std::move(shape), std::move(out), {&a, &b},
      [=](std::span<const T> g, std::span<const T>) {
        T* ga = ai->grad_buffer();
        T* gb = bi->grad_buffer();
        for (std::size_t i = 0; i < batch; ++i) {
          const T* gi = g.data() + i * m * n;
          // dA = dC * B^T, dB = A^T * dC
          if (ga) gemm(gi, bi->data.data() + i * b_step, ga + i * a_step, m, n, k, false, true);
          if (gb) gemm(ai->data.data() + i * a_step, gi, gb + i * b_step, k, m, n, true, false);
        }
      });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + to_string(a.shape()));
  Shape shape = a.shape();
  const std::size_t r = shape[shape.size() - 2], c = shape[shape.size() - 1];
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  const std::size_t batch = a.numel() / std::max<std::size_t>(1, r * c);
  std::vector<T> out(a.numel());
  const auto ad = a.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = ad[b * r * c + i * c + j];
    }
  }
  Impl<T>* ai = a.impl().get();
  return detail::make_result<T>("transpose", std::move(shape), std::move(out), {&a},
                                [=](std::span<const T> g, std::span<const T>) {
                                  T* ga = ai->grad_buffer();
                                  if (!ga) return;
                                  for (std::size_t b = 0; b < batch; ++b) {
                                    for (std::size_t i = 0; i < r; ++i) {
                                      for (std::size_t j = 0; j < c; ++j) {
                                        ga[b * r * c + i * c + j] += g[b * r * c + j * r + i];
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  Impl<T>* ai = a.impl().get();
  return detail::make_result<T>("reshape", shape, std::move(out), {&a}, [ai](std::span<const T> g, std::span<const T>) {
    T* ga = ai->grad_buffer();
    if (!ga) return;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit s = split_axis(a.shape(), axis, "narrow");
  if (start + length > s.n) {
    throw DimensionError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") exceeds extent " + std::to_string(s.n) + " of " + to_string(a.shape()));
  }
  Shape shape = a.shape();
  shape[axis] = length;
  std::vector<T> out(s.outer * length * s.inner);
  const auto ad = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(ad.begin() + (o * s.n + start) * s.inner, length * s.inner, out.begin() + o * length * s.inner);
  }
  Impl<T>* ai = a.impl().get();
  return detail::make_result<T>("narrow", std::move(shape), std::move(out), {&a},
                                [=](std::span<const T> g, std::span<const T>) {
                                  T* ga = ai->grad_buffer();
                                  if (!ga) return;
                                  for (std::size_t o = 0; o < s.outer; ++o) {
                                    const T* src = g.data() + o * length * s.inner;
                                    T* dst = ga + (o * s.n + start) * s.inner;
                                    for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
                                  }
                                });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  if (parts.size() == 1) return parts.front();
  const Shape& ref = parts.front().shape();
  const AxisSplit s0 = split_axis(ref, axis, "concat");
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == ref.size();
    for (std::size_t i = 0; ok && i < ref.size(); ++i) ok = i == axis || p.dim(i) == ref[i];
    if (!ok) {
      throw DimensionError("concat: " + to_string(p.shape()) + " does not match " + to_string(ref) +
                           " outside axis " + std::to_string(axis));
    }
    extents.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  Shape shape = ref;
  shape[axis] = total;
  std::vector<T> out(s0.outer * total * s0.inner);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto pd = parts[p].data();
    const std::size_t chunk = extents[p] * s0.inner;
    for (std::size_t o = 0; o < s0.outer; ++o) {
      std::copy_n(pd.begin() + o * chunk, chunk, out.begin() + (o * total + offset) * s0.inner);
    }
    offset += extents[p];
  }
  std::vector<Impl<T>*> impls;
  for (const auto& p : parts) impls.push_back(p.impl().get());
  const std::size_t outer = s0.outer, inner = s0.inner;
  return detail::make_result<T>("concat", std::move(shape), std::move(out), parts,
                                [=](std::span<const T> g, std::span<const T>) {
                                  std::size_t off = 0;
                                  for (std::size_t p = 0; p < impls.size(); ++p) {
                                    T* gp = impls[p]->grad_buffer();
                                    const std::size_t chunk = extents[p] * inner;
                                    if (gp) {
                                      for (std::size_t o = 0; o < outer; ++o) {
                                        const T* src = g.data() + (o * total + off) * inner;
                                        for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += src[i];
                                      }
                                    }
                                    off += extents[p];
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Normalisation

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis, "softmax");
  std::vector<T> out(a.numel());
  const auto ad = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < s.n; ++i) mx = std::max(mx, ad[base + i * s.inner]);
      T total = T(0);
      for (std::size_t i = 0; i < s.n; ++i) {
        const T x = ad[base + i * s.inner];
        const T e = x == -std::numeric_limits<T>::infinity() ? T(0) : std::exp(x - mx);
        out[base + i * s.inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] /= total;
    }
  }
  Impl<T>* ai = a.impl().get();
  return detail::make_result<T>("softmax", a.shape(), std::move(out), {&a},
                                [=](std::span<const T> g, std::span<const T> y) {
                                  T* ga = ai->grad_buffer();
                                  if (!ga) return;
                                  for (std::size_t o = 0; o < s.outer; ++o) {
                                    for (std::size_t in = 0; in < s.inner; ++in) {
                                      const std::size_t base = o * s.n * s.inner + in;
                                      T dot = T(0);
                                      for (std::size_t i = 0; i < s.n; ++i) {
                                        dot += g[base + i * s.inner] * y[base + i * s.inner];
                                      }
                                      for (std::size_t i = 0; i < s.n; ++i) {
                                        const std::size_t idx = base + i * s.inner;
                                        ga[idx] += y[idx] * (g[idx] - dot);
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> mask_columns(const Tensor<T>& a, std::span<const std::uint8_t> masked) {
  if (a.rank() < 1 || masked.size() != a.dim(a.rank() - 1)) {
    throw DimensionError("mask_columns: mask of length " + std::to_string(masked.size()) + " for " +
                         to_string(a.shape()));
  }
  const std::size_t cols = masked.size();
  std::vector<std::uint8_t> mask(masked.begin(), masked.end());
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask[i % cols]) out[i] = -std::numeric_limits<T>::infinity();
  }
  Impl<T>* ai = a.impl().get();
  return detail::make_result<T>("mask_columns", a.shape(), std::move(out), {&a},
                                [=](std::span<const T> g, std::span<const T>) {
                                  T* ga = ai->grad_buffer();
                                  if (!ga) return;
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    if (!mask[i % cols]) ga[i] += g[i];
                                  }
                                });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, std::size_t axis, T eps) {
  if (!(eps > T(0))) throw ConfigError("layer_norm: eps must be positive");
  const AxisSplit s = split_axis(x.shape(), axis, "layer_norm");
  if (gain.numel() != s.n || bias.numel() != s.n) {
    throw DimensionError("layer_norm: gain/bias of " + to_string(gain.shape()) + "/" + to_string(bias.shape()) +
                         " for axis extent " + std::to_string(s.n));
  }
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(s.outer * s.inner);
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      T mu = T(0);
      for (std::size_t i = 0; i < s.n; ++i) mu += xd[base + i * s.inner];
      mu /= static_cast<T>(s.n);
      T var = T(0);
      for (std::size_t i = 0; i < s.n; ++i) {
        const T d = xd[base + i * s.inner] - mu;
        var += d * d;
      }
      var /= static_cast<T>(s.n);
      const T r = T(1) / std::sqrt(var + eps);
      rstd[o * s.inner + in] = r;
      for (std::size_t i = 0; i < s.n; ++i) {
        const std::size_t idx = base + i * s.inner;
        xhat[idx] = (xd[idx] - mu) * r;
        out[idx] = xhat[idx] * gd[i] + bd[i];
      }
    }
  }
  Impl<T>* xi = x.impl().get();
  Impl<T>* gi = gain.impl().get();
  Impl<T>* bi = bias.impl().get();
  return detail::make_result<T>(
      "layer_norm", x.shape(), std::move(out), {&x, &gain, &bias},
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](std::span<const T> g, std::span<const T>) {
        T* gx = xi->grad_buffer();
        T* gg = gi->grad_buffer();
        T* gb = bi->grad_buffer();
        const T inv_n = T(1) / static_cast<T>(s.n);
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.n * s.inner + in;
            T sum_d = T(0), sum_dx = T(0);
            for (std::size_t i = 0; i < s.n; ++i) {
              const std::size_t idx = base + i * s.inner;
              const T d = g[idx] * gi->data[i];
              sum_d += d;
              sum_dx += d * xhat[idx];
              if (gg) gg[i] += g[idx] * xhat[idx];
              if (gb) gb[i] += g[idx];
            }
            if (!gx) continue;
            const T r = rstd[o * s.inner + in];
            for (std::size_t i = 0; i < s.n; ++i) {
              const std::size_t idx = base + i * s.inner;
              const T d = g[idx] * gi->data[i];
              gx[idx] += r * (d - sum_d * inv_n - xhat[idx] * sum_dx * inv_n);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(x.rank() - 1) != weight.dim(1)) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                         to_string(weight.shape()));
  }
  const std::size_t in = weight.dim(1), out_f = weight.dim(0);
  if (bias.defined() && bias.numel() != out_f) {
    throw DimensionError("linear: bias " + to_string(bias.shape()) + " for " + std::to_string(out_f) + " outputs");
  }
  const std::size_t rows = x.numel() / in;
  Shape shape = x.shape();
  shape.back() = out_f;
  std::vector<T> out(rows * out_f, T(0));
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(bias.data().begin(), out_f, out.begin() + r * out_f);
  }
  gemm(x.data().data(), weight.data().data(), out.data(), rows, in, out_f, false, true);
  Impl<T>* xi = x.impl().get();
  Impl<T>* wi = weight.impl().get();
  const bool has_bias = bias.defined();
  Impl<T>* bi = has_bias ? bias.impl().get() : nullptr;
  auto backward = [=](std::span<const T> g, std::span<const T>) {
    if (T* gx = xi->grad_buffer()) gemm(g.data(), wi->data.data(), gx, rows, out_f, in, false, false);
    if (T* gw = wi->grad_buffer()) gemm(g.data(), xi->data.data(), gw, out_f, rows, in, true, false);
    if (bi) {
      if (T* gb = bi->grad_buffer()) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t o = 0; o < out_f; ++o) gb[o] += g[r * out_f + o];
        }
      }
    }
  };
  if (has_bias) return detail::make_result<T>("linear", std::move(shape), std::move(out), {&x, &weight, &bias}, backward);
  return detail::make_result<T>("linear", std::move(shape), std::move(out), {&x, &weight}, backward);
}

// ---------------------------------------------------------------------------
// Convolutions

std::size_t conv_output_extent(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ConfigError("convolution stride must be positive");
  const std::size_t padded = input + 2 * padding;
  if (padded < kernel) {
    throw ConfigError("convolution: kernel " + std::to_string(kernel) + " exceeds padded extent " +
                      std::to_string(padded));
  }
  return (padded - kernel) / stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t channels, height, width, kh, kw, out_h, out_w, stride, pad;
};

// Column matrix [C*kh*kw, out_h*out_w] with zero padding.
template <typename T>
std::vector<T> im2col(const T* x, const ConvGeometry& g) {
  const std::size_t cols = g.out_h * g.out_w;
  std::vector<T> col(g.channels * g.kh * g.kw * cols, T(0));
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = col.data() + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            row[oy * g.out_w + ox] = x[(c * g.height + iy) * g.width + ix];
          }
        }
      }
    }
  }
  return col;
}

template <typename T>
void col2im_add(const T* col, T* gx, const ConvGeometry& g) {
  const std::size_t cols = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            gx[(c * g.height + iy) * g.width + ix] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dParams params) {
  if (x.rank() != 3 || weight.rank() != 4 || weight.dim(1) != x.dim(0)) {
    throw DimensionError("conv2d: input " + to_string(x.shape()) + " incompatible with weight " +
                         to_string(weight.shape()));
  }
  const std::size_t cout = weight.dim(0);
  if (bias.defined() && bias.numel() != cout) {
    throw DimensionError("conv2d: bias " + to_string(bias.shape()) + " for " + std::to_string(cout) + " channels");
  }
  ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2), weight.dim(2), weight.dim(3), 0, 0, params.stride, params.padding};
  geo.out_h = conv_output_extent(geo.height, geo.kh, geo.stride, geo.pad);
  geo.out_w = conv_output_extent(geo.width, geo.kw, geo.stride, geo.pad);
  const std::size_t k = geo.channels * geo.kh * geo.kw;
  const std::size_t cols = geo.out_h * geo.out_w;

  std::vector<T> col = im2col(x.data().data(), geo);
  std::vector<T> out(cout * cols, T(0));
  if (bias.defined()) {
    for (std::size_t c = 0; c < cout; ++c) std::fill_n(out.begin() + c * cols, cols, bias.data()[c]);
  }
  gemm(weight.data().data(), col.data(), out.data(), cout, k, cols, false, false);

  Impl<T>* xi = x.impl().get();
  Impl<T>* wi = weight.impl().get();
  const bool has_bias = bias.defined();
  Impl<T>* bi = has_bias ? bias.impl().get() : nullptr;
  auto backward = [=, col = std::move(col)](std::span<const T> g, std::span<const T>) {
    if (T* gw = wi->grad_buffer()) gemm(g.data(), col.data(), gw, cout, cols, k, false, true);
    if (T* gx = xi->grad_buffer()) {
      std::vector<T> gcol(k * cols, T(0));
      gemm(wi->data.data(), g.data(), gcol.data(), k, cout, cols, true, false);
      col2im_add(gcol.data(), gx, geo);
    }
    if (bi) {
      if (T* gb = bi->grad_buffer()) {
        for (std::size_t c = 0; c < cout; ++c) {
          for (std::size_t i = 0; i < cols; ++i) gb[c] += g[c * cols + i];
        }
      }
    }
  };
  Shape shape{cout, geo.out_h, geo.out_w};
  if (has_bias) return detail::make_result<T>("conv2d", std::move(shape), std::move(out), {&x, &weight, &bias}, backward);
  return detail::make_result<T>("conv2d", std::move(shape), std::move(out), {&x, &weight}, backward);
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, Conv2dParams params) {
  if (x.rank() != 3 || kernel.rank() != 3 || kernel.dim(0) != x.dim(0)) {
    throw DimensionError("depthwise_conv2d: input " + to_string(x.shape()) + " incompatible with kernel " +
                         to_string(kernel.shape()));
  }
  const std::size_t channels = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t kh = kernel.dim(1), kw = kernel.dim(2);
  if (bias.defined() && bias.numel() != channels) {
    throw DimensionError("depthwise_conv2d: bias " + to_string(bias.shape()) + " for " + std::to_string(channels) +
                         " channels");
  }
  const std::size_t stride = params.stride, pad = params.padding;
  const std::size_t oh = conv_output_extent(h, kh, stride, pad);
  const std::size_t ow = conv_output_extent(w, kw, stride, pad);
  std::vector<T> out(channels * oh * ow, T(0));
  const auto xd = x.data();
  const auto kd = kernel.data();

  // Visits every (output, input, tap) triple of one channel in a fixed order.
  auto for_each_tap = [=](std::size_t c, auto&& fn) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            fn((c * oh + oy) * ow + ox, (c * h + iy) * w + ix, (c * kh + ky) * kw + kx);
          }
        }
      }
    }
  };
  for (std::size_t c = 0; c < channels; ++c) {
    const T b = bias.defined() ? bias.data()[c] : T(0);
    for (std::size_t i = 0; i < oh * ow; ++i) out[c * oh * ow + i] = b;
    for_each_tap(c, [&](std::size_t o, std::size_t in, std::size_t t) { out[o] += xd[in] * kd[t]; });
  }

  Impl<T>* xi = x.impl().get();
  Impl<T>* ki = kernel.impl().get();
  const bool has_bias = bias.defined();
  Impl<T>* bi = has_bias ? bias.impl().get() : nullptr;
  auto backward = [=](std::span<const T> g, std::span<const T>) {
    T* gx = xi->grad_buffer();
    T* gk = ki->grad_buffer();
    for (std::size_t c = 0; c < channels; ++c) {
      for_each_tap(c, [&](std::size_t o, std::size_t in, std::size_t t) {
        if (gx) gx[in] += g[o] * ki->data[t];
        if (gk) gk[t] += g[o] * xi->data[in];
      });
    }
    if (bi) {
      if (T* gb = bi->grad_buffer()) {
        for (std::size_t c = 0; c < channels; ++c) {
          for (std::size_t i = 0; i < oh * ow; ++i) gb[c] += g[c * oh * ow + i];
        }
      }
    }
  };
  Shape shape{channels, oh, ow};
  if (has_bias) {
    return detail::make_result<T>("depthwise_conv2d", std::move(shape), std::move(out), {&x, &kernel, &bias}, backward);
  }
  return detail::make_result<T>("depthwise_conv2d", std::move(shape), std::move(out), {&x, &kernel}, backward);
}

template <typename T>
Tensor<T> batch_norm_frozen(const Tensor<T>& x, const Tensor<T>& running_mean, const Tensor<T>& running_var,
                            const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  if (!(eps > T(0))) throw ConfigError("batch_norm_frozen: eps must be positive");
  if (x.rank() != 3) throw DimensionError("batch_norm_frozen expects [C,H,W], got " + to_string(x.shape()));
  const std::size_t channels = x.dim(0), hw = x.dim(1) * x.dim(2);
  for (const Tensor<T>* p : {&running_mean, &running_var, &gain, &bias}) {
    if (p->numel() != channels) {
      throw DimensionError("batch_norm_frozen: per-channel tensor " + to_string(p->shape()) + " for " +
                           std::to_string(channels) + " channels");
    }
  }
  std::vector<T> inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) inv_std[c] = T(1) / std::sqrt(running_var.data()[c] + eps);
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t c = 0; c < channels; ++c) {
    const T m = running_mean.data()[c], s = inv_std[c], gv = gain.data()[c], bv = bias.data()[c];
    for (std::size_t i = 0; i < hw; ++i) out[c * hw + i] = (xd[c * hw + i] - m) * s * gv + bv;
  }
  Impl<T>* xi = x.impl().get();
  Impl<T>* mi = running_mean.impl().get();
  Impl<T>* gi = gain.impl().get();
  Impl<T>* bi = bias.impl().get();
  return detail::make_result<T>(
      "batch_norm_frozen", x.shape(), std::move(out), {&x, &gain, &bias},
      [=, inv_std = std::move(inv_std)](std::span<const T> g, std::span<const T>) {
        T* gx = xi->grad_buffer();
        T* gg = gi->grad_buffer();
        T* gb = bi->grad_buffer();
        for (std::size_t c = 0; c < channels; ++c) {
          const T m = mi->data[c], s = inv_std[c], gv = gi->data[c];
          for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t idx = c * hw + i;
            if (gx) gx[idx] += g[idx] * s * gv;
            if (gg) gg[c] += g[idx] * (xi->data[idx] - m) * s;
            if (gb) gb[c] += g[idx];
          }
        }
      });
}

template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& map) {
  if (map.rank() != 3) throw DimensionError("map_to_tokens expects [C,H,W], got " + to_string(map.shape()));
  return transpose(reshape(map, Shape{map.dim(0), map.dim(1) * map.dim(2)}));
}

template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, std::size_t height, std::size_t width) {
  if (tokens.rank() != 2 || tokens.dim(0) != height * width) {
    throw DimensionError("tokens_to_map: " + to_string(tokens.shape()) + " cannot form a " + std::to_string(height) +
                         "x" + std::to_string(width) + " map");
  }
  return reshape(transpose(tokens), Shape{tokens.dim(1), height, width});
}

template <typename T>
Tensor<T> roi_align(const Tensor<T>& x, const std::array<double, 4>& box, std::size_t grid) {
  if (x.rank() != 3) throw DimensionError("roi_align expects [C,H,W], got " + to_string(x.shape()));
  if (grid == 0) throw ConfigError("roi_align: grid must be positive");
  const std::size_t channels = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == 0 || w == 0) throw ConfigError("roi_align on an empty map");
  const double sx = static_cast<double>(w - 1), sy = static_cast<double>(h - 1);
  const double fx0 = box[0] * sx, fy0 = box[1] * sy, fx1 = box[2] * sx, fy1 = box[3] * sy;
  const bool degenerate = (box[2] - box[0]) * (box[3] - box[1]) <= 0.0;

  struct Sample {
    std::array<std::size_t, 4> index;
    std::array<T, 4> weight;
  };
  std::vector<Sample> samples(grid * grid);
  const auto clampd = [](double v, double hi) { return std::min(std::max(v, 0.0), hi); };
  for (std::size_t a = 0; a < grid; ++a) {
    for (std::size_t b = 0; b < grid; ++b) {
      Sample& s = samples[a * grid + b];
      if (degenerate) {
        const auto cx = static_cast<std::size_t>(std::lround(clampd(0.5 * (fx0 + fx1), sx)));
        const auto cy = static_cast<std::size_t>(std::lround(clampd(0.5 * (fy0 + fy1), sy)));
        s.index = {cy * w + cx, cy * w + cx, cy * w + cx, cy * w + cx};
        s.weight = {T(1), T(0), T(0), T(0)};
        continue;
      }
      const double ty = grid == 1 ? 0.5 : static_cast<double>(a) / static_cast<double>(grid - 1);
      const double tx = grid == 1 ? 0.5 : static_cast<double>(b) / static_cast<double>(grid - 1);
      const double py = clampd(fy0 + ty * (fy1 - fy0), sy);
      const double px = clampd(fx0 + tx * (fx1 - fx0), sx);
      const auto y0 = static_cast<std::size_t>(std::floor(py));
      const auto x0 = static_cast<std::size_t>(std::floor(px));
      const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double wy = py - static_cast<double>(y0), wx = px - static_cast<double>(x0);
      s.index = {y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1};
      s.weight = {static_cast<T>((1 - wy) * (1 - wx)), static_cast<T>((1 - wy) * wx), static_cast<T>(wy * (1 - wx)),
                  static_cast<T>(wy * wx)};
    }
  }
  const std::size_t hw = h * w;
  std::vector<T> out(grid * grid * channels, T(0));
  const auto xd = x.data();
  for (std::size_t s = 0; s < samples.size(); ++s) {
    for (std::size_t c = 0; c < channels; ++c) {
      T acc = T(0);
      for (std::size_t q = 0; q < 4; ++q) acc += samples[s].weight[q] * xd[c * hw + samples[s].index[q]];
      out[s * channels + c] = acc;
    }
  }
  Impl<T>* xi = x.impl().get();
  return detail::make_result<T>("roi_align", Shape{grid * grid, channels}, std::move(out), {&x},
                                [=, samples = std::move(samples)](std::span<const T> g, std::span<const T>) {
                                  T* gx = xi->grad_buffer();
                                  if (!gx) return;
                                  for (std::size_t s = 0; s < samples.size(); ++s) {
                                    for (std::size_t c = 0; c < channels; ++c) {
                                      for (std::size_t q = 0; q < 4; ++q) {
                                        gx[c * hw + samples[s].index[q]] += samples[s].weight[q] * g[s * channels + c];
                                      }
                                    }
                                  }
                                });
}

#define MIXFORMER_INSTANTIATE_OPS(T)                                                                         \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> minimum(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> maximum(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> scale(const Tensor<T>&, T);                                                             \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                        \
  template Tensor<T> neg(const Tensor<T>&);                                                                  \
  template Tensor<T> exp(const Tensor<T>&);                                                                  \
  template Tensor<T> log(const Tensor<T>&);                                                                  \
  template Tensor<T> abs(const Tensor<T>&);                                                                  \
  template Tensor<T> relu(const Tensor<T>&);                                                                 \
  template Tensor<T> gelu(const Tensor<T>&);                                                                 \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                              \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                                          \
  template Tensor<T> sum(const Tensor<T>&);                                                                  \
  template Tensor<T> mean(const Tensor<T>&);                                                                 \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> transpose(const Tensor<T>&);                                                            \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                                \
  template Tensor<T> narrow(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                        \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                     \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                                 \
  template Tensor<T> mask_columns(const Tensor<T>&, std::span<const std::uint8_t>);                          \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, T);       \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dParams);             \
  template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dParams);   \
  template Tensor<T> batch_norm_frozen(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                       const Tensor<T>&, T);                                                 \
  template Tensor<T> map_to_tokens(const Tensor<T>&);                                                        \
  template Tensor<T> tokens_to_map(const Tensor<T>&, std::size_t, std::size_t);                              \
  template Tensor<T> roi_align(const Tensor<T>&, const std::array<double, 4>&, std::size_t);

MIXFORMER_INSTANTIATE_OPS(float)
MIXFORMER_INSTANTIATE_OPS(double)

}  // namespace mixformer
