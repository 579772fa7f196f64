#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <thread>
#include <vector>

#include <Eigen/Core>

#include "l2sm/tensor.hpp"

namespace l2sm {

// ---------------------------------------------------------------------------
// Threading. Default is one thread, which keeps every kernel bit-deterministic.

namespace detail {
inline std::atomic<unsigned>& thread_setting() {
  static std::atomic<unsigned> n{1};
  return n;
}
}  // namespace detail

inline unsigned kernel_threads() { return detail::thread_setting().load(); }
inline void set_kernel_threads(unsigned n) { detail::thread_setting().store(std::max(1u, n)); }

/// Runs fn(chunk, begin, end) over [0, n) split into at most kernel_threads() chunks.
template <typename Fn>
void parallel_chunks(std::size_t n, Fn&& fn) {
  const std::size_t chunks = std::min<std::size_t>(kernel_threads(), n);
  if (chunks <= 1) {
    fn(std::size_t{0}, std::size_t{0}, n);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(chunks - 1);
  const std::size_t per = (n + chunks - 1) / chunks;
  for (std::size_t c = 1; c < chunks; ++c) {
    const std::size_t b = std::min(n, c * per), e = std::min(n, (c + 1) * per);
    pool.emplace_back([&fn, c, b, e] { fn(c, b, e); });
  }
  fn(std::size_t{0}, std::size_t{0}, std::min(n, per));
}

inline std::size_t chunk_count(std::size_t n) {
  return std::max<std::size_t>(1, std::min<std::size_t>(kernel_threads(), n));
}

// ---------------------------------------------------------------------------
// Matrix products (Eigen GEMM over row-major maps).

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
}  // namespace detail

/// C[m x n] (+)= op(A) * op(B), all row-major raw buffers.
/// A is stored [m x k] (or [k x m] when trans_a), B is [k x n] (or [n x k] when trans_b).
inline void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n, bool trans_a, bool trans_b, bool accumulate) {
  using detail::ConstMap;
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
             N = static_cast<Eigen::Index>(n);
  detail::MutMap C(c, M, N);
  if (!accumulate) C.setZero();
  if (!trans_a && !trans_b) {
    C.noalias() += ConstMap(a, M, K) * ConstMap(b, K, N);
  } else if (trans_a && !trans_b) {
    C.noalias() += ConstMap(a, K, M).transpose() * ConstMap(b, K, N);
  } else if (!trans_a && trans_b) {
    C.noalias() += ConstMap(a, M, K) * ConstMap(b, N, K).transpose();
  } else {
    C.noalias() += ConstMap(a, K, M).transpose() * ConstMap(b, N, K).transpose();
  }
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  Tensor c({a.extent(0), b.extent(1)});
  gemm(a.raw(), b.raw(), c.raw(), a.extent(0), a.extent(1), b.extent(1), false, false, false);
  return c;
}

/// aᵀ·b for a [K x M], b [K x N].
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(0) != b.extent(0)) {
    throw ShapeError("matmul_tn: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  Tensor c({a.extent(1), b.extent(1)});
  gemm(a.raw(), b.raw(), c.raw(), a.extent(1), a.extent(0), b.extent(1), true, false, false);
  return c;
}

/// a·bᵀ for a [M x K], b [N x K].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(1)) {
    throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  Tensor c({a.extent(0), b.extent(0)});
  gemm(a.raw(), b.raw(), c.raw(), a.extent(0), a.extent(1), b.extent(0), false, true, false);
  return c;
}

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation, zero padding) via im2col.

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel_h, kernel_w;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kernel_h * kernel_w; }
  std::size_t out_pixels() const { return out_h * out_w; }
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad, const char* axis) {
  if (stride == 0) throw InvalidArgument("conv2d: stride must be >= 1");
  const std::size_t padded = in + 2 * pad;
  if (k > padded || (padded - k) % stride != 0) {
    throw ShapeError(std::string("conv2d: non-integral output ") + axis + " for extent " +
                     std::to_string(in) + ", kernel " + std::to_string(k) + ", stride " +
                     std::to_string(stride) + ", pad " + std::to_string(pad));
  }
  return (padded - k) / stride + 1;
}

inline ConvGeometry conv_geometry(const Shape& input, const Shape& kernels, std::size_t stride,
                                  std::size_t pad) {
  if (input.size() != 4 || kernels.size() != 4) {
    throw ShapeError("conv2d: expected rank-4 input and kernels, got " + shape_str(input) +
                     " and " + shape_str(kernels));
  }
  if (input[1] != kernels[1]) {
    throw ShapeError("conv2d: channel mismatch " + shape_str(input) + " vs " + shape_str(kernels));
  }
  ConvGeometry g{input[1], input[2], input[3], kernels[2], kernels[3], stride, pad, 0, 0};
  g.out_h = conv_out_extent(g.height, g.kernel_h, stride, pad, "height");
  g.out_w = conv_out_extent(g.width, g.kernel_w, stride, pad, "width");
  return g;
}

/// Unfolds one C×H×W image into a [C·kh·kw x H'·W'] column matrix.
inline void im2col(const double* image, const ConvGeometry& g, double* cols) {
  const std::size_t P = g.out_pixels();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        double* dst = cols + ((c * g.kernel_h + ki) * g.kernel_w + kj) * P;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                ix < static_cast<std::ptrdiff_t>(g.width);
            dst[oy * g.out_w + ox] =
                inside ? image[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                               static_cast<std::size_t>(ix)]
                       : 0.0;
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters-adds columns back into a zeroed C×H×W image.
inline void col2im(const double* cols, const ConvGeometry& g, double* image) {
  const std::size_t P = g.out_pixels();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        const double* src = cols + ((c * g.kernel_h + ki) * g.kernel_w + kj) * P;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            image[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                  static_cast<std::size_t>(ix)] += src[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

inline Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride,
                     std::size_t pad) {
  const ConvGeometry g = conv_geometry(input.shape(), kernels.shape(), stride, pad);
  const std::size_t N = input.extent(0), F = kernels.extent(0);
  Tensor out({N, F, g.out_h, g.out_w});
  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t out_stride = F * g.out_pixels();
  parallel_chunks(N, [&](std::size_t, std::size_t begin, std::size_t end) {
    std::vector<double> cols(g.patch() * g.out_pixels());
    for (std::size_t n = begin; n < end; ++n) {
      im2col(input.raw() + n * in_stride, g, cols.data());
      gemm(kernels.raw(), cols.data(), out.raw() + n * out_stride, F, g.patch(), g.out_pixels(),
           false, false, false);
    }
  });
  return out;
}

/// Gradient of conv2d with respect to its input.
inline Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& kernels,
                                    const Shape& input_shape, std::size_t stride,
                                    std::size_t pad) {
  const ConvGeometry g = conv_geometry(input_shape, kernels.shape(), stride, pad);
  const std::size_t N = input_shape[0], F = kernels.extent(0);
  if (grad_out.shape() != Shape{N, F, g.out_h, g.out_w}) {
    throw ShapeError("conv2d backward: gradient shape " + shape_str(grad_out.shape()) +
                     " does not match forward output");
  }
  Tensor grad_in(input_shape);
  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t out_stride = F * g.out_pixels();
  parallel_chunks(N, [&](std::size_t, std::size_t begin, std::size_t end) {
    std::vector<double> cols(g.patch() * g.out_pixels());
    for (std::size_t n = begin; n < end; ++n) {
      gemm(kernels.raw(), grad_out.raw() + n * out_stride, cols.data(), g.patch(), F,
           g.out_pixels(), true, false, false);
      col2im(cols.data(), g, grad_in.raw() + n * in_stride);
    }
  });
  return grad_in;
}

/// Gradient of conv2d with respect to its kernels (summed over the batch).
inline Tensor conv2d_backward_kernels(const Tensor& input, const Tensor& grad_out,
                                      const Shape& kernel_shape, std::size_t stride,
                                      std::size_t pad) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel_shape, stride, pad);
  const std::size_t N = input.extent(0), F = kernel_shape[0];
  if (grad_out.shape() != Shape{N, F, g.out_h, g.out_w}) {
    throw ShapeError("conv2d backward: gradient shape " + shape_str(grad_out.shape()) +
                     " does not match forward output");
  }
  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t out_stride = F * g.out_pixels();
  const std::size_t chunks = chunk_count(N);
  std::vector<Tensor> partial(chunks, Tensor(kernel_shape));
  parallel_chunks(N, [&](std::size_t chunk, std::size_t begin, std::size_t end) {
    std::vector<double> cols(g.patch() * g.out_pixels());
    for (std::size_t n = begin; n < end; ++n) {
      im2col(input.raw() + n * in_stride, g, cols.data());
      gemm(grad_out.raw() + n * out_stride, cols.data(), partial[chunk].raw(), F, g.out_pixels(),
           g.patch(), false, true, true);
    }
  });
  for (std::size_t c = 1; c < chunks; ++c) {
    for (std::size_t i = 0; i < partial[0].size(); ++i) partial[0][i] += partial[c][i];
  }
  return std::move(partial[0]);
}

// ---------------------------------------------------------------------------
// Max pooling. Ties go to the lowest flat index inside the window.

struct PoolResult {
  Tensor output;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

inline PoolResult maxpool2d(const Tensor& input, std::size_t window, std::size_t stride) {
  require_rank(input, 4, "maxpool2d");
  if (window == 0 || stride == 0) throw InvalidArgument("maxpool2d: window and stride must be >= 1");
  const std::size_t N = input.extent(0), C = input.extent(1), H = input.extent(2),
                    W = input.extent(3);
  if (window > H || window > W) {
    throw ShapeError("maxpool2d: window " + std::to_string(window) + " larger than input " +
                     shape_str(input.shape()));
  }
  const std::size_t Ho = (H - window) / stride + 1, Wo = (W - window) / stride + 1;
  PoolResult r{Tensor({N, C, Ho, Wo}), std::vector<std::size_t>(N * C * Ho * Wo)};
  std::size_t o = 0;
  const double* in = input.raw();
  for (std::size_t plane = 0; plane < N * C; ++plane) {
    const std::size_t base = plane * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox, ++o) {
        const std::size_t corner = base + oy * stride * W + ox * stride;
        std::size_t best = corner;
        double best_v = in[corner];
        for (std::size_t dy = 0; dy < window; ++dy) {
          const std::size_t row = corner + dy * W;
          for (std::size_t dx = 0; dx < window; ++dx) {
            if (in[row + dx] > best_v) {
              best_v = in[row + dx];
              best = row + dx;
            }
          }
        }
        r.output[o] = best_v;
        r.argmax[o] = best;
      }
    }
  }
  return r;
}

inline Tensor maxpool2d_backward(const Tensor& grad_out, const std::vector<std::size_t>& argmax,
                                 const Shape& input_shape) {
  if (grad_out.size() != argmax.size()) {
    throw ShapeError("maxpool2d backward: gradient " + shape_str(grad_out.shape()) +
                     " does not match recorded indices");
  }
  Tensor grad_in(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) grad_in[argmax[i]] += grad_out[i];
  return grad_in;
}

// ---------------------------------------------------------------------------
// Reductions and elementwise helpers.

/// Euclidean norm along `axis`; the axis is removed (rank-1 input yields shape [1]).
inline Tensor reduce_l2_norm(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("reduce_l2_norm: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.extent(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.extent(i);
  const std::size_t len = x.extent(axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i != axis) out_shape.push_back(x.extent(i));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double v = x[(o * len + k) * inner + i];
        acc += v * v;
      }
      out[o * inner + i] = std::sqrt(acc);
    }
  }
  return out;
}

inline double l2_norm(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline Tensor scaled(const Tensor& x, double s) {
  Tensor out = x;
  for (double& v : out.data()) v *= s;
  return out;
}

inline void add_inplace(Tensor& acc, const Tensor& x) {
  require_same_shape(acc, x, "add");
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += x[i];
}

inline bool all_finite(const Tensor& x) {
  return std::all_of(x.data().begin(), x.data().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace l2sm
