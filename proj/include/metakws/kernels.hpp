#pragma once

// Raw numeric kernels on Tensor values. No graph bookkeeping here; the
// differentiable wrappers live in autodiff.hpp.

#include <Eigen/Core>
#include <algorithm>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "metakws/tensor.hpp"

namespace metakws::kernels {

template <class T>
using RowMajorMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using MatrixMap = Eigen::Map<RowMajorMatrix<T>>;

template <class T>
using ConstMatrixMap = Eigen::Map<const RowMajorMatrix<T>>;

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = Tensor<T>::uninitialized({m, n});
    MatrixMap<T>(out.data().data(), m, n).noalias() =
        ConstMatrixMap<T>(a.data().data(), m, k) * ConstMatrixMap<T>(b.data().data(), k, n);
    return out;
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& a) {
    if (a.rank() != 2) throw DimensionError("transpose2d: expected rank 2, got " + shape_str(a.shape()));
    const auto m = a.dim(0), n = a.dim(1);
    auto out = Tensor<T>::uninitialized({n, m});
    MatrixMap<T>(out.data().data(), n, m) = ConstMatrixMap<T>(a.data().data(), m, n).transpose();
    return out;
}

/// Square-kernel 2-D convolution geometry (NCHW input, OIHW weights).
struct ConvGeometry {
    std::size_t in_channels = 1;
    std::size_t in_h = 0;
    std::size_t in_w = 0;
    std::size_t out_channels = 1;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t pad = 0;

    std::size_t out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
    std::size_t out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
    std::size_t patch() const { return in_channels * kernel * kernel; }
    Shape input_shape(std::size_t n) const { return {n, in_channels, in_h, in_w}; }
    Shape output_shape(std::size_t n) const { return {n, out_channels, out_h(), out_w()}; }
    Shape weight_shape() const { return {out_channels, in_channels, kernel, kernel}; }

    bool operator==(const ConvGeometry&) const = default;
};

namespace detail {

/// Output columns [lo, hi) whose input coordinate j*stride + k - pad lies in [0, extent).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t extent, std::size_t k,
                                                       std::size_t stride, std::size_t pad) {
    std::size_t lo = 0;
    while (lo < out && lo * stride + k < pad) ++lo;
    std::size_t hi = lo;
    while (hi < out && hi * stride + k < extent + pad) ++hi;
    return {lo, hi};
}

template <class T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
    const std::size_t oh = g.out_h(), ow = g.out_w(), s = g.stride;
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        const T* plane = img + c * g.in_h * g.in_w;
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
            const auto [ilo, ihi] = valid_range(oh, g.in_h, ki, s, g.pad);
            for (std::size_t kj = 0; kj < g.kernel; ++kj, ++row) {
                const auto [jlo, jhi] = valid_range(ow, g.in_w, kj, s, g.pad);
                T* dst = cols + row * oh * ow;
                std::fill(dst, dst + ilo * ow, T(0));
                for (std::size_t i = ilo; i < ihi; ++i) {
                    T* d = dst + i * ow;
                    const T* src = plane + (i * s + ki - g.pad) * g.in_w + (kj - g.pad);
                    std::fill(d, d + jlo, T(0));
                    for (std::size_t j = jlo; j < jhi; ++j) d[j] = src[j * s];
                    std::fill(d + jhi, d + ow, T(0));
                }
                std::fill(dst + ihi * ow, dst + oh * ow, T(0));
            }
        }
    }
}

template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img) {
    const std::size_t oh = g.out_h(), ow = g.out_w(), s = g.stride;
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        T* plane = img + c * g.in_h * g.in_w;
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
            const auto [ilo, ihi] = valid_range(oh, g.in_h, ki, s, g.pad);
            for (std::size_t kj = 0; kj < g.kernel; ++kj, ++row) {
                const auto [jlo, jhi] = valid_range(ow, g.in_w, kj, s, g.pad);
                const T* src = cols + row * oh * ow;
                for (std::size_t i = ilo; i < ihi; ++i) {
                    const T* sr = src + i * ow;
                    T* d = plane + (i * s + ki - g.pad) * g.in_w + (kj - g.pad);
                    for (std::size_t j = jlo; j < jhi; ++j) d[j * s] += sr[j];
                }
            }
        }
    }
}

inline std::size_t batch_of(const Shape& s, const Shape& expected_tail, const char* op) {
    if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != expected_tail)
        throw DimensionError(std::string(op) + ": got " + shape_str(s) + ", expected (N, " +
                             shape_str(expected_tail).substr(1));
    return s[0];
}

}  // namespace detail

/// y[n] = W * im2col(x[n]).
template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const ConvGeometry& g) {
    require_same_shape(w.shape(), g.weight_shape(), "conv2d weight");
    const std::size_t n = detail::batch_of(x.shape(), {g.in_channels, g.in_h, g.in_w}, "conv2d input");
    const std::size_t p = g.out_h() * g.out_w(), in_sz = g.in_channels * g.in_h * g.in_w;
    auto y = Tensor<T>::uninitialized(g.output_shape(n));
    std::vector<T> cols(g.patch() * p);
    ConstMatrixMap<T> wm(w.data().data(), g.out_channels, g.patch());
    for (std::size_t b = 0; b < n; ++b) {
        detail::im2col(x.data().data() + b * in_sz, g, cols.data());
        MatrixMap<T>(y.data().data() + b * g.out_channels * p, g.out_channels, p).noalias() =
            wm * ConstMatrixMap<T>(cols.data(), g.patch(), p);
    }
    return y;
}

/// Adjoint of conv2d_forward with respect to its input.
template <class T>
Tensor<T> conv2d_input_grad(const Tensor<T>& gy, const Tensor<T>& w, const ConvGeometry& g) {
    require_same_shape(w.shape(), g.weight_shape(), "conv2d_input_grad weight");
    const std::size_t n =
        detail::batch_of(gy.shape(), {g.out_channels, g.out_h(), g.out_w()}, "conv2d_input_grad gradient");
    const std::size_t p = g.out_h() * g.out_w(), in_sz = g.in_channels * g.in_h * g.in_w;
    Tensor<T> gx(g.input_shape(n));
    RowMajorMatrix<T> cols(g.patch(), p);
    ConstMatrixMap<T> wm(w.data().data(), g.out_channels, g.patch());
    for (std::size_t b = 0; b < n; ++b) {
        cols.noalias() = wm.transpose() * ConstMatrixMap<T>(gy.data().data() + b * g.out_channels * p, g.out_channels, p);
        detail::col2im_add(cols.data(), g, gx.data().data() + b * in_sz);
    }
    return gx;
}

/// Adjoint of conv2d_forward with respect to its weights.
template <class T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& x, const Tensor<T>& gy, const ConvGeometry& g) {
    const std::size_t n = detail::batch_of(x.shape(), {g.in_channels, g.in_h, g.in_w}, "conv2d_weight_grad input");
    if (detail::batch_of(gy.shape(), {g.out_channels, g.out_h(), g.out_w()}, "conv2d_weight_grad gradient") != n)
        throw DimensionError("conv2d_weight_grad: batch mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(gy.shape()));
    const std::size_t p = g.out_h() * g.out_w(), in_sz = g.in_channels * g.in_h * g.in_w;
    Tensor<T> gw(g.weight_shape());
    MatrixMap<T> gwm(gw.data().data(), g.out_channels, g.patch());
    std::vector<T> cols(g.patch() * p);
    for (std::size_t b = 0; b < n; ++b) {
        detail::im2col(x.data().data() + b * in_sz, g, cols.data());
        gwm.noalias() += ConstMatrixMap<T>(gy.data().data() + b * g.out_channels * p, g.out_channels, p) *
                         ConstMatrixMap<T>(cols.data(), g.patch(), p).transpose();
    }
    return gw;
}

/// Flat source index of the maximum in each non-overlapping window (NCHW, window == stride).
template <class T>
std::vector<std::size_t> max_pool_indices(const Tensor<T>& x, std::size_t window, Shape& out_shape) {
    if (x.rank() != 4 || window == 0) throw DimensionError("max_pool: expected NCHW input, got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t oh = h / window, ow = w / window;
    if (oh == 0 || ow == 0) throw DimensionError("max_pool: window larger than input " + shape_str(x.shape()));
    out_shape = {n, c, oh, ow};
    std::vector<std::size_t> idx(n * c * oh * ow);
    std::size_t o = 0;
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        const std::size_t base = plane * h * w;
        for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j, ++o) {
                std::size_t best = base + (i * window) * w + j * window;
                for (std::size_t di = 0; di < window; ++di)
                    for (std::size_t dj = 0; dj < window; ++dj) {
                        const std::size_t s = base + (i * window + di) * w + j * window + dj;
                        if (x[s] > x[best]) best = s;
                    }
                idx[o] = best;
            }
        }
    }
    return idx;
}

}  // namespace metakws::kernels
