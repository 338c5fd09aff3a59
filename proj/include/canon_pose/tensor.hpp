#pragma once

#include <cblas.h>
#include <xmmintrin.h>
#include <pmmintrin.h>

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "canon_pose/errors.hpp"

namespace canon_pose::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

// Dense row-major tensor. NCHW for image batches, (B, F) for feature batches.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(element_count(shape), fill) {}
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != element_count(shape)) throw DimensionError("tensor data does not match shape " + shape_string(shape));
  }

  std::size_t size() const { return data.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t rank() const { return shape.size(); }
  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  Tensor reshaped(Shape s) const {
    if (element_count(s) != size()) throw DimensionError("cannot reshape " + shape_string(shape) + " to " + shape_string(s));
    return Tensor(std::move(s), data);
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    std::transform(data.begin(), data.end(), out.data.begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

// C = alpha * op(A) * op(B) + beta * C, row-major.
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
                 const float* b, float beta, float* c) {
  const int lda = static_cast<int>(trans_a ? m : k);
  const int ldb = static_cast<int>(trans_b ? k : n);
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, lda, b, ldb, beta, c,
              static_cast<int>(n));
}

inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
                 const double* b, double beta, double* c) {
  const int lda = static_cast<int>(trans_a ? m : k);
  const int ldb = static_cast<int>(trans_b ? k : n);
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, lda, b, ldb, beta, c,
              static_cast<int>(n));
}

// Flush-to-zero / denormals-are-zero for the calling thread.
inline void flush_denormals() {
  _MM_SET_FLUSH_ZERO_MODE(_MM_FLUSH_ZERO_ON);
  _MM_SET_DENORMALS_ZERO_MODE(_MM_DENORMALS_ZERO_ON);
}

inline void set_blas_threads(int threads) { openblas_set_num_threads(std::max(1, threads)); }

// Geometry of a k x k window sliding over an H x W plane.
struct ConvGeometry {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
  std::size_t patch_size() const { return channels * kernel * kernel; }
};

// Batch im2col: columns are (sample, out_row, out_col), rows are (channel, ki, kj).
template <typename T>
void im2col(const T* src, std::size_t batch, const ConvGeometry& g, T* col) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const std::size_t plane = oh * ow;
  const std::size_t ncols = batch * plane;
  const long h = static_cast<long>(g.height), w = static_cast<long>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * ncols;
        for (std::size_t b = 0; b < batch; ++b) {
          const T* plane_src = src + (b * g.channels + c) * g.height * g.width;
          T* dst = row + b * plane;
          for (std::size_t y = 0; y < oh; ++y) {
            const long iy = static_cast<long>(y * g.stride + ki) - static_cast<long>(g.padding);
            if (iy < 0 || iy >= h) {
              std::fill(dst + y * ow, dst + (y + 1) * ow, T(0));
              continue;
            }
            const T* src_row = plane_src + iy * w;
            for (std::size_t x = 0; x < ow; ++x) {
              const long ix = static_cast<long>(x * g.stride + kj) - static_cast<long>(g.padding);
              dst[y * ow + x] = (ix < 0 || ix >= w) ? T(0) : src_row[ix];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col; accumulates into dst (caller zeroes it).
template <typename T>
void col2im(const T* col, std::size_t batch, const ConvGeometry& g, T* dst) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const std::size_t plane = oh * ow;
  const std::size_t ncols = batch * plane;
  const long h = static_cast<long>(g.height), w = static_cast<long>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * ncols;
        for (std::size_t b = 0; b < batch; ++b) {
          T* plane_dst = dst + (b * g.channels + c) * g.height * g.width;
          const T* src = row + b * plane;
          for (std::size_t y = 0; y < oh; ++y) {
            const long iy = static_cast<long>(y * g.stride + ki) - static_cast<long>(g.padding);
            if (iy < 0 || iy >= h) continue;
            T* dst_row = plane_dst + iy * w;
            for (std::size_t x = 0; x < ow; ++x) {
              const long ix = static_cast<long>(x * g.stride + kj) - static_cast<long>(g.padding);
              if (ix >= 0 && ix < w) dst_row[ix] += src[y * ow + x];
            }
          }
        }
      }
    }
  }
}

// (B, C, P) <-> (C, B, P) permutation used around the batched GEMMs.
template <typename T>
void swap_leading_axes(const T* src, std::size_t a, std::size_t b, std::size_t inner, T* dst) {
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j)
      std::copy_n(src + (i * b + j) * inner, inner, dst + (j * a + i) * inner);
}

}  // namespace canon_pose::nn
