#pragma once

// Data-parallel inner loops. Every kernel exists twice: `serial` is the
// reference the tests compare against, `parallel` is the OpenMP version used
// by the library. Parallel versions split only over independent output rows
// (or channels) so each output element sees the exact same sequence of
// floating-point operations as in the serial kernel; results are bitwise
// identical for any thread count.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>

#include "pc4d/geometry.hpp"
#include "pc4d/tensor.hpp"

namespace pc4d::kernels {

namespace detail {

// c[i,:] (+)= a[i,:] * b   for one output row; a is 1xk, b is kxn.
template <class T>
inline void gemm_row_nn(const T* a, const T* b, T* c, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const T av = a[p];
    const T* brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
  }
}

// c[i,j] (+)= dot(a[i,:], b[j,:])
template <class T>
inline void gemm_row_nt(const T* a, const T* b, T* c, std::size_t k, std::size_t n) {
  // Eight fixed partial sums: vectorizable, and the same order in every kernel.
  for (std::size_t j = 0; j < n; ++j) {
    const T* brow = b + j * k;
    T acc[8] = {};
    std::size_t p = 0;
    for (; p + 8 <= k; p += 8)
      for (std::size_t u = 0; u < 8; ++u) acc[u] += a[p + u] * brow[p + u];
    T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (; p < k; ++p) s += a[p] * brow[p];
    c[j] += s;
  }
}

// c[i,:] (+)= sum_r a[r,i] * b[r,:]; a is rows x m, b is rows x n.
template <class T>
inline void gemm_row_tn(const T* a, const T* b, T* c, std::size_t i, std::size_t rows, std::size_t m,
                        std::size_t n) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T av = a[r * m + i];
    if (av == T(0)) continue;
    const T* brow = b + r * n;
    for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
  }
}

template <class T>
inline void prepare(Mat<T>& c, std::size_t rows, std::size_t cols, bool accumulate) {
  if (accumulate) {
    require_shape(c, rows, cols, "gemm accumulator");
  } else {
    c = Mat<T>(rows, cols);
  }
}

}  // namespace detail

namespace serial {

// C = A * B
template <class T>
void gemm_nn(const Mat<T>& a, const Mat<T>& b, Mat<T>& c, bool accumulate = false) {
  if (a.cols != b.rows) fail(ErrorKind::kShapeMismatch, "gemm_nn inner dimension");
  detail::prepare(c, a.rows, b.cols, accumulate);
  for (std::size_t i = 0; i < a.rows; ++i)
    detail::gemm_row_nn(a.data.data() + i * a.cols, b.data.data(), c.data.data() + i * c.cols, a.cols, b.cols);
}

// C = A * B^T
template <class T>
void gemm_nt(const Mat<T>& a, const Mat<T>& b, Mat<T>& c, bool accumulate = false) {
  if (a.cols != b.cols) fail(ErrorKind::kShapeMismatch, "gemm_nt inner dimension");
  detail::prepare(c, a.rows, b.rows, accumulate);
  for (std::size_t i = 0; i < a.rows; ++i)
    detail::gemm_row_nt(a.data.data() + i * a.cols, b.data.data(), c.data.data() + i * c.cols, a.cols, b.rows);
}

// C = A^T * B
template <class T>
void gemm_tn(const Mat<T>& a, const Mat<T>& b, Mat<T>& c, bool accumulate = false) {
  if (a.rows != b.rows) fail(ErrorKind::kShapeMismatch, "gemm_tn inner dimension");
  detail::prepare(c, a.cols, b.cols, accumulate);
  for (std::size_t i = 0; i < a.cols; ++i)
    detail::gemm_row_tn(a.data.data(), b.data.data(), c.data.data() + i * c.cols, i, a.rows, a.cols, b.cols);
}

// Squared distance from every point to `from`, folded into running minima.
// Returns the index of the largest updated minimum (lowest index on ties).
inline std::size_t fps_update(std::span<const float> xyz, std::size_t stride, const float* from,
                              std::span<float> min_d2) {
  const std::size_t n = min_d2.size();
  for (std::size_t i = 0; i < n; ++i) {
    const float* p = xyz.data() + i * stride;
    const float dx = p[0] - from[0], dy = p[1] - from[1], dz = p[2] - from[2];
    const float d2 = dx * dx + dy * dy + dz * dz;
    if (d2 < min_d2[i]) min_d2[i] = d2;
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (min_d2[i] > min_d2[best]) best = i;
  return best;
}

// out[i] = u*A + v*B + w*C of anchor i's triangle in `verts`.
inline void reconstruct(std::span<const std::uint32_t> tri, std::span<const std::array<float, 3>> bary,
                        std::span<const Face> faces, std::span<const Vec3> verts, std::span<Vec3> out) {
  for (std::size_t i = 0; i < tri.size(); ++i) {
    const Face& f = faces[tri[i]];
    const auto& b = bary[i];
    const Vec3 a = verts[f[0]], bb = verts[f[1]], c = verts[f[2]];
    out[i] = {b[0] * a.x + b[1] * bb.x + b[2] * c.x, b[0] * a.y + b[1] * bb.y + b[2] * c.y,
              b[0] * a.z + b[1] * bb.z + b[2] * c.z};
  }
}

}  // namespace serial

namespace parallel {

template <class T>
void gemm_nn(const Mat<T>& a, const Mat<T>& b, Mat<T>& c, bool accumulate = false) {
  if (a.cols != b.rows) fail(ErrorKind::kShapeMismatch, "gemm_nn inner dimension");
  detail::prepare(c, a.rows, b.cols, accumulate);
  const auto rows = static_cast<std::int64_t>(a.rows);
#pragma omp parallel for schedule(static) if (rows * a.cols * b.cols > 32768)
  for (std::int64_t i = 0; i < rows; ++i)
    detail::gemm_row_nn(a.data.data() + i * a.cols, b.data.data(), c.data.data() + i * c.cols, a.cols, b.cols);
}

template <class T>
void gemm_nt(const Mat<T>& a, const Mat<T>& b, Mat<T>& c, bool accumulate = false) {
  if (a.cols != b.cols) fail(ErrorKind::kShapeMismatch, "gemm_nt inner dimension");
  detail::prepare(c, a.rows, b.rows, accumulate);
  const auto rows = static_cast<std::int64_t>(a.rows);
#pragma omp parallel for schedule(static) if (rows * a.cols * b.rows > 32768)
  for (std::int64_t i = 0; i < rows; ++i)
    detail::gemm_row_nt(a.data.data() + i * a.cols, b.data.data(), c.data.data() + i * c.cols, a.cols, b.rows);
}

template <class T>
void gemm_tn(const Mat<T>& a, const Mat<T>& b, Mat<T>& c, bool accumulate = false) {
  if (a.rows != b.rows) fail(ErrorKind::kShapeMismatch, "gemm_tn inner dimension");
  detail::prepare(c, a.cols, b.cols, accumulate);
  const auto out_rows = static_cast<std::int64_t>(a.cols);
#pragma omp parallel for schedule(static) if (out_rows * a.rows * b.cols > 32768)
  for (std::int64_t i = 0; i < out_rows; ++i)
    detail::gemm_row_tn(a.data.data(), b.data.data(), c.data.data() + i * c.cols, static_cast<std::size_t>(i),
                        a.rows, a.cols, b.cols);
}

inline std::size_t fps_update(std::span<const float> xyz, std::size_t stride, const float* from,
                              std::span<float> min_d2) {
  const auto n = static_cast<std::int64_t>(min_d2.size());
#pragma omp parallel for schedule(static) if (n > 8192)
  for (std::int64_t i = 0; i < n; ++i) {
    const float* p = xyz.data() + i * stride;
    const float dx = p[0] - from[0], dy = p[1] - from[1], dz = p[2] - from[2];
    const float d2 = dx * dx + dy * dy + dz * dz;
    if (d2 < min_d2[i]) min_d2[i] = d2;
  }
  // Argmax stays serial: the tie rule (lowest index) is order-sensitive.
  std::size_t best = 0;
  for (std::size_t i = 1; i < min_d2.size(); ++i)
    if (min_d2[i] > min_d2[best]) best = i;
  return best;
}

inline void reconstruct(std::span<const std::uint32_t> tri, std::span<const std::array<float, 3>> bary,
                        std::span<const Face> faces, std::span<const Vec3> verts, std::span<Vec3> out) {
  const auto n = static_cast<std::int64_t>(tri.size());
#pragma omp parallel for schedule(static) if (n > 4096)
  for (std::int64_t i = 0; i < n; ++i) {
    const Face& f = faces[tri[i]];
    const auto& b = bary[i];
    const Vec3 a = verts[f[0]], bb = verts[f[1]], c = verts[f[2]];
    out[i] = {b[0] * a.x + b[1] * bb.x + b[2] * c.x, b[0] * a.y + b[1] * bb.y + b[2] * c.y,
              b[0] * a.z + b[1] * bb.z + b[2] * c.z};
  }
}

}  // namespace parallel

using parallel::fps_update;
using parallel::gemm_nn;
using parallel::gemm_nt;
using parallel::gemm_tn;
using parallel::reconstruct;

}  // namespace pc4d::kernels
