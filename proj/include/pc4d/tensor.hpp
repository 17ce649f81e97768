#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pc4d/error.hpp"

namespace pc4d {

// Dense row-major matrix. Everything in the model stack is a sequence of
// token rows, so two dimensions are enough.
template <class T>
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  template <class U>
  Mat<U> cast() const {
    Mat<U> out(rows, cols);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  bool operator==(const Mat& o) const { return rows == o.rows && cols == o.cols && data == o.data; }
};

template <class T>
inline void require_shape(const Mat<T>& m, std::size_t rows, std::size_t cols, const char* what) {
  if (m.rows != rows || m.cols != cols) {
    fail(ErrorKind::kShapeMismatch, std::string(what) + ": expected " + std::to_string(rows) + "x" +
                                        std::to_string(cols) + ", got " + std::to_string(m.rows) + "x" +
                                        std::to_string(m.cols));
  }
}

template <class T>
Mat<T> flip_rows(const Mat<T>& m) {
  Mat<T> out(m.rows, m.cols);
  for (std::size_t r = 0; r < m.rows; ++r) {
    std::copy(m.row(r).begin(), m.row(r).end(), out.row(m.rows - 1 - r).begin());
  }
  return out;
}

template <class T>
T max_abs_diff(const Mat<T>& a, const Mat<T>& b) {
  T m = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace pc4d
