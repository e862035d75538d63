#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "trigger_scope/errors.hpp"
#include "trigger_scope/rng.hpp"

namespace trigger_scope::numerics {

// Dense row-major matrix of 64-bit floats. All kernels in this module are
// pure functions over Matrix values with a fixed accumulation order, so a
// given input always produces bit-identical output.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // rows * cols, row-major

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Matrix& other) const {
    return rows == other.rows && cols == other.cols;
  }

  static Matrix zeros(std::size_t r, std::size_t c) { return Matrix(r, c, 0.0); }

  static Matrix randn(std::size_t r, std::size_t c, Rng& rng, double stddev) {
    Matrix m(r, c);
    for (double& v : m.data) v = rng.normal() * stddev;
    return m;
  }
};

inline std::string shape_string(const Matrix& m) {
  return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

inline bool all_finite(const Matrix& m) {
  for (double v : m.data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

inline void require_finite(const Matrix& m, const std::string& context) {
  if (!all_finite(m)) {
    throw NumericError("non-finite value in " + context + " (" +
                       shape_string(m) + ")");
  }
}

inline void require_same_shape(const Matrix& a, const Matrix& b,
                               const std::string& context) {
  if (!a.same_shape(b)) {
    throw ShapeError(context + ": shape mismatch " + shape_string(a) + " vs " +
                     shape_string(b));
  }
}

// C = A * B, accumulating k left-to-right per output cell.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_string(a) +
                     " times " + shape_string(b));
  }
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) {
        acc += a.at(i, k) * b.at(k, j);
      }
      c.at(i, j) = acc;
    }
  }
  return c;
}

inline Matrix transpose(const Matrix& m) {
  Matrix t(m.cols, m.rows);
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) {
      t.at(j, i) = m.at(i, j);
    }
  }
  return t;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix c = a;
  for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.data[i];
  return c;
}

inline void add_inplace(Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add_inplace");
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

inline void scale_inplace(Matrix& a, double s) {
  for (double& v : a.data) v *= s;
}

inline Matrix identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
  return m;
}

}  // namespace trigger_scope::numerics
