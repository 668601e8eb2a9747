/*
 * Copyright 2026 The rotaquant Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rotaquant/error.hpp"

namespace rotaquant {

/// Dense row-major matrix of doubles.
///
/// Activations are rows and projections are applied as y = x * W with W shaped
/// (d_in, d_out). Vectors such as norm scales are stored as 1 x n matrices.
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix row_vector(std::span<const double> values) {
    return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  std::string shape_string() const {
    return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline bool all_finite(const Matrix& m) {
  return std::all_of(m.values().begin(), m.values().end(),
                     [](double v) { return std::isfinite(v); });
}

inline void ensure_finite(const Matrix& m, const char* where) {
  if (!all_finite(m)) throw NumericalError(std::string("non-finite values produced by ") + where);
}

namespace detail {

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape " + a.shape_string() + " vs " + b.shape_string());
  }
}

}  // namespace detail

namespace detail {

// out[n x m] += a[n x k] * b[k x m], row-major. Each output entry accumulates
// over p in ascending order, so results do not depend on the blocking.
inline void gemm_rows(const double* __restrict a, const double* __restrict b, double* __restrict out, std::size_t n,
                      std::size_t k, std::size_t m) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    double* o0 = out + i * m;
    double* o1 = o0 + m;
    double* o2 = o1 + m;
    double* o3 = o2 + m;
    for (std::size_t p = 0; p < k; ++p) {
      const double s0 = a[i * k + p], s1 = a[(i + 1) * k + p], s2 = a[(i + 2) * k + p], s3 = a[(i + 3) * k + p];
      const double* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) {
        const double v = bp[j];
        o0[j] += s0 * v;
        o1[j] += s1 * v;
        o2[j] += s2 * v;
        o3[j] += s3 * v;
      }
    }
  }
  for (; i < n; ++i) {
    double* o = out + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = a[i * k + p];
      const double* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += s * bp[j];
    }
  }
}

}  // namespace detail

/// a * b.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + a.shape_string() + " * " + b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  detail::gemm_rows(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols());
  ensure_finite(out, "matmul");
  return out;
}

/// aᵀ * b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: " + a.shape_string() + "ᵀ * " + b.shape_string());
  }
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  Matrix out(n, m);
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a.data() + p * n;
    const double* bp = b.data() + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double s = ap[i];
      double* __restrict o = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += s * bp[j];
    }
  }
  ensure_finite(out, "matmul_tn");
  return out;
}

/// a * bᵀ without materializing the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + a.shape_string() + " * " + b.shape_string() + "ᵀ");
  }
  const std::size_t k = b.cols(), m = b.rows();
  std::vector<double> bt(k * m);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * m + j] = b.data()[j * k + p];
  Matrix out(a.rows(), m);
  detail::gemm_rows(a.data(), bt.data(), out.data(), a.rows(), k, m);
  ensure_finite(out, "matmul_nt");
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Matrix operator+(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "add");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

inline Matrix operator-(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "sub");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

inline Matrix operator*(double s, const Matrix& a) {
  Matrix out = a;
  for (double& v : out.values()) v *= s;
  return out;
}

inline Matrix& operator+=(Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "add");
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
  return a;
}

/// a += s * b.
inline void axpy(double s, const Matrix& b, Matrix& a) {
  detail::require_same_shape(a, b, "axpy");
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += s * b.data()[i];
}

inline Matrix hadamard_product(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "hadamard_product");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.data()[i];
  return out;
}

inline double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return std::sqrt(s);
}

inline double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

/// diag(d) * a: scales row i by d[i].
inline Matrix scale_rows(std::span<const double> d, const Matrix& a) {
  if (d.size() != a.rows()) throw ShapeError("scale_rows: vector length mismatch");
  Matrix out = a;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (double& v : out.row(i)) v *= d[i];
  return out;
}

/// Block (i,j) of the result is a(i,j) * b.
inline Matrix kronecker(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const double s = a(i, j);
      for (std::size_t p = 0; p < b.rows(); ++p)
        for (std::size_t q = 0; q < b.cols(); ++q)
          out(i * b.rows() + p, j * b.cols() + q) = s * b(p, q);
    }
  return out;
}

/// Rows [r0, r0+n) and columns [c0, c0+m) copied out.
inline Matrix block(const Matrix& a, std::size_t r0, std::size_t c0, std::size_t n, std::size_t m) {
  if (r0 + n > a.rows() || c0 + m > a.cols()) throw ShapeError("block out of range");
  Matrix out(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) = a(r0 + i, c0 + j);
  return out;
}

inline void set_block(Matrix& a, std::size_t r0, std::size_t c0, const Matrix& b) {
  if (r0 + b.rows() > a.rows() || c0 + b.cols() > a.cols()) throw ShapeError("set_block out of range");
  for (std::size_t i = 0; i < b.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) a(r0 + i, c0 + j) = b(i, j);
}

/// Block-diagonal matrix with `count` copies of `b`.
inline Matrix block_diagonal(const Matrix& b, std::size_t count) {
  Matrix out(b.rows() * count, b.cols() * count);
  for (std::size_t k = 0; k < count; ++k) set_block(out, k * b.rows(), k * b.cols(), b);
  return out;
}

inline Matrix random_gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (double& v : m.values()) v = dist(rng);
  return m;
}

// ---------------------------------------------------------------------------
// Singular value decomposition

/// Thin SVD a = U * diag(s) * Vᵀ with k = min(rows, cols) singular triplets,
/// singular values non-negative and descending.
struct SvdResult {
  Matrix u;               // rows x k, orthonormal columns
  std::vector<double> s;  // k
  Matrix v;               // cols x k, orthonormal columns
};

namespace detail {

// Completes zero columns of `q` (given as column vectors) to an orthonormal set
// by Gram-Schmidt over the standard basis.
inline void complete_orthonormal(std::vector<std::vector<double>>& cols, const std::vector<bool>& valid) {
  const std::size_t n = cols.empty() ? 0 : cols.front().size();
  std::size_t next_basis = 0;
  for (std::size_t c = 0; c < cols.size(); ++c) {
    if (valid[c]) continue;
    while (true) {
      if (next_basis >= n) throw NumericalError("svd: cannot complete orthonormal basis");
      std::vector<double> cand(n, 0.0);
      cand[next_basis++] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t o = 0; o < cols.size(); ++o) {
          if (o == c || (!valid[o] && o > c)) continue;
          double dot = 0.0;
          for (std::size_t i = 0; i < n; ++i) dot += cand[i] * cols[o][i];
          for (std::size_t i = 0; i < n; ++i) cand[i] -= dot * cols[o][i];
        }
      }
      double norm = 0.0;
      for (double x : cand) norm += x * x;
      norm = std::sqrt(norm);
      if (norm > 1e-8) {
        for (double& x : cand) x /= norm;
        cols[c] = std::move(cand);
        break;
      }
    }
  }
}

}  // namespace detail

/// One-sided Jacobi SVD. Intended for small dense matrices.
inline SvdResult svd(const Matrix& a, int max_sweeps = 80) {
  if (!all_finite(a)) throw NumericalError("svd: input has non-finite entries");
  if (a.rows() < a.cols()) {
    SvdResult t = svd(transpose(a), max_sweeps);
    return {std::move(t.v), std::move(t.s), std::move(t.u)};
  }
  const std::size_t m = a.rows(), n = a.cols();
  // Column-major working copies.
  std::vector<std::vector<double>> u(n, std::vector<double>(m));
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) u[j][i] = a(i, j);
    v[j][j] = 1.0;
  }

  constexpr double kTol = 1e-15;
  bool converged = n < 2;
  int sweep = 0;
  for (; sweep < max_sweeps && !converged; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        const double* up = u[p].data();
        const double* uq = u[q].data();
        for (std::size_t i = 0; i < m; ++i) {
          alpha += up[i] * up[i];
          beta += uq[i] * uq[i];
          gamma += up[i] * uq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = u[p][i], y = u[q][i];
          u[p][i] = c * x - s * y;
          u[q][i] = s * x + c * y;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double x = v[p][i], y = v[q][i];
          v[p][i] = c * x - s * y;
          v[q][i] = s * x + c * y;
        }
      }
    }
    converged = !rotated;
  }
  if (!converged) {
    throw NumericalError("svd: one-sided Jacobi did not converge after " + std::to_string(sweep) +
                         " sweeps");
  }

  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (double x : u[j]) s += x * x;
    sv[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sv[x] > sv[y]; });

  std::vector<std::vector<double>> ucols(n), vcols(n);
  std::vector<bool> valid(n);
  SvdResult out;
  out.s.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.s[k] = sv[j];
    ucols[k] = u[j];
    vcols[k] = v[j];
    valid[k] = sv[j] > 1e-300;
    if (valid[k])
      for (double& x : ucols[k]) x /= sv[j];
  }
  detail::complete_orthonormal(ucols, valid);

  out.u = Matrix(m, n);
  out.v = Matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < m; ++i) out.u(i, k) = ucols[k][i];
    for (std::size_t i = 0; i < n; ++i) out.v(i, k) = vcols[k][i];
  }
  return out;
}

/// U * diag(s) * Vᵀ restricted to the leading `rank` triplets.
inline Matrix svd_reconstruct(const SvdResult& r, std::size_t rank) {
  rank = std::min(rank, r.s.size());
  Matrix out(r.u.rows(), r.v.rows());
  for (std::size_t k = 0; k < rank; ++k)
    for (std::size_t i = 0; i < out.rows(); ++i) {
      const double us = r.u(i, k) * r.s[k];
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += us * r.v(j, k);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Symmetric positive definite helpers

/// Lower-triangular L with a = L * Lᵀ.
inline Matrix cholesky_lower(const Matrix& a) {
  if (a.rows() != a.cols()) throw ShapeError("cholesky: matrix not square " + a.shape_string());
  const std::size_t n = a.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0)) {
      throw NumericalError("cholesky: matrix not positive definite at pivot " + std::to_string(j));
    }
    d = std::sqrt(d);
    l(j, j) = d;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / d;
    }
  }
  return l;
}

/// Inverse of an SPD matrix through its Cholesky factor.
inline Matrix spd_inverse(const Matrix& a) {
  const Matrix l = cholesky_lower(a);
  const std::size_t n = l.rows();
  // Invert L (lower triangular), then a⁻¹ = L⁻ᵀ L⁻¹.
  Matrix li(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    li(j, j) = 1.0 / l(j, j);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = j; k < i; ++k) s += l(i, k) * li(k, j);
      li(i, j) = -s / l(i, i);
    }
  }
  return matmul_tn(li, li);
}

/// Determinant by partial-pivot Gaussian elimination.
inline double determinant(const Matrix& a) {
  if (a.rows() != a.cols()) throw ShapeError("determinant: matrix not square");
  Matrix m = a;
  const std::size_t n = m.rows();
  double det = 1.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(m(r, c)) > std::abs(m(piv, c))) piv = r;
    if (m(piv, c) == 0.0) return 0.0;
    if (piv != c) {
      for (std::size_t j = 0; j < n; ++j) std::swap(m(piv, j), m(c, j));
      det = -det;
    }
    det *= m(c, c);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = m(r, c) / m(c, c);
      if (f == 0.0) continue;
      for (std::size_t j = c; j < n; ++j) m(r, j) -= f * m(c, j);
    }
  }
  return det;
}

/// Shortest decimal form that parses back to the same double, locale independent.
inline std::string format_real(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace rotaquant
