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

#include <bit>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rotaquant/error.hpp"
#include "rotaquant/linalg.hpp"

namespace rotaquant {

enum class RotationKind { kPlainHadamard, kRandomizedHadamard, kExplicit };

inline std::string to_string(RotationKind kind) {
  switch (kind) {
    case RotationKind::kPlainHadamard: return "plain_hadamard";
    case RotationKind::kRandomizedHadamard: return "randomized_hadamard";
    case RotationKind::kExplicit: return "explicit";
  }
  return "unknown";
}

inline bool is_power_of_two(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

/// Immutable orthogonal matrix used as a rotation.
///
/// Hadamard kinds keep the sign diagonal so that row rotation can run through
/// the fast transform; the dense form is always materialized.
class RotationMatrix {
 public:
  RotationMatrix(std::size_t dim, std::uint64_t seed, RotationKind kind, std::vector<double> signs,
                 Matrix dense)
      : dim_(dim),
        seed_(seed),
        kind_(kind),
        signs_(std::move(signs)),
        dense_(std::make_shared<const Matrix>(std::move(dense))) {}

  /// Wraps an arbitrary matrix; orthogonality is checked to 1e-10.
  static RotationMatrix explicit_matrix(Matrix q) {
    if (q.rows() != q.cols() || q.rows() == 0) throw ShapeError("rotation must be square and non-empty");
    const double dev = max_abs_diff(matmul_nt(q, q), Matrix::identity(q.rows()));
    if (dev > 1e-10) throw NumericalError("explicit rotation is not orthogonal (deviation " + std::to_string(dev) + ")");
    const std::size_t n = q.rows();
    return RotationMatrix(n, 0, RotationKind::kExplicit, {}, std::move(q));
  }

  std::size_t dim() const noexcept { return dim_; }
  std::uint64_t seed() const noexcept { return seed_; }
  RotationKind kind() const noexcept { return kind_; }
  std::span<const double> signs() const noexcept { return signs_; }
  const Matrix& dense() const noexcept { return *dense_; }

  bool has_fast_path() const noexcept {
    return kind_ != RotationKind::kExplicit && is_power_of_two(dim_);
  }

  RotationMatrix transposed() const {
    return RotationMatrix(dim_, seed_, RotationKind::kExplicit, {}, transpose(*dense_));
  }

 private:
  std::size_t dim_;
  std::uint64_t seed_;
  RotationKind kind_;
  std::vector<double> signs_;  // empty for kExplicit; all +1 for kPlainHadamard
  std::shared_ptr<const Matrix> dense_;
};

namespace detail {

inline bool is_prime(int q) {
  if (q < 2) return false;
  for (int d = 2; d * d <= q; ++d)
    if (q % d == 0) return false;
  return true;
}

// Quadratic character of x modulo prime q.
inline int legendre(int x, int q) {
  x = ((x % q) + q) % q;
  if (x == 0) return 0;
  for (int y = 1; y < q; ++y)
    if ((y * y) % q == x) return 1;
  return -1;
}

// Paley construction I: prime q = 3 (mod 4) gives an order-(q+1) Hadamard matrix.
inline Matrix paley_one(int q) {
  const int n = q + 1;
  Matrix h(n, n);
  for (int j = 1; j < n; ++j) {
    h(0, j) = 1.0;
    h(j, 0) = -1.0;
  }
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < q; ++j) h(i + 1, j + 1) = legendre(j - i, q);
  for (int i = 0; i < n; ++i) h(i, i) += 1.0;
  return h;
}

// Paley construction II: prime q = 1 (mod 4) gives an order-2(q+1) Hadamard matrix.
inline Matrix paley_two(int q) {
  const int n = q + 1;
  Matrix conference(n, n);
  for (int j = 1; j < n; ++j) {
    conference(0, j) = 1.0;
    conference(j, 0) = 1.0;
  }
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < q; ++j) conference(i + 1, j + 1) = legendre(j - i, q);
  const Matrix plus{{1.0, 1.0}, {1.0, -1.0}};
  const Matrix zero{{1.0, -1.0}, {-1.0, -1.0}};
  Matrix h(2 * n, 2 * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double c = conference(i, j);
      const Matrix& tile = c == 0.0 ? zero : plus;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) h(2 * i + a, 2 * j + b) = (c == 0.0 ? 1.0 : c) * tile(a, b);
    }
  return h;
}

// Unnormalized ±1 Hadamard matrix for a base order in {1, 12, 20, 28}.
inline Matrix base_hadamard(std::size_t m) {
  switch (m) {
    case 1: return Matrix{{1.0}};
    case 12: return paley_one(11);
    case 20: return paley_one(19);
    case 28: return paley_two(13);
    default: throw ConfigError("no stored Hadamard matrix of order " + std::to_string(m));
  }
}

// Unnormalized Sylvester matrix of order 2^k.
inline Matrix sylvester(std::size_t n) {
  Matrix h{{1.0}};
  const Matrix h2{{1.0, 1.0}, {1.0, -1.0}};
  while (h.rows() < n) h = kronecker(h2, h);
  return h;
}

// Splits dim = m * 2^k with m from the stored table; returns m.
inline std::size_t hadamard_base_order(std::size_t dim) {
  if (dim == 0) throw ConfigError("Hadamard dimension must be positive");
  if (is_power_of_two(dim)) return 1;
  for (std::size_t m : {12u, 20u, 28u}) {
    if (dim % m == 0 && is_power_of_two(dim / m)) return m;
  }
  std::size_t odd = dim;
  while (odd % 2 == 0) odd /= 2;
  throw ConfigError("unsupported Hadamard dimension " + std::to_string(dim) + ": factor " +
                    std::to_string(odd) + " has no stored base matrix (supported m: 1, 12, 20, 28)");
}

}  // namespace detail

/// Orthonormal Hadamard matrix of order dim = m * 2^k, built as H_m ⊗ H_{2^k} / sqrt(dim).
inline RotationMatrix hadamard_matrix(std::size_t dim) {
  const std::size_t m = detail::hadamard_base_order(dim);
  Matrix h = kronecker(detail::base_hadamard(m), detail::sylvester(dim / m));
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  for (double& v : h.values()) v *= s;
  return RotationMatrix(dim, 0, RotationKind::kPlainHadamard, std::vector<double>(dim, 1.0), std::move(h));
}

/// D * H with an explicit ±1 sign diagonal D.
inline RotationMatrix signed_hadamard(std::vector<double> signs, std::uint64_t seed = 0) {
  const std::size_t dim = signs.size();
  for (double s : signs)
    if (s != 1.0 && s != -1.0) throw ConfigError("sign diagonal entries must be +1 or -1");
  RotationMatrix h = hadamard_matrix(dim);
  Matrix q = scale_rows(signs, h.dense());
  return RotationMatrix(dim, seed, RotationKind::kRandomizedHadamard, std::move(signs), std::move(q));
}

/// D * H with D a ±1 diagonal drawn from a 64-bit Mersenne twister seeded with `seed`.
inline RotationMatrix randomized_hadamard(std::size_t dim, std::uint64_t seed) {
  detail::hadamard_base_order(dim);
  std::mt19937_64 rng(seed);
  std::vector<double> signs(dim);
  for (double& s : signs) s = (rng() >> 63) ? -1.0 : 1.0;
  return signed_hadamard(std::move(signs), seed);
}

/// In-place Walsh-Hadamard butterfly (Sylvester order), log2(n) passes.
inline void fwht_inplace(std::span<double> x, bool normalize) {
  const std::size_t n = x.size();
  if (!is_power_of_two(n)) throw ShapeError("fwht: length " + std::to_string(n) + " is not a power of two");
  for (std::size_t h = 1; h < n; h *= 2) {
    for (std::size_t i = 0; i < n; i += 2 * h) {
      for (std::size_t j = i; j < i + h; ++j) {
        const double a = x[j], b = x[j + h];
        x[j] = a + b;
        x[j + h] = a - b;
      }
    }
  }
  if (normalize) {
    const double s = 1.0 / std::sqrt(static_cast<double>(n));
    for (double& v : x) v *= s;
  }
}

inline std::vector<double> fwht(std::span<const double> x, bool normalize) {
  std::vector<double> out(x.begin(), x.end());
  fwht_inplace(out, normalize);
  return out;
}

/// Normalized transform applied to every row (x ← x·H).
inline void fwht_rows_inplace(Matrix& x) {
  for (std::size_t r = 0; r < x.rows(); ++r) fwht_inplace(x.row(r), true);
}

/// Every row x_i replaced by x_i · Q.
inline Matrix rotate_rows(const Matrix& x, const RotationMatrix& q) {
  if (x.cols() != q.dim()) {
    throw ShapeError("rotate_rows: x has " + std::to_string(x.cols()) + " columns, rotation dim " +
                     std::to_string(q.dim()));
  }
  if (!q.has_fast_path()) return matmul(x, q.dense());
  // x·D·H = fwht(x ⊙ d) because the Sylvester matrix is symmetric.
  Matrix out = x;
  const auto signs = q.signs();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] *= signs[j];
    fwht_inplace(row, true);
  }
  return out;
}

/// Every row x_i replaced by x_i · Qᵀ.
inline Matrix rotate_rows_inverse(const Matrix& x, const RotationMatrix& q) {
  if (x.cols() != q.dim()) {
    throw ShapeError("rotate_rows_inverse: x has " + std::to_string(x.cols()) + " columns, rotation dim " +
                     std::to_string(q.dim()));
  }
  if (!q.has_fast_path()) return matmul_nt(x, q.dense());
  Matrix out = x;
  const auto signs = q.signs();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    fwht_inplace(row, true);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] *= signs[j];
  }
  return out;
}

}  // namespace rotaquant
