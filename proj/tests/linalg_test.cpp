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

#include "rotaquant/linalg.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace rotaquant {
namespace {

Matrix triple_loop(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

Matrix random_orthogonal(std::size_t n, std::mt19937_64& rng) {
  // Q factor of a Gaussian matrix via the SVD: U·Vᵀ is orthogonal.
  SvdResult r = svd(random_gaussian(n, n, 1.0, rng));
  return matmul_nt(r.u, r.v);
}

TEST(Matmul, IdentityAndHandExpansion) {
  const Matrix x{{1.5, -2.0}, {0.25, 4.0}};
  EXPECT_EQ(matmul(Matrix::identity(2), x), x);
  const Matrix y = matmul(Matrix{{1, 2}, {3, 4}}, Matrix{{0}, {1}});
  EXPECT_EQ(y, (Matrix{{2}, {4}}));
}

TEST(Matmul, MatchesTripleLoopOracle) {
  std::mt19937_64 rng(7);
  const Matrix a = random_gaussian(8, 8, 1.0, rng), b = random_gaussian(8, 8, 1.0, rng);
  EXPECT_LT(max_abs_diff(matmul(a, b), triple_loop(a, b)), 1e-12);
  EXPECT_LT(max_abs_diff(matmul_tn(a, b), triple_loop(transpose(a), b)), 1e-12);
  EXPECT_LT(max_abs_diff(matmul_nt(a, b), triple_loop(a, transpose(b))), 1e-12);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
  EXPECT_THROW(Matrix(2, 2, std::vector<double>(3)), ShapeError);
}

TEST(Matmul, AssociativityOnRandomTriples) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 20; ++t) {
    const Matrix a = random_gaussian(5, 7, 1.0, rng), b = random_gaussian(7, 4, 1.0, rng),
                 c = random_gaussian(4, 6, 1.0, rng);
    const Matrix l = matmul(matmul(a, b), c), r = matmul(a, matmul(b, c));
    EXPECT_LE(frobenius_norm(l - r), 1e-9 * frobenius_norm(l));
  }
}

TEST(Matmul, NonFiniteResultRejected) {
  const Matrix a{{1e300}}, b{{1e300}};
  EXPECT_THROW(matmul(a, b), NumericalError);
}

TEST(FrobeniusNorm, SimpleCases) {
  EXPECT_EQ(frobenius_norm(Matrix(3, 4)), 0.0);
  EXPECT_DOUBLE_EQ(frobenius_norm(Matrix::identity(3)), std::sqrt(3.0));
  EXPECT_DOUBLE_EQ(frobenius_norm(Matrix{{3, 4}}), 5.0);
}

TEST(Svd, DiagonalInput) {
  const SvdResult r = svd(Matrix{{3, 0}, {0, 1}});
  ASSERT_EQ(r.s.size(), 2u);
  EXPECT_NEAR(r.s[0], 3.0, 1e-14);
  EXPECT_NEAR(r.s[1], 1.0, 1e-14);
  const SvdResult r2 = svd(Matrix{{1, 0}, {0, 3}});
  EXPECT_NEAR(r2.s[0], 3.0, 1e-14);
}

TEST(Svd, RankOneHasSingleNonzeroValue) {
  std::mt19937_64 rng(3);
  const Matrix u = random_gaussian(9, 1, 1.0, rng), v = random_gaussian(1, 6, 1.0, rng);
  const SvdResult r = svd(matmul(u, v));
  int nonzero = 0;
  for (double s : r.s) nonzero += s > 1e-10;
  EXPECT_EQ(nonzero, 1);
  // Completed singular vectors are still orthonormal.
  EXPECT_LT(max_abs_diff(matmul_tn(r.u, r.u), Matrix::identity(r.u.cols())), 1e-8);
}

void expect_valid_svd(const Matrix& a, const SvdResult& r) {
  Matrix us = r.u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t k = 0; k < us.cols(); ++k) us(i, k) *= r.s[k];
  EXPECT_LE(frobenius_norm(a - matmul_nt(us, r.v)), 1e-8 * frobenius_norm(a));
  EXPECT_LT(max_abs_diff(matmul_tn(r.u, r.u), Matrix::identity(r.u.cols())), 1e-8);
  EXPECT_LT(max_abs_diff(matmul_tn(r.v, r.v), Matrix::identity(r.v.cols())), 1e-8);
  for (std::size_t k = 0; k < r.s.size(); ++k) {
    EXPECT_GE(r.s[k], 0.0);
    if (k > 0) {
      EXPECT_GE(r.s[k - 1], r.s[k]);
    }
  }
}

TEST(Svd, RandomRectangularReconstruction) {
  std::mt19937_64 rng(5);
  const Matrix tall = random_gaussian(16, 12, 1.0, rng);
  expect_valid_svd(tall, svd(tall));
  const Matrix wide = random_gaussian(7, 19, 1.0, rng);
  expect_valid_svd(wide, svd(wide));
}

TEST(Svd, SingularValuesInvariantUnderOrthogonalMaps) {
  std::mt19937_64 rng(13);
  for (int t = 0; t < 5; ++t) {
    const Matrix a = random_gaussian(10, 8, 1.0, rng);
    const Matrix p = random_orthogonal(10, rng), q = random_orthogonal(8, rng);
    const SvdResult r0 = svd(a), r1 = svd(matmul(matmul(p, a), q));
    for (std::size_t k = 0; k < r0.s.size(); ++k) EXPECT_NEAR(r0.s[k], r1.s[k], 1e-9);
  }
}

TEST(Svd, IterationCapReported) {
  std::mt19937_64 rng(1);
  try {
    svd(random_gaussian(12, 12, 1.0, rng), 1);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("1 sweeps"), std::string::npos);
  }
}

TEST(Kronecker, HadamardRecursion) {
  const Matrix h2{{1, 1}, {1, -1}};
  const Matrix h4{{1, 1, 1, 1}, {1, -1, 1, -1}, {1, 1, -1, -1}, {1, -1, -1, 1}};
  EXPECT_EQ(kronecker(h2, h2), h4);
  const Matrix x{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(kronecker(Matrix::identity(1), x), x);
}

TEST(Kronecker, NormAndMixedProduct) {
  std::mt19937_64 rng(17);
  const Matrix a = random_gaussian(2, 3, 1.0, rng), b = random_gaussian(3, 2, 1.0, rng);
  EXPECT_NEAR(frobenius_norm(kronecker(a, b)), frobenius_norm(a) * frobenius_norm(b), 1e-12);
  const Matrix c = random_gaussian(3, 2, 1.0, rng), d = random_gaussian(2, 4, 1.0, rng);
  const Matrix lhs = matmul(kronecker(a, b), kronecker(c, d));
  const Matrix rhs = kronecker(matmul(a, c), matmul(b, d));
  EXPECT_LT(max_abs_diff(lhs, rhs), 1e-10);
}

TEST(Cholesky, InverseAndFailure) {
  std::mt19937_64 rng(19);
  const Matrix x = random_gaussian(20, 6, 1.0, rng);
  const Matrix h = matmul_tn(x, x);
  EXPECT_LT(max_abs_diff(matmul(h, spd_inverse(h)), Matrix::identity(6)), 1e-10);
  EXPECT_THROW(cholesky_lower(Matrix{{1, 0}, {0, -1}}), NumericalError);
}

TEST(Determinant, KnownValues) {
  EXPECT_NEAR(determinant(Matrix{{2, 1}, {1, 3}}), 5.0, 1e-14);
  EXPECT_NEAR(determinant(Matrix{{0, 1}, {1, 0}}), -1.0, 1e-14);
}

}  // namespace
}  // namespace rotaquant
