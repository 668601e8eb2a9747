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
#include <cmath>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "rotaquant/hadamard.hpp"
#include "rotaquant/linalg.hpp"
#include "rotaquant/model.hpp"

namespace rotaquant {

inline constexpr double kKurtosisEpsilon = 1e-6;

/// Fourth standardized moment (1/k)·Σ(x−μ)⁴ / (σ⁴ + ε) with population μ, σ.
/// `raw_sum` drops the 1/k factor.
inline double kurtosis(std::span<const double> x, double epsilon = kKurtosisEpsilon, bool raw_sum = false) {
  if (x.size() < 2) throw InputError("kurtosis needs at least 2 values, got " + std::to_string(x.size()));
  const double k = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= k;
  double m2 = 0.0, m4 = 0.0;
  for (double v : x) {
    const double d = (v - mean) * (v - mean);
    m2 += d;
    m4 += d * d;
  }
  const double var = m2 / k;
  const double denom = var * var + epsilon;
  if (denom == 0.0) return 0.0;
  return (raw_sum ? m4 : m4 / k) / denom;
}

inline double kurtosis(const Matrix& x, double epsilon = kKurtosisEpsilon, bool raw_sum = false) {
  return kurtosis(x.values(), epsilon, raw_sum);
}

struct ActivationStats {
  std::string point;
  std::vector<double> channel_max_abs;
  double kurtosis = 0.0;
  std::size_t token_count = 0;
};

/// Kurtosis and per-channel max-abs profile at each capture point, pooled over sequences.
inline std::vector<ActivationStats> capture_stats(const ModelCheckpoint& m, const std::vector<Tokens>& sequences,
                                                  const std::vector<std::string>& points, ForwardOptions opts = {}) {
  for (const auto& p : points)
    if (!is_valid_capture_point(m.config, p)) throw ConfigError("unknown capture point '" + p + "'");
  if (sequences.empty()) throw InputError("capture_stats needs at least one sequence");
  opts.capture = points;
  std::vector<ActivationStats> out(points.size());
  std::vector<std::vector<double>> pooled(points.size());
  for (const auto& seq : sequences) {
    const ForwardTrace t = forward(m, seq, opts);
    for (std::size_t i = 0; i < points.size(); ++i) {
      const Matrix& x = t.captured.at(points[i]);
      auto& s = out[i];
      s.channel_max_abs.resize(x.cols(), 0.0);
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) s.channel_max_abs[c] = std::max(s.channel_max_abs[c], std::abs(x(r, c)));
      s.token_count += x.rows();
      pooled[i].insert(pooled[i].end(), x.values().begin(), x.values().end());
    }
  }
  for (std::size_t i = 0; i < points.size(); ++i) {
    out[i].point = points[i];
    out[i].kurtosis = kurtosis(pooled[i]);
  }
  return out;
}

/// Mean kurtosis over every projection-input capture point.
inline double mean_projection_kurtosis(const ModelCheckpoint& m, const std::vector<Tokens>& sequences,
                                       const ForwardOptions& opts = {}) {
  const auto stats = capture_stats(m, sequences, projection_capture_points(m.config), opts);
  double total = 0.0;
  for (const auto& s : stats) total += s.kurtosis;
  return total / static_cast<double>(stats.size());
}

/// Which side of a weight the residual rotation acts on: Qᵀ·W (left) or W·Q (right).
enum class WeightSide { kLeft, kRight };

inline WeightSide side_of(Projection p) {
  return p == Projection::kO || p == Projection::kDown ? WeightSide::kRight : WeightSide::kLeft;
}

inline Matrix q_rewrite(const Matrix& w, const RotationMatrix& q, WeightSide side) {
  return side == WeightSide::kLeft ? transpose(rotate_rows(transpose(w), q)) : rotate_rows(w, q);
}

inline Matrix q_rewrite_inverse(const Matrix& w, const RotationMatrix& q, WeightSide side) {
  return side == WeightSide::kLeft ? transpose(rotate_rows_inverse(transpose(w), q)) : rotate_rows_inverse(w, q);
}

enum class AdapterScheme { kLar, kLbr };

inline std::string to_string(AdapterScheme s) { return s == AdapterScheme::kLar ? "LAR" : "LBR"; }

struct ApproxErrorRow {
  AdapterScheme scheme = AdapterScheme::kLar;
  std::size_t rank = 0;
  double error = 0.0;       // ‖O − A·B‖_F with A = U_r S_r^½, B = S_r^½ V_rᵀ
  double tail_error = 0.0;  // sqrt(Σ_{i>r} s_i²)
};

/// Truncated-SVD approximation error of the LAR and LBR optimization targets
///   O_LAR = W_FT − rewrite(W0),  O_LBR = rewrite⁻¹(W_FT) − W0.
/// Ranks above min(rows, cols) truncate nothing.
inline std::vector<ApproxErrorRow> svd_approx_experiment(const Matrix& w0, const Matrix& w_ft, const RotationMatrix& q,
                                                         WeightSide side, const std::vector<std::size_t>& ranks) {
  if (!w0.same_shape(w_ft)) throw ShapeError("svd_approx_experiment: " + w0.shape_string() + " vs " + w_ft.shape_string());
  const std::size_t rotated_dim = side == WeightSide::kLeft ? w0.rows() : w0.cols();
  if (q.dim() != rotated_dim)
    throw ShapeError("svd_approx_experiment: rotation dim " + std::to_string(q.dim()) + " does not match " +
                     std::to_string(rotated_dim));
  std::vector<ApproxErrorRow> out;
  for (AdapterScheme scheme : {AdapterScheme::kLar, AdapterScheme::kLbr}) {
    const Matrix target = scheme == AdapterScheme::kLar ? w_ft - q_rewrite(w0, q, side) : q_rewrite_inverse(w_ft, q, side) - w0;
    const SvdResult f = svd(target);
    const std::size_t n = f.s.size();
    for (std::size_t r : ranks) {
      const std::size_t k = std::min(r, n);
      Matrix a(target.rows(), k), b(k, target.cols());
      for (std::size_t j = 0; j < k; ++j) {
        const double root = std::sqrt(f.s[j]);
        for (std::size_t i = 0; i < target.rows(); ++i) a(i, j) = f.u(i, j) * root;
        for (std::size_t i = 0; i < target.cols(); ++i) b(j, i) = root * f.v(i, j);
      }
      ApproxErrorRow row;
      row.scheme = scheme;
      row.rank = r;
      row.error = frobenius_norm(target - matmul(a, b));
      double tail = 0.0;
      for (std::size_t i = n; i-- > k;) tail += f.s[i] * f.s[i];
      row.tail_error = std::sqrt(tail);
      out.push_back(row);
    }
  }
  return out;
}

/// Writes a matrix as CSV, one row per line, shortest round-trip formatting.
inline void write_csv_matrix(std::ostream& os, const Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      if (c) os << ',';
      os << format_real(m(r, c));
    }
    os << '\n';
  }
}

}  // namespace rotaquant
