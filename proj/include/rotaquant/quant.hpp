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
#include <cstdint>
#include <string>
#include <vector>

#include "rotaquant/error.hpp"
#include "rotaquant/linalg.hpp"

namespace rotaquant {

enum class WeightQuantizer { kRtn, kGptq };

inline std::string to_string(WeightQuantizer q) { return q == WeightQuantizer::kRtn ? "rtn" : "gptq"; }

inline WeightQuantizer parse_weight_quantizer(const std::string& s) {
  if (s == "rtn") return WeightQuantizer::kRtn;
  if (s == "gptq") return WeightQuantizer::kGptq;
  throw ConfigError("unknown weight quantizer '" + s + "' (expected rtn or gptq)");
}

/// Weight-activation quantization setting. Weights are symmetric per output
/// channel, activations asymmetric per token; only the fields below vary.
struct QuantSpec {
  int weight_bits = 4;
  int act_bits = 4;
  WeightQuantizer weight_quantizer = WeightQuantizer::kRtn;
  double clip_ratio = 1.0;

  static bool allowed_bits(int b) { return b == 4 || b == 6 || b == 8 || b == 16; }

  void validate() const {
    if (!allowed_bits(weight_bits)) throw ConfigError("weight_bits must be one of 4, 6, 8, 16");
    if (!allowed_bits(act_bits)) throw ConfigError("act_bits must be one of 4, 6, 8, 16");
    if (!(clip_ratio > 0.0 && clip_ratio <= 1.0)) throw ConfigError("clip_ratio must lie in (0, 1]");
  }

  std::string label() const {
    return "W" + std::to_string(weight_bits) + "A" + std::to_string(act_bits) + "-" + to_string(weight_quantizer);
  }

  friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

inline constexpr double kScaleFloor = 1e-12;

enum class GroupAxis {
  kColumn,  // one group per column (weight output channel)
  kRow,     // one group per row (activation token)
};

/// Integer codes plus per-group scale (and zero point when asymmetric).
struct QuantizedTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  int bits = 0;
  bool symmetric = true;
  GroupAxis axis = GroupAxis::kColumn;
  std::vector<std::int32_t> codes;        // row-major, rows * cols
  std::vector<double> scales;             // one per group
  std::vector<std::int32_t> zero_points;  // one per group, empty when symmetric

  std::int32_t code_min() const { return symmetric ? -(1 << (bits - 1)) : 0; }
  std::int32_t code_max() const { return symmetric ? (1 << (bits - 1)) - 1 : (1 << bits) - 1; }

  std::size_t group_of(std::size_t r, std::size_t c) const { return axis == GroupAxis::kColumn ? c : r; }

  Matrix dequantize() const {
    Matrix out(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t g = group_of(r, c);
        const double zp = symmetric ? 0.0 : zero_points[g];
        out(r, c) = (codes[r * cols + c] - zp) * scales[g];
      }
    return out;
  }
};

namespace detail {

inline void require_bits(int bits) {
  if (!QuantSpec::allowed_bits(bits)) throw ConfigError("bit width " + std::to_string(bits) + " not in {4, 6, 8, 16}");
}

inline std::int32_t clamp_code(double v, std::int32_t lo, std::int32_t hi) {
  return static_cast<std::int32_t>(std::clamp(v, static_cast<double>(lo), static_cast<double>(hi)));
}

// Symmetric code for w given the channel's max representable magnitude.
inline std::int32_t symmetric_code(double w, double inv_scale, std::int32_t qmax) {
  return clamp_code(std::round(w * inv_scale), -qmax - 1, qmax);
}

}  // namespace detail

/// Symmetric per-output-channel round-to-nearest (ties away from zero).
///
/// scale = clip_ratio * max|w_col| / (2^(b-1) - 1); all-zero channels get the
/// 1e-12 floor and all-zero codes.
inline QuantizedTensor rtn_quantize_weight(const Matrix& w, int bits, double clip_ratio = 1.0) {
  detail::require_bits(bits);
  if (!(clip_ratio > 0.0 && clip_ratio <= 1.0)) throw ConfigError("clip_ratio must lie in (0, 1]");
  QuantizedTensor q;
  q.rows = w.rows();
  q.cols = w.cols();
  q.bits = bits;
  q.symmetric = true;
  q.axis = GroupAxis::kColumn;
  q.codes.assign(w.size(), 0);
  q.scales.assign(w.cols(), kScaleFloor);
  const std::int32_t qmax = q.code_max();
  for (std::size_t c = 0; c < w.cols(); ++c) {
    double m = 0.0;
    for (std::size_t r = 0; r < w.rows(); ++r) m = std::max(m, std::abs(w(r, c)));
    const double range = clip_ratio * m;
    if (range <= 0.0) continue;
    q.scales[c] = std::max(range / qmax, kScaleFloor);
    const double inv = qmax / range;
    for (std::size_t r = 0; r < w.rows(); ++r) q.codes[r * w.cols() + c] = detail::symmetric_code(w(r, c), inv, qmax);
  }
  return q;
}

/// Asymmetric per-token (per-row) round-to-nearest.
///
/// scale = (max - min) / (2^b - 1), zero_point = round(-min / scale). A constant
/// row is encoded so that it reconstructs exactly.
inline QuantizedTensor rtn_quantize_activation(const Matrix& x, int bits) {
  detail::require_bits(bits);
  QuantizedTensor q;
  q.rows = x.rows();
  q.cols = x.cols();
  q.bits = bits;
  q.symmetric = false;
  q.axis = GroupAxis::kRow;
  q.codes.assign(x.size(), 0);
  q.scales.assign(x.rows(), kScaleFloor);
  q.zero_points.assign(x.rows(), 0);
  const std::int32_t qmax = q.code_max();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    if (row.empty()) continue;
    const auto [lo_it, hi_it] = std::minmax_element(row.begin(), row.end());
    const double lo = *lo_it, hi = *hi_it;
    std::int32_t* codes = q.codes.data() + r * x.cols();
    if (hi - lo <= 0.0) {
      // Constant row c: code 1 with scale |c| (c > 0) or code 0 with zero point 1 (c < 0).
      if (lo == 0.0) continue;
      q.scales[r] = std::abs(lo);
      q.zero_points[r] = lo < 0.0 ? 1 : 0;
      std::fill(codes, codes + x.cols(), lo < 0.0 ? 0 : 1);
      continue;
    }
    const double scale = std::max((hi - lo) / qmax, kScaleFloor);
    const double zp = std::round(-lo / scale);
    q.scales[r] = scale;
    q.zero_points[r] = static_cast<std::int32_t>(zp);
    for (std::size_t c = 0; c < x.cols(); ++c) codes[c] = detail::clamp_code(std::round(row[c] / scale) + zp, 0, qmax);
  }
  return q;
}

/// Quantize-dequantize of every row (per-token fake quantization).
inline void fake_quant_activation_inplace(Matrix& x, int bits) {
  x = rtn_quantize_activation(x, bits).dequantize();
}

inline Matrix fake_quant_weight(const Matrix& w, int bits, double clip_ratio = 1.0) {
  return rtn_quantize_weight(w, bits, clip_ratio).dequantize();
}

/// ‖X (W - Ŵ)‖_F², the layer-output reconstruction loss GPTQ minimizes.
inline double proxy_loss(const Matrix& x, const Matrix& w, const Matrix& w_hat) {
  const double f = frobenius_norm(matmul(x, w - w_hat));
  return f * f;
}

struct GptqOptions {
  double damp_ratio = 0.01;
  double clip_ratio = 1.0;
};

/// GPTQ weight quantization with per-output-channel symmetric grids.
///
/// Input channels (rows of w) are quantized in natural order. After each row
/// the rounding error is propagated into the remaining rows through the upper
/// Cholesky factor of the damped inverse Hessian H = 2 XᵀX + λI,
/// λ = damp_ratio * mean(diag(2 XᵀX)).
inline QuantizedTensor gptq_quantize_weight(const Matrix& w, const Matrix& calib_inputs, int bits,
                                            const GptqOptions& opts = {}) {
  detail::require_bits(bits);
  if (calib_inputs.cols() != w.rows()) {
    throw ShapeError("gptq: calibration inputs have " + std::to_string(calib_inputs.cols()) +
                     " columns but weight has " + std::to_string(w.rows()) + " input channels");
  }
  const std::size_t d_in = w.rows(), d_out = w.cols();
  Matrix h = 2.0 * matmul_tn(calib_inputs, calib_inputs);
  Matrix work = w;
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < d_in; ++i) {
    if (h(i, i) == 0.0) {
      // Dead input channel: it never affects the output, so its weights are dropped.
      h(i, i) = 1.0;
      for (double& v : work.row(i)) v = 0.0;
    }
    mean_diag += h(i, i);
  }
  mean_diag /= static_cast<double>(d_in);
  const double damp = opts.damp_ratio * mean_diag;
  for (std::size_t i = 0; i < d_in; ++i) h(i, i) += damp;

  // Scales come from the (dead-channel-pruned) original weights.
  QuantizedTensor q = rtn_quantize_weight(work, bits, opts.clip_ratio);
  const std::int32_t qmax = q.code_max();
  std::vector<double> inv_scale(d_out, 0.0);
  for (std::size_t c = 0; c < d_out; ++c) {
    const double range = q.scales[c] * qmax;
    inv_scale[c] = q.scales[c] > kScaleFloor ? qmax / range : 0.0;
  }

  Matrix hinv_upper;
  try {
    hinv_upper = transpose(cholesky_lower(spd_inverse(h)));
  } catch (const NumericalError& e) {
    throw NumericalError(std::string("gptq: Hessian singular after damping: ") + e.what());
  }

  std::vector<double> err(d_out);
  for (std::size_t i = 0; i < d_in; ++i) {
    const double d = hinv_upper(i, i);
    for (std::size_t c = 0; c < d_out; ++c) {
      const double wv = work(i, c);
      const std::int32_t code = inv_scale[c] == 0.0 ? 0 : detail::symmetric_code(wv, inv_scale[c], qmax);
      q.codes[i * d_out + c] = code;
      err[c] = (wv - code * q.scales[c]) / d;
    }
    for (std::size_t j = i + 1; j < d_in; ++j) {
      const double f = hinv_upper(i, j);
      if (f == 0.0) continue;
      double* row = work.row(j).data();
      for (std::size_t c = 0; c < d_out; ++c) row[c] -= f * err[c];
    }
  }
  return q;
}

}  // namespace rotaquant
