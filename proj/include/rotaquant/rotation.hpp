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

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>

#include "rotaquant/error.hpp"
#include "rotaquant/hadamard.hpp"
#include "rotaquant/linalg.hpp"
#include "rotaquant/model.hpp"

namespace rotaquant {

/// R1 (between blocks, shared by every layer), R2 (online FFN transform) and
/// R3 (head-wise value/output rotation).
struct RotationSet {
  std::optional<RotationMatrix> r1;
  bool r2_enabled = false;
  std::optional<RotationMatrix> r3;
  std::uint64_t seed = 0;

  bool empty() const { return !r1 && !r2_enabled && !r3; }

  void validate(const ModelConfig& c) const {
    if (r1 && r1->dim() != c.d_model)
      throw ShapeError("R1 dimension " + std::to_string(r1->dim()) + " != d_model " + std::to_string(c.d_model));
    if (r3 && r3->dim() != c.head_dim())
      throw ShapeError("R3 dimension " + std::to_string(r3->dim()) + " != head dim " + std::to_string(c.head_dim()));
  }
};

inline std::uint64_t r3_seed_from(std::uint64_t seed) { return seed ^ 0x9e3779b97f4a7c15ULL; }

/// Randomized-Hadamard rotations for the enabled slots. R3 uses a seed derived from `seed`.
inline RotationSet make_rotation_set(const ModelConfig& c, bool r1, bool r2, bool r3, std::uint64_t seed) {
  RotationSet s;
  s.seed = seed;
  if (r1) s.r1 = randomized_hadamard(c.d_model, seed);
  s.r2_enabled = r2;
  if (r3) s.r3 = randomized_hadamard(c.head_dim(), r3_seed_from(seed));
  return s;
}

/// Rebuilds the RotationSet recorded in a checkpoint's metadata.
inline RotationSet rotation_set_from_record(const ModelConfig& c, const RotationRecord& rec) {
  RotationSet s;
  s.seed = rec.r1_seed;
  if (rec.r1) {
    if (rec.r1_kind != to_string(RotationKind::kRandomizedHadamard) && rec.r1_kind != to_string(RotationKind::kPlainHadamard))
      throw ConfigError("cannot rebuild R1 of kind '" + rec.r1_kind + "'");
    s.r1 = rec.r1_kind == to_string(RotationKind::kPlainHadamard) ? hadamard_matrix(c.d_model)
                                                                    : randomized_hadamard(c.d_model, rec.r1_seed);
  }
  s.r2_enabled = rec.r2;
  if (rec.r3) {
    if (rec.r3_kind != to_string(RotationKind::kRandomizedHadamard) && rec.r3_kind != to_string(RotationKind::kPlainHadamard))
      throw ConfigError("cannot rebuild R3 of kind '" + rec.r3_kind + "'");
    s.r3 = rec.r3_kind == to_string(RotationKind::kPlainHadamard) ? hadamard_matrix(c.head_dim())
                                                                    : randomized_hadamard(c.head_dim(), rec.r3_seed);
  }
  return s;
}

/// Absorbs every RMSNorm scale into the rows of the weights consuming that norm.
[[nodiscard]] inline ModelCheckpoint fuse_norms(ModelCheckpoint m) {
  if (m.norm_fused) throw StateError("norms are already fused");
  for (auto& lw : m.layers) {
    const auto a = lw.attn_norm.values();
    lw.wq = scale_rows(a, lw.wq);
    lw.wk = scale_rows(a, lw.wk);
    lw.wv = scale_rows(a, lw.wv);
    const auto f = lw.ffn_norm.values();
    lw.w_up = scale_rows(f, lw.w_up);
    lw.w_gate = scale_rows(f, lw.w_gate);
    lw.attn_norm = Matrix(1, m.config.d_model, 1.0);
    lw.ffn_norm = Matrix(1, m.config.d_model, 1.0);
  }
  m.lm_head = scale_rows(m.final_norm.values(), m.lm_head);
  m.final_norm = Matrix(1, m.config.d_model, 1.0);
  m.norm_fused = true;
  return m;
}

/// Between-block rotation with a single R1 shared by all layers.
///
/// Row convention: stream-producing tables E, P and right-side weights
/// (wo, w_down) become X·Q; stream-consuming left-side weights (wq, wk, wv,
/// w_up, w_gate) and lm_head become Qᵀ·W.
[[nodiscard]] inline ModelCheckpoint apply_bbr(ModelCheckpoint m, const RotationMatrix& q, bool allow_stacking = false) {
  if (!m.norm_fused) throw StateError("between-block rotation requires fused norms");
  if (q.dim() != m.config.d_model)
    throw ShapeError("R1 dimension " + std::to_string(q.dim()) + " != d_model " + std::to_string(m.config.d_model));
  if (m.rotation.r1 && !allow_stacking) throw StateError("checkpoint already has a between-block rotation");
  const Matrix& qd = q.dense();
  m.embedding = rotate_rows(m.embedding, q);
  m.position = rotate_rows(m.position, q);
  for (auto& lw : m.layers) {
    for (Projection p : {Projection::kQ, Projection::kK, Projection::kV, Projection::kUp, Projection::kGate})
      lw.weight(p) = matmul_tn(qd, lw.weight(p));
    lw.wo = rotate_rows(lw.wo, q);
    lw.w_down = rotate_rows(lw.w_down, q);
  }
  m.lm_head = matmul_tn(qd, m.lm_head);
  m.rotation.r1 = true;
  m.rotation.r1_seed = q.seed();
  m.rotation.r1_kind = to_string(q.kind());
  return m;
}

/// Enables the online normalized Hadamard transform on the SwiGLU output and
/// rewrites w_down ← Hᵀ·w_down so the function is unchanged.
[[nodiscard]] inline ModelCheckpoint apply_ibr_ffn(ModelCheckpoint m) {
  if (!is_power_of_two(m.config.d_ffn))
    throw ConfigError("in-block FFN rotation needs d_ffn to be a power of two, got " + std::to_string(m.config.d_ffn));
  if (m.rotation.r2) throw StateError("in-block FFN rotation already applied");
  for (auto& lw : m.layers) {
    Matrix t = transpose(lw.w_down);
    fwht_rows_inplace(t);
    lw.w_down = transpose(t);
  }
  m.rotation.r2 = true;
  return m;
}

/// Head-wise R3: per head, value columns ← ·Q₃ and output rows ← Q₃ᵀ·.
[[nodiscard]] inline ModelCheckpoint apply_ibr_attn(ModelCheckpoint m, const RotationMatrix& q_head) {
  if (q_head.dim() != m.config.head_dim())
    throw ShapeError("R3 dimension " + std::to_string(q_head.dim()) + " != head dim " +
                     std::to_string(m.config.head_dim()));
  if (m.rotation.r3) throw StateError("head-wise attention rotation already applied");
  const Matrix big = block_diagonal(q_head.dense(), m.config.n_heads);
  for (auto& lw : m.layers) {
    lw.wv = matmul(lw.wv, big);
    lw.wo = matmul_tn(big, lw.wo);
  }
  m.rotation.r3 = true;
  m.rotation.r3_seed = q_head.seed();
  m.rotation.r3_kind = to_string(q_head.kind());
  return m;
}

/// fuse (if needed) → BBR → IBR(FFN) → IBR(attention), in that order.
[[nodiscard]] inline ModelCheckpoint apply_rotation(ModelCheckpoint m, const RotationSet& set) {
  set.validate(m.config);
  if (m.rotation.any()) throw StateError("checkpoint is already rotated");
  if (!m.norm_fused) m = fuse_norms(std::move(m));
  if (set.r1) m = apply_bbr(std::move(m), *set.r1);
  if (set.r2_enabled) m = apply_ibr_ffn(std::move(m));
  if (set.r3) m = apply_ibr_attn(std::move(m), *set.r3);
  return m;
}

/// Factors (L, R) with apply_rotation(base)[layer, p] == L · base[layer, p] · R.
/// Empty matrices stand for identity. Used to place adapters before rotation.
inline std::pair<Matrix, Matrix> rotation_rewrite_factors(const ModelCheckpoint& base, const RotationSet& set,
                                                          std::size_t layer, Projection p) {
  set.validate(base.config);
  if (base.rotation.any()) throw StateError("rewrite factors are defined relative to an unrotated checkpoint");
  Matrix left, right;
  const LayerWeights& lw = base.layers.at(layer);
  auto with_norm = [&](const Matrix& alpha) {
    Matrix l = base.norm_fused ? Matrix::identity(base.config.d_model)
                               : scale_rows(alpha.values(), Matrix::identity(base.config.d_model));
    if (set.r1) l = matmul_tn(set.r1->dense(), l);
    return l;
  };
  const Matrix heads = set.r3 ? block_diagonal(set.r3->dense(), base.config.n_heads) : Matrix();
  switch (p) {
    case Projection::kQ:
    case Projection::kK:
    case Projection::kV:
      left = with_norm(lw.attn_norm);
      if (p == Projection::kV && set.r3) right = heads;
      break;
    case Projection::kUp:
    case Projection::kGate:
      left = with_norm(lw.ffn_norm);
      break;
    case Projection::kO:
      if (set.r3) left = transpose(heads);
      if (set.r1) right = set.r1->dense();
      break;
    case Projection::kDown:
      if (set.r2_enabled) left = hadamard_matrix(base.config.d_ffn).dense();
      if (set.r1) right = set.r1->dense();
      break;
  }
  if (!left.empty() && max_abs_diff(left, Matrix::identity(left.rows())) == 0.0) left = Matrix();
  return {std::move(left), std::move(right)};
}

struct InvarianceReport {
  std::size_t trials = 0;
  double tolerance = 0.0;
  double max_deviation = 0.0;
  bool passed = false;
};

/// Seeded random token sequences of length seq_len, max |Δlogit| against tol.
inline InvarianceReport verify_invariance(const ModelCheckpoint& original, const ModelCheckpoint& rewritten,
                                          std::size_t trials, double tol, std::uint64_t seed = 0) {
  ModelConfig dims = rewritten.config;
  dims.seed = original.config.seed;
  if (!(original.config == dims)) throw ConfigError("verify_invariance: checkpoints have different dimensions");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(original.config.vocab) - 1);
  InvarianceReport r;
  r.trials = trials;
  r.tolerance = tol;
  for (std::size_t t = 0; t < trials; ++t) {
    Tokens tokens(original.config.seq_len);
    for (int& x : tokens) x = tok(rng);
    const Matrix a = forward(original, tokens).logits;
    const Matrix b = forward(rewritten, tokens).logits;
    r.max_deviation = std::max(r.max_deviation, max_abs_diff(a, b));
  }
  r.passed = r.max_deviation <= tol;
  return r;
}

}  // namespace rotaquant
