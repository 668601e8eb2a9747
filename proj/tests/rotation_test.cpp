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

#include "rotaquant/rotation.hpp"

#include <gtest/gtest.h>

#include <random>

#include "test_support.hpp"

namespace rotaquant {
namespace {

using testing::lively_model;
using testing::random_tokens;
using testing::small_config;

double logit_gap(const ModelCheckpoint& a, const ModelCheckpoint& b, std::uint64_t seed, int trials = 4) {
  std::mt19937_64 rng(seed);
  double gap = 0.0;
  for (int t = 0; t < trials; ++t) {
    const Tokens tokens = random_tokens(a.config, a.config.seq_len, rng);
    gap = std::max(gap, max_abs_diff(forward(a, tokens).logits, forward(b, tokens).logits));
  }
  return gap;
}

TEST(FuseNorms, UnitScalesLeaveWeightsUnchanged) {
  const ModelCheckpoint m = init_model(small_config());
  const ModelCheckpoint f = fuse_norms(m);
  EXPECT_TRUE(f.norm_fused);
  for (std::size_t l = 0; l < m.layers.size(); ++l) EXPECT_EQ(f.layers[l].wq, m.layers[l].wq);
  EXPECT_EQ(f.lm_head, m.lm_head);
}

TEST(FuseNorms, RandomScalesPreserveLogits) {
  const ModelCheckpoint m = lively_model(small_config(), 0.3);
  const ModelCheckpoint f = fuse_norms(m);
  EXPECT_LT(logit_gap(m, f, 1), 1e-10);
  for (double v : f.layers[1].ffn_norm.values()) EXPECT_EQ(v, 1.0);
  EXPECT_THROW(fuse_norms(f), StateError);
}

TEST(ApplyBbr, IdentityIsNoOp) {
  const ModelCheckpoint f = fuse_norms(init_model(small_config()));
  const ModelCheckpoint r = apply_bbr(f, RotationMatrix::explicit_matrix(Matrix::identity(16)));
  for (const auto& name : f.parameter_names()) EXPECT_EQ(r.param(name), f.param(name)) << name;
}

TEST(ApplyBbr, PreservesLogits) {
  const ModelCheckpoint f = fuse_norms(lively_model(small_config(), 0.3));
  const ModelCheckpoint r = apply_bbr(f, randomized_hadamard(16, 5));
  EXPECT_LT(logit_gap(f, r, 2), 1e-8);
  EXPECT_TRUE(r.rotation.r1);
  EXPECT_EQ(r.rotation.r1_seed, 5u);
  EXPECT_THROW(apply_bbr(r, randomized_hadamard(16, 5)), StateError);
}

TEST(ApplyBbr, InverseCompositionRestoresWeights) {
  const ModelCheckpoint f = fuse_norms(lively_model(small_config(), 0.3));
  const RotationMatrix q = randomized_hadamard(16, 9);
  const ModelCheckpoint back = apply_bbr(apply_bbr(f, q), q.transposed(), true);
  for (const auto& name : f.parameter_names()) EXPECT_LT(max_abs_diff(back.param(name), f.param(name)), 1e-9) << name;
}

TEST(ApplyBbr, Preconditions) {
  const ModelCheckpoint m = init_model(small_config());
  EXPECT_THROW(apply_bbr(m, randomized_hadamard(16, 1)), StateError);
  EXPECT_THROW(apply_bbr(fuse_norms(m), randomized_hadamard(32, 1)), ShapeError);
}

TEST(ApplyIbrFfn, PreservesLogitsAndRewritesDown) {
  const ModelCheckpoint m = lively_model(small_config(), 0.3);
  const ModelCheckpoint r = apply_ibr_ffn(m);
  EXPECT_TRUE(r.rotation.r2);
  EXPECT_LT(logit_gap(m, r, 3), 1e-8);
  const Matrix h = hadamard_matrix(32).dense();
  EXPECT_LT(max_abs_diff(matmul(h, r.layers[0].w_down), m.layers[0].w_down), 1e-10);
  EXPECT_THROW(apply_ibr_ffn(r), StateError);
}

TEST(ApplyIbrFfn, SpreadsPlantedSpike) {
  // A single hot SwiGLU channel becomes a flat vector of magnitude spike/sqrt(d_ffn).
  ModelConfig c = small_config();
  ModelCheckpoint m = init_model(c);
  for (auto& lw : m.layers) {
    lw.w_gate = Matrix(c.d_model, c.d_ffn);
    lw.w_up = Matrix(c.d_model, c.d_ffn);
    for (std::size_t i = 0; i < c.d_model; ++i) {
      lw.w_gate(i, 5) = 1.0;
      lw.w_up(i, 5) = 1.0;
    }
  }
  ForwardOptions opts;
  opts.capture = {"layers.0.ffn_down"};
  const Tokens tokens = {1, 2, 3};
  const Matrix before = forward(m, tokens, opts).captured.at("layers.0.ffn_down");
  const Matrix after = forward(apply_ibr_ffn(m), tokens, opts).captured.at("layers.0.ffn_down");
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    double row_max = 0.0;
    for (double v : before.row(t)) row_max = std::max(row_max, std::abs(v));
    for (double v : after.row(t)) EXPECT_NEAR(std::abs(v), row_max / std::sqrt(32.0), 1e-10);
  }
}

TEST(ApplyIbrAttn, IdentityAndInvariance) {
  const ModelCheckpoint m = lively_model(small_config(), 0.3);
  const ModelCheckpoint same = apply_ibr_attn(m, RotationMatrix::explicit_matrix(Matrix::identity(8)));
  EXPECT_EQ(same.layers[0].wv, m.layers[0].wv);
  const ModelCheckpoint r = apply_ibr_attn(m, randomized_hadamard(8, 4));
  EXPECT_LT(logit_gap(m, r, 4), 1e-8);
  ForwardOptions opts;
  opts.capture = {"layers.0.attn_probs", "layers.1.attn_probs"};
  const Tokens tokens = {4, 1, 7, 7, 2, 9};
  const auto a = forward(m, tokens, opts), b = forward(r, tokens, opts);
  for (const auto& [k, v] : a.captured) EXPECT_LT(max_abs_diff(v, b.captured.at(k)), 1e-10) << k;
  EXPECT_THROW(apply_ibr_attn(m, randomized_hadamard(16, 4)), ShapeError);
}

TEST(VerifyInvariance, Checker) {
  const ModelCheckpoint m = lively_model(small_config(), 0.3);
  const InvarianceReport same = verify_invariance(m, m, 3, 0.0);
  EXPECT_TRUE(same.passed);
  EXPECT_EQ(same.max_deviation, 0.0);

  const RotationSet set = make_rotation_set(m.config, true, true, true, 17);
  const ModelCheckpoint r = apply_rotation(m, set);
  const InvarianceReport ok = verify_invariance(m, r, 8, 1e-6);
  EXPECT_TRUE(ok.passed) << ok.max_deviation;

  ModelCheckpoint broken = r;
  const double delta = 0.1;
  for (std::size_t i = 0; i < broken.lm_head.rows(); ++i) broken.lm_head(i, 0) += delta;
  const InvarianceReport bad = verify_invariance(m, broken, 8, 1e-6);
  EXPECT_FALSE(bad.passed);
  EXPECT_GE(bad.max_deviation, delta);

  ModelConfig reseeded = m.config;
  reseeded.seed = 77;
  EXPECT_NO_THROW(verify_invariance(m, init_model(reseeded), 1, 1.0));

  ModelConfig other = m.config;
  other.d_ffn *= 2;
  EXPECT_THROW(verify_invariance(m, init_model(other), 1, 1.0), ConfigError);
}

TEST(ApplyRotation, OrderAndRecord) {
  const ModelCheckpoint m = lively_model(small_config(), 0.3);
  const RotationSet set = make_rotation_set(m.config, true, true, false, 3);
  const ModelCheckpoint r = apply_rotation(m, set);
  EXPECT_TRUE(r.norm_fused);
  EXPECT_TRUE(r.rotation.r1 && r.rotation.r2 && !r.rotation.r3);
  EXPECT_THROW(apply_rotation(r, set), StateError);
  // The record rebuilds the same rotation.
  const RotationSet rebuilt = rotation_set_from_record(m.config, r.rotation);
  EXPECT_EQ(rebuilt.r1->dense(), set.r1->dense());
}

TEST(RewriteFactors, MatchRotatedWeights) {
  const ModelCheckpoint m = lively_model(small_config(), 0.3);
  const RotationSet set = make_rotation_set(m.config, true, true, true, 8);
  const ModelCheckpoint r = apply_rotation(m, set);
  for (std::size_t l = 0; l < m.layers.size(); ++l)
    for (Projection p : kAllProjections) {
      auto [left, right] = rotation_rewrite_factors(m, set, l, p);
      Matrix w = m.layers[l].weight(p);
      if (!left.empty()) w = matmul(left, w);
      if (!right.empty()) w = matmul(w, right);
      EXPECT_LT(max_abs_diff(w, r.layers[l].weight(p)), 1e-12) << to_string(p);
    }
}

TEST(SharedR1, IndependentPerLayerRotationsBreakInvariance) {
  const ModelCheckpoint f = fuse_norms(init_model(ModelConfig{}));
  std::vector<RotationMatrix> shared(f.layers.size(), randomized_hadamard(64, 1));
  EXPECT_TRUE(verify_invariance(f, testing::apply_per_layer_bbr(f, shared), 4, 1e-8).passed);
  std::vector<RotationMatrix> independent;
  for (std::size_t l = 0; l < f.layers.size(); ++l) independent.push_back(randomized_hadamard(64, 100 + l));
  EXPECT_GT(verify_invariance(f, testing::apply_per_layer_bbr(f, independent), 4, 1e-8).max_deviation, 1e-2);
}

}  // namespace
}  // namespace rotaquant
