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

// Shared fixtures and independent oracles for the test suites.

#include <cmath>
#include <random>
#include <set>
#include <string>

#include "rotaquant/model.hpp"

namespace rotaquant::testing {

inline ModelConfig micro_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ffn = 16;
  c.vocab = 11;
  c.seq_len = 6;
  c.seed = seed;
  return c;
}

inline ModelConfig small_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ffn = 32;
  c.vocab = 24;
  c.seq_len = 12;
  c.seed = seed;
  return c;
}

// Init with larger weights and non-trivial norm scales so every path carries signal.
inline ModelCheckpoint lively_model(const ModelConfig& c, double std = 0.4) {
  ModelCheckpoint m = init_model(c);
  std::mt19937_64 rng(c.seed + 1000);
  std::normal_distribution<double> g(0.0, std);
  std::uniform_real_distribution<double> scale(0.5, 1.5);
  for (const auto& name : m.parameter_names()) {
    Matrix& p = m.param(name);
    const bool norm = name.find("norm") != std::string::npos;
    for (double& v : p.values()) v = norm ? scale(rng) : g(rng);
  }
  return m;
}

inline Tokens random_tokens(const ModelConfig& c, std::size_t n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> tok(0, static_cast<int>(c.vocab) - 1);
  Tokens t(n);
  for (int& x : t) x = tok(rng);
  return t;
}

inline Tokens random_tokens(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tokens(c, n, rng);
}

// Central finite difference of the loss with respect to one scalar.
template <typename LossFn>
double central_difference(double& slot, LossFn&& loss, double eps = 1e-4) {
  const double saved = slot;
  slot = saved + eps;
  const double up = loss();
  slot = saved - eps;
  const double down = loss();
  slot = saved;
  return (up - down) / (2.0 * eps);
}

inline bool close_rel(double analytic, double numeric, double rel = 1e-4, double abs_tol = 1e-6) {
  return std::abs(analytic - numeric) <= abs_tol + rel * std::max(std::abs(analytic), std::abs(numeric));
}

}  // namespace rotaquant::testing

#include "rotaquant/rotation.hpp"

namespace rotaquant::testing {

// Counterexample rewrite: every layer gets its own R1. Breaks the residual
// stream because consecutive blocks disagree about the basis.
inline ModelCheckpoint apply_per_layer_bbr(ModelCheckpoint m, const std::vector<RotationMatrix>& per_layer) {
  const std::size_t L = m.layers.size();
  m.embedding = rotate_rows(m.embedding, per_layer.front());
  m.position = rotate_rows(m.position, per_layer.front());
  for (std::size_t l = 0; l < L; ++l) {
    const RotationMatrix& q = per_layer[l];
    auto& lw = m.layers[l];
    for (Projection p : {Projection::kQ, Projection::kK, Projection::kV, Projection::kUp, Projection::kGate})
      lw.weight(p) = matmul_tn(q.dense(), lw.weight(p));
    lw.wo = rotate_rows(lw.wo, q);
    lw.w_down = rotate_rows(lw.w_down, q);
  }
  m.lm_head = matmul_tn(per_layer.back().dense(), m.lm_head);
  return m;
}

}  // namespace rotaquant::testing
