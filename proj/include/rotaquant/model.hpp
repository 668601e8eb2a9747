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
#include <array>
#include <cctype>
#include <limits>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "rotaquant/error.hpp"
#include "rotaquant/hadamard.hpp"
#include "rotaquant/linalg.hpp"
#include "rotaquant/quant.hpp"

namespace rotaquant {

using Tokens = std::vector<int>;

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ffn = 256;
  std::size_t vocab = 128;
  std::size_t seq_len = 64;
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    auto positive = [](std::size_t v, const char* field) {
      if (v == 0) throw ConfigError(std::string("model.") + field + " must be positive");
    };
    positive(d_model, "d_model");
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_ffn, "d_ffn");
    positive(vocab, "vocab");
    positive(seq_len, "seq_len");
    if (!is_power_of_two(d_model)) throw ConfigError("model.d_model must be a power of two");
    if (!is_power_of_two(d_ffn)) throw ConfigError("model.d_ffn must be a power of two");
    if (d_model % n_heads != 0) throw ConfigError("model.n_heads must divide model.d_model");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Which rotation rewrites have been applied to a checkpoint; enough to replay them.
struct RotationRecord {
  bool r1 = false;
  std::uint64_t r1_seed = 0;
  std::string r1_kind;
  bool r2 = false;
  bool r3 = false;
  std::uint64_t r3_seed = 0;
  std::string r3_kind;

  bool any() const { return r1 || r2 || r3; }
  friend bool operator==(const RotationRecord&, const RotationRecord&) = default;
};

enum class Projection { kQ, kK, kV, kO, kUp, kGate, kDown };

inline constexpr std::array<Projection, 7> kAllProjections = {
    Projection::kQ, Projection::kK, Projection::kV, Projection::kO,
    Projection::kUp, Projection::kGate, Projection::kDown};

inline std::string to_string(Projection p) {
  switch (p) {
    case Projection::kQ: return "wq";
    case Projection::kK: return "wk";
    case Projection::kV: return "wv";
    case Projection::kO: return "wo";
    case Projection::kUp: return "w_up";
    case Projection::kGate: return "w_gate";
    case Projection::kDown: return "w_down";
  }
  return "?";
}

/// Accepts "wq", "W_q", "q_proj" style names.
inline Projection parse_projection(std::string_view name) {
  std::string s;
  for (char c : name)
    if (c != '_') s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (s == "wq" || s == "qproj") return Projection::kQ;
  if (s == "wk" || s == "kproj") return Projection::kK;
  if (s == "wv" || s == "vproj") return Projection::kV;
  if (s == "wo" || s == "oproj") return Projection::kO;
  if (s == "wup" || s == "wu" || s == "upproj") return Projection::kUp;
  if (s == "wgate" || s == "wg" || s == "gateproj") return Projection::kGate;
  if (s == "wdown" || s == "wd" || s == "downproj") return Projection::kDown;
  throw ConfigError("unknown projection '" + std::string(name) + "'");
}

inline std::string param_name(std::size_t layer, Projection p) {
  return "layers." + std::to_string(layer) + "." + to_string(p);
}

struct LayerWeights {
  Matrix attn_norm;  // 1 x d_model
  Matrix wq, wk, wv, wo;
  Matrix ffn_norm;  // 1 x d_model
  Matrix w_up, w_gate;
  Matrix w_down;

  Matrix& weight(Projection p) {
    switch (p) {
      case Projection::kQ: return wq;
      case Projection::kK: return wk;
      case Projection::kV: return wv;
      case Projection::kO: return wo;
      case Projection::kUp: return w_up;
      case Projection::kGate: return w_gate;
      case Projection::kDown: return w_down;
    }
    throw ConfigError("bad projection");
  }
  const Matrix& weight(Projection p) const { return const_cast<LayerWeights*>(this)->weight(p); }

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

/// Pre-norm decoder weights plus the flags describing rewrites already applied.
struct ModelCheckpoint {
  ModelConfig config;
  Matrix embedding;  // vocab x d_model
  Matrix position;   // seq_len x d_model, added to the token embedding
  std::vector<LayerWeights> layers;
  Matrix final_norm;  // 1 x d_model
  Matrix lm_head;     // d_model x vocab
  bool norm_fused = false;
  RotationRecord rotation;

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names = {"embedding", "position"};
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      for (const char* n : {"attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_up", "w_gate", "w_down"})
        names.push_back(p + n);
    }
    names.push_back("final_norm");
    names.push_back("lm_head");
    return names;
  }

  Matrix* find_param(std::string_view name) {
    if (name == "embedding") return &embedding;
    if (name == "position") return &position;
    if (name == "final_norm") return &final_norm;
    if (name == "lm_head") return &lm_head;
    if (name.substr(0, 7) != "layers.") return nullptr;
    const auto dot = name.find('.', 7);
    if (dot == std::string_view::npos) return nullptr;
    std::size_t layer = 0;
    for (char c : name.substr(7, dot - 7)) {
      if (c < '0' || c > '9') return nullptr;
      layer = layer * 10 + static_cast<std::size_t>(c - '0');
    }
    if (dot == 7 || layer >= layers.size()) return nullptr;
    const auto leaf = name.substr(dot + 1);
    LayerWeights& lw = layers[layer];
    if (leaf == "attn_norm") return &lw.attn_norm;
    if (leaf == "ffn_norm") return &lw.ffn_norm;
    for (Projection p : kAllProjections)
      if (leaf == to_string(p)) return &lw.weight(p);
    return nullptr;
  }

  Matrix& param(std::string_view name) {
    Matrix* m = find_param(name);
    if (m == nullptr) throw ConfigError("unknown parameter '" + std::string(name) + "'");
    return *m;
  }
  const Matrix& param(std::string_view name) const { return const_cast<ModelCheckpoint*>(this)->param(name); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& name : parameter_names()) n += param(name).size();
    return n;
  }

  friend bool operator==(const ModelCheckpoint&, const ModelCheckpoint&) = default;
};

/// Closed-form parameter count for a config.
inline std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t per_layer = 2 * d + 4 * d * d + 3 * d * c.d_ffn;
  return c.vocab * d + c.seq_len * d + c.n_layers * per_layer + d + d * c.vocab;
}

/// Gaussian(0, 0.02) projections and embeddings, unit norm scales; deterministic per seed.
inline ModelCheckpoint init_model(const ModelConfig& config) {
  config.validate();
  constexpr double kStd = 0.02;
  std::mt19937_64 rng(config.seed);
  ModelCheckpoint m;
  m.config = config;
  const std::size_t d = config.d_model;
  m.embedding = random_gaussian(config.vocab, d, kStd, rng);
  m.position = random_gaussian(config.seq_len, d, kStd, rng);
  m.layers.resize(config.n_layers);
  for (auto& lw : m.layers) {
    lw.attn_norm = Matrix(1, d, 1.0);
    lw.ffn_norm = Matrix(1, d, 1.0);
    lw.wq = random_gaussian(d, d, kStd, rng);
    lw.wk = random_gaussian(d, d, kStd, rng);
    lw.wv = random_gaussian(d, d, kStd, rng);
    lw.wo = random_gaussian(d, d, kStd, rng);
    lw.w_up = random_gaussian(d, config.d_ffn, kStd, rng);
    lw.w_gate = random_gaussian(d, config.d_ffn, kStd, rng);
    lw.w_down = random_gaussian(config.d_ffn, d, kStd, rng);
  }
  m.final_norm = Matrix(1, d, 1.0);
  m.lm_head = random_gaussian(d, config.vocab, kStd, rng);
  return m;
}

/// Low-rank side path x·(L · s·A·B · R) added to a projection.
///
/// `left`/`right` are empty for ordinary adapters. They carry the rotation
/// rewrite when the adapter sits before a rotation (LBR placement).
struct LowRankDelta {
  Matrix a;  // d_in x r
  Matrix b;  // r x d_out
  double scaling = 1.0;
  Matrix left;   // d_in x d_in or empty
  Matrix right;  // d_out x d_out or empty

  bool plain() const { return left.empty() && right.empty(); }

  Matrix effective() const {
    Matrix delta = scaling * matmul(a, b);
    if (!left.empty()) delta = matmul(left, delta);
    if (!right.empty()) delta = matmul(delta, right);
    return delta;
  }
};

/// Keyed by the base parameter name, e.g. "layers.0.wq".
using DeltaMap = std::map<std::string, LowRankDelta>;

inline std::vector<std::string> projection_capture_points(const ModelConfig& c) {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < c.n_layers; ++l)
    for (const char* p : {"attn_in", "attn_out", "ffn_in", "ffn_down"})
      out.push_back("layers." + std::to_string(l) + "." + p);
  return out;
}

/// Capture point names:
///   layers.<i>.attn_in    input of wq/wk/wv        (tokens x d_model)
///   layers.<i>.attn_out   input of wo              (tokens x d_model)
///   layers.<i>.ffn_in     input of w_up/w_gate     (tokens x d_model)
///   layers.<i>.ffn_down   input of w_down          (tokens x d_ffn), after the online rotation
///   layers.<i>.attn_probs attention probabilities  (n_heads*tokens x tokens)
///   layers.<i>.residual   residual stream after the block
/// Captured activations are taken before activation fake quantization.
inline bool is_valid_capture_point(const ModelConfig& c, std::string_view name) {
  if (name.substr(0, 7) != "layers.") return false;
  const auto dot = name.find('.', 7);
  if (dot == std::string_view::npos || dot == 7) return false;
  std::size_t layer = 0;
  for (char ch : name.substr(7, dot - 7)) {
    if (ch < '0' || ch > '9') return false;
    layer = layer * 10 + static_cast<std::size_t>(ch - '0');
  }
  if (layer >= c.n_layers) return false;
  const auto leaf = name.substr(dot + 1);
  return leaf == "attn_in" || leaf == "attn_out" || leaf == "ffn_in" || leaf == "ffn_down" ||
         leaf == "attn_probs" || leaf == "residual";
}

struct ForwardOptions {
  std::vector<std::string> capture;
  std::optional<int> act_bits;        // per-token fake quantization of every projection input
  const DeltaMap* deltas = nullptr;   // low-rank side paths
};

struct ForwardTrace {
  std::map<std::string, Matrix> captured;
  Matrix logits;              // tokens x vocab
  std::optional<double> loss; // next-token cross-entropy when >= 2 tokens
};

namespace detail {

inline constexpr double kRmsEps = 1e-6;

struct NormResult {
  Matrix xhat;               // x / rms(x)
  std::vector<double> rinv;  // 1 / rms(x) per row
};

inline NormResult rms_normalize(const Matrix& x) {
  NormResult r{Matrix(x.rows(), x.cols()), std::vector<double>(x.rows())};
  const double d = static_cast<double>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double ss = 0.0;
    for (double v : x.row(i)) ss += v * v;
    const double rinv = 1.0 / std::sqrt(ss / d + kRmsEps);
    r.rinv[i] = rinv;
    auto out = r.xhat.row(i);
    auto in = x.row(i);
    for (std::size_t j = 0; j < x.cols(); ++j) out[j] = in[j] * rinv;
  }
  return r;
}

inline Matrix scale_cols(const Matrix& x, const Matrix& alpha) {
  Matrix out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] *= alpha(0, j);
  }
  return out;
}

// dx for y = x / rms(x) given dy.
inline Matrix rms_backward(const Matrix& dy, const NormResult& n) {
  Matrix dx(dy.rows(), dy.cols());
  const double d = static_cast<double>(dy.cols());
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    auto g = dy.row(i);
    auto y = n.xhat.row(i);
    double dot = 0.0;
    for (std::size_t j = 0; j < g.size(); ++j) dot += g[j] * y[j];
    auto out = dx.row(i);
    for (std::size_t j = 0; j < g.size(); ++j) out[j] = (g[j] - y[j] * dot / d) * n.rinv[i];
  }
  return dx;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct BlockCache {
  NormResult attn_norm;
  Matrix a_q;  // quantized input of wq/wk/wv
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, tokens x tokens
  Matrix ctx_q;               // quantized input of wo
  NormResult ffn_norm;
  Matrix f_q;  // quantized input of w_up/w_gate
  Matrix g, u;
  Matrix s_q;  // quantized input of w_down
};

class Runner {
 public:
  Runner(const ModelCheckpoint& m, const ForwardOptions& opts) : m_(m), opts_(opts) {
    for (const auto& c : opts.capture) {
      if (!is_valid_capture_point(m.config, c)) throw ConfigError("unknown capture point '" + c + "'");
      wanted_.insert(c);
    }
    if (opts.deltas != nullptr) {
      for (const auto& [name, delta] : *opts.deltas) {
        const Matrix* w = const_cast<ModelCheckpoint&>(m).find_param(name);
        if (w == nullptr || name.find(".w") == std::string::npos)
          throw ConfigError("low-rank delta bound to unknown projection '" + name + "'");
        if (delta.a.rows() != w->rows() || delta.b.cols() != w->cols() || delta.a.cols() != delta.b.rows())
          throw ShapeError("low-rank delta for " + name + " does not match weight " + w->shape_string());
      }
    }
  }

  void check_tokens(const Tokens& tokens) const {
    if (tokens.empty()) throw InputError("token sequence is empty");
    if (tokens.size() > m_.config.seq_len)
      throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds seq_len " +
                       std::to_string(m_.config.seq_len));
    for (int t : tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= m_.config.vocab)
        throw InputError("token " + std::to_string(t) + " outside vocabulary of " + std::to_string(m_.config.vocab));
  }

  Matrix embed(const Tokens& tokens) const {
    const std::size_t d = m_.config.d_model;
    Matrix h(tokens.size(), d);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      auto out = h.row(t);
      auto e = m_.embedding.row(static_cast<std::size_t>(tokens[t]));
      auto p = m_.position.row(t);
      for (std::size_t j = 0; j < d; ++j) out[j] = e[j] + p[j];
    }
    return h;
  }

  Matrix quantize_input(const Matrix& x) const {
    if (!opts_.act_bits) return x;
    Matrix q = x;
    fake_quant_activation_inplace(q, *opts_.act_bits);
    return q;
  }

  const LowRankDelta* delta_for(std::size_t layer, Projection p) const {
    if (opts_.deltas == nullptr) return nullptr;
    auto it = opts_.deltas->find(param_name(layer, p));
    return it == opts_.deltas->end() ? nullptr : &it->second;
  }

  Matrix project(const Matrix& x, std::size_t layer, Projection p) const {
    Matrix y = matmul(x, m_.layers[layer].weight(p));
    if (const LowRankDelta* d = delta_for(layer, p)) {
      if (d->plain()) {
        axpy(d->scaling, matmul(matmul(x, d->a), d->b), y);
      } else {
        y += matmul(x, d->effective());
      }
    }
    return y;
  }

  void capture(std::size_t layer, const char* point, const Matrix& value, std::map<std::string, Matrix>& out) const {
    if (wanted_.empty()) return;
    std::string key = "layers." + std::to_string(layer) + "." + point;
    if (wanted_.count(key)) out[key] = value;
  }

  // Runs block `layer` on residual stream h; fills cache when given.
  Matrix block(std::size_t layer, const Matrix& h, BlockCache* cache, std::map<std::string, Matrix>& captured) const {
    const LayerWeights& lw = m_.layers[layer];
    const std::size_t T = h.rows();
    const std::size_t heads = m_.config.n_heads, hd = m_.config.head_dim();

    NormResult an = rms_normalize(h);
    Matrix a = scale_cols(an.xhat, lw.attn_norm);
    capture(layer, "attn_in", a, captured);
    Matrix a_q = quantize_input(a);
    Matrix q = project(a_q, layer, Projection::kQ);
    Matrix k = project(a_q, layer, Projection::kK);
    Matrix v = project(a_q, layer, Projection::kV);

    Matrix ctx(T, m_.config.d_model);
    std::vector<Matrix> probs(heads, Matrix(T, T));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    for (std::size_t hh = 0; hh < heads; ++hh) {
      const std::size_t c0 = hh * hd;
      Matrix& p = probs[hh];
      for (std::size_t i = 0; i < T; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += q(i, c0 + c) * k(j, c0 + c);
          s *= inv_sqrt;
          p(i, j) = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          p(i, j) = std::exp(p(i, j) - mx);
          z += p(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) {
          p(i, j) /= z;
          const double w = p(i, j);
          for (std::size_t c = 0; c < hd; ++c) ctx(i, c0 + c) += w * v(j, c0 + c);
        }
      }
    }
    if (!wanted_.empty()) {
      Matrix all(heads * T, T);
      for (std::size_t hh = 0; hh < heads; ++hh) set_block(all, hh * T, 0, probs[hh]);
      capture(layer, "attn_probs", all, captured);
    }
    capture(layer, "attn_out", ctx, captured);
    Matrix ctx_q = quantize_input(ctx);
    Matrix h_mid = h + project(ctx_q, layer, Projection::kO);

    NormResult fn = rms_normalize(h_mid);
    Matrix f = scale_cols(fn.xhat, lw.ffn_norm);
    capture(layer, "ffn_in", f, captured);
    Matrix f_q = quantize_input(f);
    Matrix g = project(f_q, layer, Projection::kGate);
    Matrix u = project(f_q, layer, Projection::kUp);
    Matrix s(T, m_.config.d_ffn);
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double gv = g.data()[i];
      s.data()[i] = gv * sigmoid(gv) * u.data()[i];
    }
    if (m_.rotation.r2) fwht_rows_inplace(s);
    capture(layer, "ffn_down", s, captured);
    Matrix s_q = quantize_input(s);
    Matrix out = h_mid + project(s_q, layer, Projection::kDown);
    capture(layer, "residual", out, captured);

    if (cache != nullptr) {
      cache->attn_norm = std::move(an);
      cache->a_q = std::move(a_q);
      cache->q = std::move(q);
      cache->k = std::move(k);
      cache->v = std::move(v);
      cache->probs = std::move(probs);
      cache->ctx_q = std::move(ctx_q);
      cache->ffn_norm = std::move(fn);
      cache->f_q = std::move(f_q);
      cache->g = std::move(g);
      cache->u = std::move(u);
      cache->s_q = std::move(s_q);
    }
    return out;
  }

  Matrix head(const Matrix& h, NormResult* norm_out) const {
    NormResult n = rms_normalize(h);
    Matrix z = scale_cols(n.xhat, m_.final_norm);
    Matrix logits = matmul(z, m_.lm_head);
    if (norm_out != nullptr) *norm_out = std::move(n);
    return logits;
  }

 private:
  const ModelCheckpoint& m_;
  const ForwardOptions& opts_;
  std::set<std::string> wanted_;
};

// Mean next-token cross-entropy; fills dlogits (already divided by the target count) when given.
inline double next_token_loss(const Matrix& logits, const Tokens& tokens, Matrix* dlogits) {
  const std::size_t T = tokens.size();
  const std::size_t V = logits.cols();
  if (dlogits != nullptr) *dlogits = Matrix(T, V);
  double loss = 0.0;
  const double inv = 1.0 / static_cast<double>(T - 1);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    auto row = logits.row(t);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    const auto target = static_cast<std::size_t>(tokens[t + 1]);
    loss += lse - row[target];
    if (dlogits != nullptr) {
      auto d = dlogits->row(t);
      for (std::size_t j = 0; j < V; ++j) d[j] = std::exp(row[j] - lse) * inv;
      d[target] -= inv;
    }
  }
  return loss * inv;
}

}  // namespace detail

/// Causal pre-norm forward pass.
///
/// With `opts.act_bits` every projection input is fake-quantized per token;
/// weights are used as stored (see quantize_model_weights for weight quantization).
inline ForwardTrace forward(const ModelCheckpoint& m, const Tokens& tokens, const ForwardOptions& opts = {}) {
  detail::Runner run(m, opts);
  run.check_tokens(tokens);
  ForwardTrace trace;
  Matrix h = run.embed(tokens);
  for (std::size_t l = 0; l < m.layers.size(); ++l) h = run.block(l, h, nullptr, trace.captured);
  trace.logits = run.head(h, nullptr);
  if (tokens.size() >= 2) trace.loss = detail::next_token_loss(trace.logits, tokens, nullptr);
  return trace;
}

/// Name of the trainable for an adapter factor: lora.<layer>.<proj>.A / .B
inline std::string lora_param_name(const std::string& base_name, char factor) {
  // base_name is "layers.<i>.<proj>"
  return "lora." + base_name.substr(7) + "." + factor;
}

using NamedMatrices = std::map<std::string, Matrix>;

struct LossAndGrads {
  double loss = 0.0;
  NamedMatrices grads;
};

/// Mean next-token cross-entropy and its gradient with respect to `trainables`.
///
/// Trainables are base parameter names (see ModelCheckpoint::parameter_names)
/// or adapter factors "lora.<layer>.<proj>.A|B" for deltas in `opts.deltas`.
/// Activation fake quantization, when enabled, is treated as identity in the
/// backward pass.
inline LossAndGrads loss_and_grads(const ModelCheckpoint& m, const Tokens& tokens,
                                   const std::set<std::string>& trainables, const ForwardOptions& opts = {}) {
  if (tokens.size() < 2) throw InputError("loss_and_grads needs at least 2 tokens");
  std::set<std::string> lora_names;
  if (opts.deltas != nullptr)
    for (const auto& [name, _] : *opts.deltas) {
      lora_names.insert(lora_param_name(name, 'A'));
      lora_names.insert(lora_param_name(name, 'B'));
    }
  for (const auto& t : trainables) {
    if (lora_names.count(t)) continue;
    if (const_cast<ModelCheckpoint&>(m).find_param(t) == nullptr)
      throw ConfigError("unknown trainable parameter '" + t + "'");
  }
  auto wants = [&](const std::string& n) { return trainables.count(n) > 0; };

  ForwardOptions fwd = opts;
  fwd.capture.clear();
  detail::Runner run(m, fwd);
  run.check_tokens(tokens);
  std::map<std::string, Matrix> unused;
  const std::size_t L = m.layers.size();
  const std::size_t T = tokens.size();
  const std::size_t heads = m.config.n_heads, hd = m.config.head_dim();

  std::vector<Matrix> h_in(L + 1);
  std::vector<detail::BlockCache> caches(L);
  h_in[0] = run.embed(tokens);
  for (std::size_t l = 0; l < L; ++l) h_in[l + 1] = run.block(l, h_in[l], &caches[l], unused);
  detail::NormResult final_n;
  Matrix logits = run.head(h_in[L], &final_n);
  Matrix dlogits;
  LossAndGrads out;
  out.loss = detail::next_token_loss(logits, tokens, &dlogits);

  Matrix z = detail::scale_cols(final_n.xhat, m.final_norm);
  if (wants("lm_head")) out.grads["lm_head"] = matmul_tn(z, dlogits);
  Matrix dz = matmul_nt(dlogits, m.lm_head);
  auto norm_scale_grad = [](const Matrix& xhat, const Matrix& dy) {
    Matrix g(1, xhat.cols());
    for (std::size_t i = 0; i < xhat.rows(); ++i)
      for (std::size_t j = 0; j < xhat.cols(); ++j) g(0, j) += xhat(i, j) * dy(i, j);
    return g;
  };
  if (wants("final_norm")) out.grads["final_norm"] = norm_scale_grad(final_n.xhat, dz);
  Matrix dh = detail::rms_backward(detail::scale_cols(dz, m.final_norm), final_n);

  // Backward of y = x·W (+ delta); returns dx and records requested grads.
  auto proj_backward = [&](std::size_t layer, Projection p, const Matrix& x, const Matrix& dy) {
    const std::string name = param_name(layer, p);
    const Matrix& w = m.layers[layer].weight(p);
    if (wants(name)) out.grads[name] = matmul_tn(x, dy);
    Matrix dx = matmul_nt(dy, w);
    if (const LowRankDelta* d = run.delta_for(layer, p)) {
      const std::string an = lora_param_name(name, 'A'), bn = lora_param_name(name, 'B');
      if (d->plain()) {
        Matrix dyb = matmul_nt(dy, d->b);  // T x r
        if (wants(an)) out.grads[an] = d->scaling * matmul_tn(x, dyb);
        if (wants(bn)) out.grads[bn] = d->scaling * matmul_tn(matmul(x, d->a), dy);
        axpy(d->scaling, matmul_nt(dyb, d->a), dx);
      } else {
        if (wants(an) || wants(bn)) {
          Matrix g = matmul_tn(x, dy);  // d_in x d_out, gradient of the effective delta
          if (!d->left.empty()) g = matmul_tn(d->left, g);
          if (!d->right.empty()) g = matmul_nt(g, d->right);
          if (wants(an)) out.grads[an] = d->scaling * matmul_nt(g, d->b);
          if (wants(bn)) out.grads[bn] = d->scaling * matmul_tn(d->a, g);
        }
        dx += matmul_nt(dy, d->effective());
      }
    }
    return dx;
  };

  for (std::size_t li = L; li-- > 0;) {
    const detail::BlockCache& c = caches[li];
    const LayerWeights& lw = m.layers[li];
    const std::string prefix = "layers." + std::to_string(li) + ".";

    // FFN: out = h_mid + s_q·W_down
    Matrix ds = proj_backward(li, Projection::kDown, c.s_q, dh);
    if (m.rotation.r2) fwht_rows_inplace(ds);  // H is symmetric and orthogonal
    Matrix dg(T, m.config.d_ffn), du(T, m.config.d_ffn);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const double gv = c.g.data()[i];
      const double sg = detail::sigmoid(gv);
      const double silu = gv * sg;
      du.data()[i] = ds.data()[i] * silu;
      dg.data()[i] = ds.data()[i] * c.u.data()[i] * sg * (1.0 + gv * (1.0 - sg));
    }
    Matrix df = proj_backward(li, Projection::kGate, c.f_q, dg);
    df += proj_backward(li, Projection::kUp, c.f_q, du);
    if (wants(prefix + "ffn_norm")) out.grads[prefix + "ffn_norm"] = norm_scale_grad(c.ffn_norm.xhat, df);
    Matrix dh_mid = dh + detail::rms_backward(detail::scale_cols(df, lw.ffn_norm), c.ffn_norm);

    // Attention: h_mid = h + ctx_q·W_o
    Matrix dctx = proj_backward(li, Projection::kO, c.ctx_q, dh_mid);
    Matrix dq(T, m.config.d_model), dk(T, m.config.d_model), dv(T, m.config.d_model);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> dp(T);
    for (std::size_t hh = 0; hh < heads; ++hh) {
      const std::size_t c0 = hh * hd;
      const Matrix& p = c.probs[hh];
      for (std::size_t i = 0; i < T; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          double s = 0.0;
          for (std::size_t cc = 0; cc < hd; ++cc) {
            s += dctx(i, c0 + cc) * c.v(j, c0 + cc);
            dv(j, c0 + cc) += p(i, j) * dctx(i, c0 + cc);
          }
          dp[j] = s;
          dot += s * p(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) {
          const double dscore = p(i, j) * (dp[j] - dot) * inv_sqrt;
          if (dscore == 0.0) continue;
          for (std::size_t cc = 0; cc < hd; ++cc) {
            dq(i, c0 + cc) += dscore * c.k(j, c0 + cc);
            dk(j, c0 + cc) += dscore * c.q(i, c0 + cc);
          }
        }
      }
    }
    Matrix da = proj_backward(li, Projection::kQ, c.a_q, dq);
    da += proj_backward(li, Projection::kK, c.a_q, dk);
    da += proj_backward(li, Projection::kV, c.a_q, dv);
    if (wants(prefix + "attn_norm")) out.grads[prefix + "attn_norm"] = norm_scale_grad(c.attn_norm.xhat, da);
    dh = dh_mid + detail::rms_backward(detail::scale_cols(da, lw.attn_norm), c.attn_norm);
  }

  if (wants("embedding")) {
    Matrix g(m.config.vocab, m.config.d_model);
    for (std::size_t t = 0; t < T; ++t) {
      auto dst = g.row(static_cast<std::size_t>(tokens[t]));
      auto src = dh.row(t);
      for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
    }
    out.grads["embedding"] = std::move(g);
  }
  if (wants("position")) {
    Matrix g(m.config.seq_len, m.config.d_model);
    for (std::size_t t = 0; t < T; ++t) set_block(g, t, 0, block(dh, t, 0, 1, dh.cols()));
    out.grads["position"] = std::move(g);
  }
  for (const auto& [name, g] : out.grads) ensure_finite(g, "loss_and_grads");
  return out;
}

/// Scales embedding/position columns so the residual stream carries
/// dominant channels, the outlier pattern rotation is meant to remove.
[[nodiscard]] inline ModelCheckpoint plant_outlier_channels(ModelCheckpoint m, const std::vector<std::size_t>& channels, double factor) {
  for (std::size_t c : channels) {
    if (c >= m.config.d_model) throw ConfigError("outlier channel " + std::to_string(c) + " >= d_model");
    for (std::size_t r = 0; r < m.embedding.rows(); ++r) m.embedding(r, c) *= factor;
    for (std::size_t r = 0; r < m.position.rows(); ++r) m.position(r, c) *= factor;
  }
  return m;
}

}  // namespace rotaquant
