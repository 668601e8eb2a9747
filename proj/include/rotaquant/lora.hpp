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
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "rotaquant/analysis.hpp"
#include "rotaquant/checkpoint.hpp"
#include "rotaquant/container.hpp"
#include "rotaquant/corpus.hpp"
#include "rotaquant/model.hpp"
#include "rotaquant/quant.hpp"
#include "rotaquant/rotation.hpp"

namespace rotaquant {

enum class FinetuneScheme { kPlainLora, kRoloraLar, kRoloraLbr, kFull };

inline std::string to_string(FinetuneScheme s) {
  switch (s) {
    case FinetuneScheme::kPlainLora: return "plain_lora";
    case FinetuneScheme::kRoloraLar: return "rolora_lar";
    case FinetuneScheme::kRoloraLbr: return "rolora_lbr";
    case FinetuneScheme::kFull: return "full";
  }
  return "";
}

/// Accepts "plain_lora" or "plain-lora" style names.
inline FinetuneScheme parse_finetune_scheme(std::string s) {
  std::replace(s.begin(), s.end(), '-', '_');
  for (auto k : {FinetuneScheme::kPlainLora, FinetuneScheme::kRoloraLar, FinetuneScheme::kRoloraLbr, FinetuneScheme::kFull})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown fine-tune scheme '" + s + "'");
}

inline bool is_rolora(FinetuneScheme s) { return s == FinetuneScheme::kRoloraLar || s == FinetuneScheme::kRoloraLbr; }

struct FinetuneConfig {
  FinetuneScheme scheme = FinetuneScheme::kPlainLora;
  std::vector<Projection> targets = {Projection::kQ, Projection::kV};
  std::size_t rank = 16;
  std::size_t epochs = 1;
  std::size_t steps = 0;  // overrides epochs when nonzero
  std::size_t batch = 8;
  double learn_rate = 1e-4;
  std::uint64_t seed = 0;
  double scaling = 1.0;
  std::optional<RotationSet> rotation;
  std::size_t log_every = 10;
  std::size_t kurtosis_probe = 4;   // held-in windows used for kurtosis logging
  std::optional<int> train_weight_bits;  // fake-quantized frozen base weights (QRoLoRA)
  std::optional<int> train_act_bits;     // fake-quantized projection inputs, straight-through backward

  void validate() const {
    if (is_rolora(scheme) && !rotation) throw ConfigError("finetune.rotation is required for " + to_string(scheme));
    if (!is_rolora(scheme) && rotation && !rotation->empty())
      throw ConfigError("finetune.rotation must be absent for " + to_string(scheme));
    if (scheme != FinetuneScheme::kFull) {
      if (targets.empty()) throw ConfigError("finetune.targets must not be empty");
      if (rank == 0) throw ConfigError("finetune.rank must be positive");
    }
    if (batch == 0) throw ConfigError("finetune.batch must be positive");
    if (epochs == 0 && steps == 0) throw ConfigError("finetune.epochs must be positive");
    if (!(learn_rate >= 0.0 && std::isfinite(learn_rate))) throw ConfigError("finetune.learn_rate must be finite and >= 0");
    if (!std::isfinite(scaling)) throw ConfigError("finetune.scaling must be finite");
    if (log_every == 0) throw ConfigError("finetune.log_every must be positive");
    if (kurtosis_probe == 0) throw ConfigError("finetune.kurtosis_probe must be positive");
    for (const auto& b : {train_weight_bits, train_act_bits})
      if (b && !QuantSpec::allowed_bits(*b)) throw ConfigError("finetune training bit width must be one of {4, 6, 8, 16}");
  }
};

struct LoraAdapter {
  std::size_t layer = 0;
  Projection projection = Projection::kQ;
  Matrix a;  // d_in x r
  Matrix b;  // r x d_out
  double scaling = 1.0;

  std::string target() const { return param_name(layer, projection); }
  std::size_t rank() const { return a.cols(); }
};

/// Everything a fine-tuning run mutates, plus the frozen weights it starts from.
struct TrainingState {
  FinetuneConfig config;
  ModelCheckpoint base;   // frozen weights; unrotated for LBR
  ModelCheckpoint model;  // executed weights: rotated for LBR, fake-quantized with train_weight_bits, trained for full
  std::vector<LoraAdapter> adapters;
  std::map<std::string, std::pair<Matrix, Matrix>> factors;  // LBR placement per target

  DeltaMap deltas() const {
    DeltaMap out;
    for (const auto& ad : adapters) {
      LowRankDelta d{ad.a, ad.b, ad.scaling, {}, {}};
      if (auto it = factors.find(ad.target()); it != factors.end()) {
        d.left = it->second.first;
        d.right = it->second.second;
      }
      out.emplace(ad.target(), std::move(d));
    }
    return out;
  }

  /// Forward options for the executed model with adapters bound to `storage`.
  ForwardOptions options(const DeltaMap& storage) const {
    ForwardOptions o;
    o.act_bits = config.train_act_bits;
    if (!storage.empty()) o.deltas = &storage;
    return o;
  }
};

namespace detail {

inline ModelCheckpoint fake_quant_projections(ModelCheckpoint m, int bits) {
  for (auto& lw : m.layers)
    for (Projection p : kAllProjections) lw.weight(p) = fake_quant_weight(lw.weight(p), bits);
  return m;
}

}  // namespace detail

/// Binds fresh adapters (A ~ N(0, 0.02²), B = 0) to every layer's targets.
///
/// LAR adapts the weights of an already rotated checkpoint. LBR keeps the
/// checkpoint unrotated, executes its rotated form, and routes each adapter
/// through the rotation rewrite factors so that it adapts the pre-rotation weight.
inline TrainingState attach_adapters(const ModelCheckpoint& m, const FinetuneConfig& cfg) {
  cfg.validate();
  TrainingState s;
  s.config = cfg;
  s.base = m;
  switch (cfg.scheme) {
    case FinetuneScheme::kRoloraLar:
      if (!m.rotation.r1) throw StateError("rolora_lar needs a rotated checkpoint; run rotate first");
      s.model = m;
      break;
    case FinetuneScheme::kRoloraLbr:
      if (m.rotation.any()) throw StateError("rolora_lbr needs an unrotated checkpoint; the rotation is applied at merge");
      s.model = apply_rotation(m, *cfg.rotation);
      break;
    case FinetuneScheme::kPlainLora:
    case FinetuneScheme::kFull: s.model = m; break;
  }
  if (cfg.train_weight_bits) {
    if (cfg.scheme == FinetuneScheme::kFull) throw ConfigError("train_weight_bits applies to adapter schemes only");
    s.model = detail::fake_quant_projections(std::move(s.model), *cfg.train_weight_bits);
  }
  if (cfg.scheme == FinetuneScheme::kFull) return s;

  std::mt19937_64 rng(cfg.seed);
  std::set<Projection> seen;
  for (Projection p : cfg.targets)
    if (!seen.insert(p).second) throw ConfigError("duplicate fine-tune target " + to_string(p));
  for (std::size_t l = 0; l < m.layers.size(); ++l)
    for (Projection p : cfg.targets) {
      const Matrix& w = m.layers[l].weight(p);
      if (cfg.rank > std::min(w.rows(), w.cols()))
        throw ConfigError("finetune.rank " + std::to_string(cfg.rank) + " exceeds min dimension of " + param_name(l, p) +
                          " " + w.shape_string());
      LoraAdapter ad;
      ad.layer = l;
      ad.projection = p;
      ad.a = random_gaussian(w.rows(), cfg.rank, 0.02, rng);
      ad.b = Matrix(cfg.rank, w.cols());
      ad.scaling = cfg.scaling;
      if (cfg.scheme == FinetuneScheme::kRoloraLbr) {
        auto f = rotation_rewrite_factors(m, *cfg.rotation, l, p);
        if (!f.first.empty() || !f.second.empty()) s.factors.emplace(ad.target(), std::move(f));
      }
      s.adapters.push_back(std::move(ad));
    }
  return s;
}

struct KurtosisSample {
  std::size_t step = 0;
  std::string point;  // layers.<l>.<point>
  double value = 0.0;
};

struct TrainingLogEntry {
  std::size_t step = 0;
  double loss = 0.0;
  std::optional<double> mean_kurtosis;
};

struct TrainingLog {
  std::vector<TrainingLogEntry> entries;
  std::vector<KurtosisSample> kurtosis;  // every projection-input point at every logged step
  std::size_t steps = 0;
  double final_mean_kurtosis = 0.0;
  std::vector<double> final_layer_kurtosis;  // per layer, mean over that layer's points
};

inline std::size_t total_steps(const FinetuneConfig& cfg, std::size_t stream_len, std::size_t seq_len) {
  if (cfg.steps) return cfg.steps;
  const std::size_t per_epoch = std::max<std::size_t>(1, stream_len / (cfg.batch * seq_len));
  return cfg.epochs * per_epoch;
}

namespace detail {

struct AdamSlot {
  Matrix m, v;
};

class Adam {
 public:
  explicit Adam(double lr) : lr_(lr) {}

  void step(const NamedMatrices& grads, const std::function<Matrix&(const std::string&)>& param) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
      Matrix& p = param(name);
      auto [it, fresh] = slots_.try_emplace(name);
      if (fresh) it->second = {Matrix(g.rows(), g.cols()), Matrix(g.rows(), g.cols())};
      double* m = it->second.m.data();
      double* v = it->second.v.data();
      double* w = p.data();
      const double* gd = g.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * gd[i];
        v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * gd[i] * gd[i];
        w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps);
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  double lr_;
  std::size_t t_ = 0;
  std::map<std::string, AdamSlot> slots_;
};

inline void log_kurtosis(const TrainingState& s, const std::vector<Tokens>& probe, std::size_t step, TrainingLog& log,
                         std::optional<double>& mean_out, std::vector<double>* per_layer) {
  const DeltaMap deltas = s.deltas();
  ForwardOptions o = s.options(deltas);
  o.act_bits.reset();
  const auto points = projection_capture_points(s.model.config);
  const auto stats = capture_stats(s.model, probe, points, o);
  double total = 0.0;
  if (per_layer) per_layer->assign(s.model.config.n_layers, 0.0);
  const std::size_t per = points.size() / s.model.config.n_layers;
  for (std::size_t i = 0; i < stats.size(); ++i) {
    log.kurtosis.push_back({step, stats[i].point, stats[i].kurtosis});
    total += stats[i].kurtosis;
    if (per_layer) (*per_layer)[i / per] += stats[i].kurtosis / static_cast<double>(per);
  }
  mean_out = total / static_cast<double>(stats.size());
}

}  // namespace detail

/// Adam fine-tuning on windows drawn from `stream`. Adapter schemes update only
/// A and B; `full` updates every parameter of the executed model. The frozen
/// base is never written.
inline TrainingLog finetune(TrainingState& s, std::span<const int> stream) {
  const FinetuneConfig& cfg = s.config;
  const std::size_t T = s.model.config.seq_len;
  if (stream.size() < T) throw InputError("training corpus shorter than one window of " + std::to_string(T) + " tokens");
  const std::vector<Tokens> probe = consecutive_windows(stream, T, cfg.kurtosis_probe);
  std::mt19937_64 rng(cfg.seed ^ 0x5851f42d4c957f2dULL);
  TrainingLog log;
  log.steps = total_steps(cfg, stream.size(), T);

  std::set<std::string> trainables;
  std::map<std::string, Matrix*> slots;
  if (cfg.scheme == FinetuneScheme::kFull) {
    for (const auto& name : s.model.parameter_names()) {
      if (s.model.norm_fused && name.find("norm") != std::string::npos) continue;
      trainables.insert(name);
      slots[name] = &s.model.param(name);
    }
  } else {
    for (auto& ad : s.adapters) {
      slots[lora_param_name(ad.target(), 'A')] = &ad.a;
      slots[lora_param_name(ad.target(), 'B')] = &ad.b;
    }
    for (const auto& [name, _] : slots) trainables.insert(name);
  }
  detail::Adam adam(cfg.learn_rate);

  for (std::size_t step = 0; step < log.steps; ++step) {
    TrainingLogEntry entry;
    entry.step = step;
    if (step % cfg.log_every == 0) detail::log_kurtosis(s, probe, step, log, entry.mean_kurtosis, nullptr);
    const std::vector<Tokens> batch = sample_windows(stream, T, cfg.batch, rng);
    const DeltaMap deltas = s.deltas();
    const ForwardOptions opts = s.options(deltas);
    NamedMatrices grads;
    double loss = 0.0;
    try {
      for (const auto& seq : batch) {
        LossAndGrads lg = loss_and_grads(s.model, seq, trainables, opts);
        loss += lg.loss;
        for (auto& [name, g] : lg.grads) {
          auto [it, fresh] = grads.try_emplace(name, std::move(g));
          if (!fresh) it->second += g;
        }
      }
    } catch (const NumericalError& e) {
      throw NumericalError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    loss *= inv;
    if (!std::isfinite(loss)) throw NumericalError("training diverged at step " + std::to_string(step));
    for (auto& [_, g] : grads) g = inv * g;
    entry.loss = loss;
    log.entries.push_back(entry);
    adam.step(grads, [&](const std::string& n) -> Matrix& { return *slots.at(n); });
  }
  std::optional<double> final_mean;
  detail::log_kurtosis(s, probe, log.steps, log, final_mean, &log.final_layer_kurtosis);
  log.final_mean_kurtosis = *final_mean;
  return log;
}

/// Folds adapters into the weights; the result carries no adapters.
///
/// plain / LAR: W' = W + s·A·B on the checkpoint the adapters were attached to.
/// LBR: merge into the unrotated weights, then apply the configured rotation.
/// full: the trained weights.
inline ModelCheckpoint merge_adapters(const TrainingState& s) {
  if (s.config.scheme == FinetuneScheme::kFull) return s.model;
  ModelCheckpoint out = s.base;
  for (const auto& ad : s.adapters) {
    Matrix& w = out.layers.at(ad.layer).weight(ad.projection);
    w += ad.scaling * matmul(ad.a, ad.b);
  }
  if (s.config.scheme == FinetuneScheme::kRoloraLbr) out = apply_rotation(std::move(out), *s.config.rotation);
  return out;
}

/// Adapters as lora.<layer>.<proj>.A / .B tensors with the fine-tune settings in meta.
inline Container adapters_to_container(const TrainingState& s) {
  Container c;
  json targets = json::array();
  for (Projection p : s.config.targets) targets.push_back(to_string(p));
  c.meta = {{"kind", "lora"},
            {"scheme", to_string(s.config.scheme)},
            {"rank", s.config.rank},
            {"scaling", s.config.scaling},
            {"seed", s.config.seed},
            {"targets", targets}};
  for (const auto& ad : s.adapters) {
    c.put_matrix(lora_param_name(ad.target(), 'A'), ad.a);
    c.put_matrix(lora_param_name(ad.target(), 'B'), ad.b);
  }
  return c;
}

/// Replaces the adapters of a freshly attached state with stored ones.
inline void load_adapters(TrainingState& s, const Container& c) {
  if (c.meta.value("kind", "") != "lora") throw FormatError(FormatErrorKind::kMalformedHeader, "container holds no adapters");
  for (auto& ad : s.adapters) {
    ad.a = c.get_matrix(lora_param_name(ad.target(), 'A'), ad.a.rows(), ad.a.cols());
    ad.b = c.get_matrix(lora_param_name(ad.target(), 'B'), ad.b.rows(), ad.b.cols());
  }
}

inline void write_training_log_csv(std::ostream& os, const TrainingLog& log) {
  os << "step,loss,kurtosis\n";
  for (const auto& e : log.entries)
    os << e.step << ',' << format_real(e.loss) << ',' << (e.mean_kurtosis ? format_real(*e.mean_kurtosis) : "") << '\n';
  os << log.steps << ",," << format_real(log.final_mean_kurtosis) << '\n';
}

/// step,layer,point,value; rows with point mean_projection_inputs average every
/// projection-input capture point at that step.
inline void write_kurtosis_csv(std::ostream& os, const TrainingLog& log) {
  os << "step,layer,point,value\n";
  std::map<std::size_t, std::pair<double, std::size_t>> means;
  for (const auto& k : log.kurtosis) {
    const std::size_t dot = k.point.find('.', 7);
    os << k.step << ',' << k.point.substr(7, dot - 7) << ',' << k.point.substr(dot + 1) << ',' << format_real(k.value) << '\n';
    auto& [sum, n] = means[k.step];
    sum += k.value;
    ++n;
  }
  for (const auto& [step, sn] : means)
    os << step << ",all,mean_projection_inputs," << format_real(sn.first / static_cast<double>(sn.second)) << '\n';
}

}  // namespace rotaquant
