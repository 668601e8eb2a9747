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
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "rotaquant/checkpoint.hpp"
#include "rotaquant/experiments.hpp"
#include "rotaquant/quant_model.hpp"

namespace rotaquant {

/// Synthetic Markov chain unless `path` names a byte-level text file.
struct CorpusConfig {
  std::string path;
  std::size_t length = 65536;
  std::size_t branching = 4;
  std::uint64_t seed = 0;
  std::uint64_t variant = 0;
  double held_out_fraction = 0.1;
};

struct PretrainConfig {
  std::size_t steps = 0;
  double learn_rate = 3e-3;
  std::size_t batch = 8;
  std::vector<std::size_t> outlier_channels;
  double outlier_factor = 1.0;
  bool plant_before_pretraining = true;
};

struct RotationConfig {
  bool r1 = true;
  bool r2 = true;
  bool r3 = false;
  std::uint64_t seed = 0;
};

struct EvalConfig {
  std::size_t calibration_windows = 16;
  std::size_t eval_windows = 32;
  std::size_t invariance_trials = 64;
  double invariance_tolerance = 1e-6;
};

struct AnalysisConfig {
  std::vector<std::size_t> ranks = fig4_ranks();
  std::vector<Projection> fig4_targets = {Projection::kQ, Projection::kV, Projection::kO, Projection::kDown};
  std::size_t fig4_steps = 100;
  double fig4_learn_rate = 1e-3;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  ModelConfig model;
  CorpusConfig corpus;
  PretrainConfig pretrain;
  RotationConfig rotation;
  FinetuneConfig finetune;  // rotation is filled from `rotation` when the scheme needs it
  QuantSpec quant;
  EvalConfig eval;
  AnalysisConfig analysis;
};

namespace detail {

template <class F>
void for_fields(const json& j, const std::string& section, F&& f) {
  if (!j.is_object()) throw ConfigError(section + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    const std::string field = section + "." + key;
    bool known = false;
    try {
      known = f(key, value);
    } catch (const json::exception&) {
      throw ConfigError(field + " has the wrong type");
    }
    if (!known) throw ConfigError("unknown config field '" + field + "'");
  }
}

inline bool is_count(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

inline std::size_t get_count(const json& v, const std::string& field) {
  if (!is_count(v)) throw ConfigError(field + " must be a non-negative integer");
  return v.get<std::size_t>();
}

inline double get_real(const json& v, const std::string& field) {
  if (!v.is_number()) throw ConfigError(field + " must be a number");
  return v.get<double>();
}

inline bool get_bool(const json& v, const std::string& field) {
  if (!v.is_boolean()) throw ConfigError(field + " must be a boolean");
  return v.get<bool>();
}

inline std::vector<std::size_t> get_counts(const json& v, const std::string& field) {
  if (!v.is_array()) throw ConfigError(field + " must be an array");
  std::vector<std::size_t> out;
  for (const auto& x : v) out.push_back(get_count(x, field));
  return out;
}

inline std::vector<Projection> get_projections(const json& v, const std::string& field) {
  if (!v.is_array()) throw ConfigError(field + " must be an array of projection names");
  std::vector<Projection> out;
  for (const auto& x : v) {
    if (!x.is_string()) throw ConfigError(field + " must be an array of projection names");
    out.push_back(parse_projection(x.get<std::string>()));
  }
  return out;
}

inline json projections_to_json(const std::vector<Projection>& ps) {
  json a = json::array();
  for (Projection p : ps) a.push_back(to_string(p));
  return a;
}

inline json optional_bits(const std::optional<int>& b) { return b ? json(*b) : json(nullptr); }

}  // namespace detail

inline json finetune_config_to_json(const FinetuneConfig& f) {
  return {{"scheme", to_string(f.scheme)},
          {"targets", detail::projections_to_json(f.targets)},
          {"rank", f.rank},
          {"epochs", f.epochs},
          {"steps", f.steps},
          {"batch", f.batch},
          {"learn_rate", f.learn_rate},
          {"seed", f.seed},
          {"scaling", f.scaling},
          {"log_every", f.log_every},
          {"kurtosis_probe", f.kurtosis_probe},
          {"train_weight_bits", detail::optional_bits(f.train_weight_bits)},
          {"train_act_bits", detail::optional_bits(f.train_act_bits)}};
}

inline json experiment_config_to_json(const ExperimentConfig& c) {
  const auto& co = c.corpus;
  const auto& p = c.pretrain;
  const auto& r = c.rotation;
  const auto& e = c.eval;
  const auto& a = c.analysis;
  json q = quant_spec_to_json(c.quant);
  return {{"seed", c.seed},
          {"output_dir", c.output_dir},
          {"model", config_to_json(c.model)},
          {"corpus",
           {{"path", co.path}, {"length", co.length}, {"branching", co.branching}, {"seed", co.seed},
            {"variant", co.variant}, {"held_out_fraction", co.held_out_fraction}}},
          {"pretrain",
           {{"steps", p.steps}, {"learn_rate", p.learn_rate}, {"batch", p.batch}, {"outlier_channels", p.outlier_channels},
            {"outlier_factor", p.outlier_factor}, {"plant_before_pretraining", p.plant_before_pretraining}}},
          {"rotation", {{"r1", r.r1}, {"r2", r.r2}, {"r3", r.r3}, {"seed", r.seed}}},
          {"finetune", finetune_config_to_json(c.finetune)},
          {"quant", q},
          {"eval",
           {{"calibration_windows", e.calibration_windows}, {"eval_windows", e.eval_windows},
            {"invariance_trials", e.invariance_trials}, {"invariance_tolerance", e.invariance_tolerance}}},
          {"analysis",
           {{"ranks", a.ranks}, {"fig4_targets", detail::projections_to_json(a.fig4_targets)},
            {"fig4_steps", a.fig4_steps}, {"fig4_learn_rate", a.fig4_learn_rate}}}};
}

inline FinetuneConfig finetune_config_from_json(const json& j, FinetuneConfig f = {}) {
  using namespace detail;
  for_fields(j, "finetune", [&](const std::string& k, const json& v) {
    const std::string n = "finetune." + k;
    auto bits = [&](std::optional<int>& out) {
      if (v.is_null()) out.reset();
      else if (v.is_number_integer()) out = v.get<int>();
      else throw ConfigError(n + " must be an integer or null");
    };
    if (k == "scheme") f.scheme = parse_finetune_scheme(v.get<std::string>());
    else if (k == "targets") f.targets = get_projections(v, n);
    else if (k == "rank") f.rank = get_count(v, n);
    else if (k == "epochs") f.epochs = get_count(v, n);
    else if (k == "steps") f.steps = get_count(v, n);
    else if (k == "batch") f.batch = get_count(v, n);
    else if (k == "learn_rate") f.learn_rate = get_real(v, n);
    else if (k == "seed") f.seed = get_count(v, n);
    else if (k == "scaling") f.scaling = get_real(v, n);
    else if (k == "log_every") f.log_every = get_count(v, n);
    else if (k == "kurtosis_probe") f.kurtosis_probe = get_count(v, n);
    else if (k == "train_weight_bits") bits(f.train_weight_bits);
    else if (k == "train_act_bits") bits(f.train_act_bits);
    else return false;
    return true;
  });
  return f;
}

/// Checks every section and the cross-section constraints (dims, window counts).
inline void validate(const ExperimentConfig& c) {
  c.model.validate();
  c.quant.validate();
  FinetuneConfig f = c.finetune;
  if (is_rolora(f.scheme)) f.rotation = RotationSet{};
  else f.rotation.reset();
  f.validate();
  if (f.scheme != FinetuneScheme::kFull && f.rank > c.model.d_model)
    throw ConfigError("finetune.rank " + std::to_string(f.rank) + " exceeds model.d_model");
  const auto& co = c.corpus;
  if (!(co.held_out_fraction > 0.0 && co.held_out_fraction < 1.0))
    throw ConfigError("corpus.held_out_fraction must lie in (0, 1)");
  if (co.path.empty()) {
    if (co.branching == 0 || co.branching > c.model.vocab)
      throw ConfigError("corpus.branching must lie in [1, model.vocab]");
    const auto held_out = static_cast<double>(co.length) * co.held_out_fraction;
    if (held_out < static_cast<double>(c.model.seq_len + 1) ||
        static_cast<double>(co.length) - held_out < static_cast<double>(c.model.seq_len + 1))
      throw ConfigError("corpus.length too short for model.seq_len windows in both splits");
  }
  for (std::size_t ch : c.pretrain.outlier_channels)
    if (ch >= c.model.d_model) throw ConfigError("pretrain.outlier_channels entry exceeds model.d_model");
  if (!std::isfinite(c.pretrain.outlier_factor) || c.pretrain.outlier_factor == 0.0)
    throw ConfigError("pretrain.outlier_factor must be finite and nonzero");
  if (c.pretrain.batch == 0) throw ConfigError("pretrain.batch must be positive");
  if (c.rotation.r2 && !is_power_of_two(c.model.d_ffn)) throw ConfigError("rotation.r2 requires a power-of-two model.d_ffn");
  if (c.eval.eval_windows == 0) throw ConfigError("eval.eval_windows must be positive");
  if (c.eval.invariance_trials == 0) throw ConfigError("eval.invariance_trials must be positive");
  if (!(c.eval.invariance_tolerance > 0.0)) throw ConfigError("eval.invariance_tolerance must be positive");
  if (c.analysis.ranks.empty()) throw ConfigError("analysis.ranks must not be empty");
  for (std::size_t r : c.analysis.ranks)
    if (r == 0) throw ConfigError("analysis.ranks entries must be positive");
  if (c.analysis.fig4_targets.empty()) throw ConfigError("analysis.fig4_targets must not be empty");
  if (c.output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

/// Parses a fully resolved config. Unknown fields are rejected by name.
inline ExperimentConfig experiment_config_from_json(const json& j) {
  using namespace detail;
  ExperimentConfig c;
  for_fields(j, "config", [&](const std::string& k, const json& v) {
    if (k == "seed") c.seed = get_count(v, "seed");
    else if (k == "output_dir") c.output_dir = v.get<std::string>();
    else if (k == "model") {
      if (!v.is_object()) throw ConfigError("model must be a JSON object");
      c.model = config_from_json(v);
    } else if (k == "corpus") {
      for_fields(v, "corpus", [&](const std::string& f, const json& x) {
        const std::string n = "corpus." + f;
        if (f == "path") c.corpus.path = x.get<std::string>();
        else if (f == "length") c.corpus.length = get_count(x, n);
        else if (f == "branching") c.corpus.branching = get_count(x, n);
        else if (f == "seed") c.corpus.seed = get_count(x, n);
        else if (f == "variant") c.corpus.variant = get_count(x, n);
        else if (f == "held_out_fraction") c.corpus.held_out_fraction = get_real(x, n);
        else return false;
        return true;
      });
    } else if (k == "pretrain") {
      for_fields(v, "pretrain", [&](const std::string& f, const json& x) {
        const std::string n = "pretrain." + f;
        auto& p = c.pretrain;
        if (f == "steps") p.steps = get_count(x, n);
        else if (f == "learn_rate") p.learn_rate = get_real(x, n);
        else if (f == "batch") p.batch = get_count(x, n);
        else if (f == "outlier_channels") p.outlier_channels = get_counts(x, n);
        else if (f == "outlier_factor") p.outlier_factor = get_real(x, n);
        else if (f == "plant_before_pretraining") p.plant_before_pretraining = get_bool(x, n);
        else return false;
        return true;
      });
    } else if (k == "rotation") {
      for_fields(v, "rotation", [&](const std::string& f, const json& x) {
        const std::string n = "rotation." + f;
        if (f == "r1") c.rotation.r1 = get_bool(x, n);
        else if (f == "r2") c.rotation.r2 = get_bool(x, n);
        else if (f == "r3") c.rotation.r3 = get_bool(x, n);
        else if (f == "seed") c.rotation.seed = get_count(x, n);
        else return false;
        return true;
      });
    } else if (k == "finetune") {
      c.finetune = finetune_config_from_json(v);
    } else if (k == "quant") {
      c.quant = quant_spec_from_json(v);
    } else if (k == "eval") {
      for_fields(v, "eval", [&](const std::string& f, const json& x) {
        const std::string n = "eval." + f;
        if (f == "calibration_windows") c.eval.calibration_windows = get_count(x, n);
        else if (f == "eval_windows") c.eval.eval_windows = get_count(x, n);
        else if (f == "invariance_trials") c.eval.invariance_trials = get_count(x, n);
        else if (f == "invariance_tolerance") c.eval.invariance_tolerance = get_real(x, n);
        else return false;
        return true;
      });
    } else if (k == "analysis") {
      for_fields(v, "analysis", [&](const std::string& f, const json& x) {
        const std::string n = "analysis." + f;
        if (f == "ranks") c.analysis.ranks = get_counts(x, n);
        else if (f == "fig4_targets") c.analysis.fig4_targets = get_projections(x, n);
        else if (f == "fig4_steps") c.analysis.fig4_steps = get_count(x, n);
        else if (f == "fig4_learn_rate") c.analysis.fig4_learn_rate = get_real(x, n);
        else return false;
        return true;
      });
    } else {
      return false;
    }
    return true;
  });
  validate(c);
  return c;
}

/// Layers defaults, file and flag overrides (later wins) into one explicit
/// config. The global seed comes from the overrides, else `env_seed`, else 0,
/// and fills every section seed the overrides leave unset.
inline json resolve_config(const std::vector<json>& overrides, std::optional<std::uint64_t> env_seed = std::nullopt) {
  json merged = experiment_config_to_json(ExperimentConfig{});
  merged.erase("seed");
  for (const char* section : {"model", "corpus", "rotation", "finetune"}) merged[section].erase("seed");
  for (const json& o : overrides) {
    if (o.is_null()) continue;
    if (!o.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& [key, value] : o.items())
      if (value.is_object() && merged.contains(key) && !merged[key].is_object())
        throw ConfigError(key + " must not be an object");
    merged.merge_patch(o);
  }
  if (!merged.contains("seed")) merged["seed"] = env_seed.value_or(0);
  if (!detail::is_count(merged["seed"])) throw ConfigError("seed must be a non-negative integer");
  for (const char* section : {"model", "corpus", "rotation", "finetune"}) {
    json& s = merged[section];
    if (!s.is_object()) throw ConfigError(std::string(section) + " must be a JSON object");
    if (!s.contains("seed")) s["seed"] = merged["seed"];
  }
  return experiment_config_to_json(experiment_config_from_json(merged));
}

/// 64-bit FNV-1a of the canonical (sorted-key, compact) serialization.
inline std::string config_hash(const json& resolved) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : resolved.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline Corpus load_corpus(const ExperimentConfig& c) {
  if (!c.corpus.path.empty()) return text_corpus(c.corpus.path, c.model.vocab);
  MarkovSpec m;
  m.vocab = c.model.vocab;
  m.length = c.corpus.length;
  m.branching = c.corpus.branching;
  m.seed = c.corpus.seed;
  m.variant = c.corpus.variant;
  return markov_corpus(m);
}

inline RotationSet rotation_set(const ExperimentConfig& c) {
  return make_rotation_set(c.model, c.rotation.r1, c.rotation.r2, c.rotation.r3, c.rotation.seed);
}

inline BaseModelSpec base_model_spec(const ExperimentConfig& c) {
  BaseModelSpec s;
  s.model = c.model;
  s.pretrain_steps = c.pretrain.steps;
  s.pretrain_lr = c.pretrain.learn_rate;
  s.pretrain_batch = c.pretrain.batch;
  s.outlier_channels = c.pretrain.outlier_channels;
  s.outlier_factor = c.pretrain.outlier_factor;
  s.plant_before_pretraining = c.pretrain.plant_before_pretraining;
  return s;
}

/// Output of `eval` and `quantize`. Exact loss and degradation are absent when
/// the input is already a quantized checkpoint.
struct EvalReport {
  QuantSpec spec;
  std::optional<double> exact_loss;
  double quant_loss = 0.0;
  std::optional<double> degradation;
  std::size_t calibration_windows = 0;
  std::size_t eval_windows = 0;

  friend bool operator==(const EvalReport& a, const EvalReport& b) {
    return a.spec.weight_bits == b.spec.weight_bits && a.spec.act_bits == b.spec.act_bits &&
           a.spec.weight_quantizer == b.spec.weight_quantizer && a.spec.clip_ratio == b.spec.clip_ratio &&
           a.exact_loss == b.exact_loss && a.quant_loss == b.quant_loss && a.degradation == b.degradation &&
           a.calibration_windows == b.calibration_windows && a.eval_windows == b.eval_windows;
  }
};

inline json eval_report_to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"setting", r.spec.label()},
          {"spec", quant_spec_to_json(r.spec)},
          {"exact_loss", opt(r.exact_loss)},
          {"quant_loss", r.quant_loss},
          {"degradation", opt(r.degradation)},
          {"calibration_windows", r.calibration_windows},
          {"eval_windows", r.eval_windows}};
}

inline EvalReport eval_report_from_json(const json& j) {
  EvalReport r;
  auto opt = [](const json& v) { return v.is_null() ? std::optional<double>() : std::optional<double>(v.get<double>()); };
  detail::for_fields(j, "report", [&](const std::string& k, const json& v) {
    if (k == "setting") return true;
    if (k == "spec") r.spec = quant_spec_from_json(v);
    else if (k == "exact_loss") r.exact_loss = opt(v);
    else if (k == "quant_loss") r.quant_loss = v.get<double>();
    else if (k == "degradation") r.degradation = opt(v);
    else if (k == "calibration_windows") r.calibration_windows = v.get<std::size_t>();
    else if (k == "eval_windows") r.eval_windows = v.get<std::size_t>();
    else return false;
    return true;
  });
  return r;
}

}  // namespace rotaquant
