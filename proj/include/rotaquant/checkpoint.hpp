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

#include <filesystem>
#include <string>

#include "rotaquant/container.hpp"
#include "rotaquant/error.hpp"
#include "rotaquant/model.hpp"

namespace rotaquant {

inline json config_to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model}, {"n_layers", c.n_layers}, {"n_heads", c.n_heads}, {"d_ffn", c.d_ffn},
          {"vocab", c.vocab},     {"seq_len", c.seq_len},   {"seed", c.seed}};
}

/// Missing fields keep their defaults; unknown fields are rejected.
inline ModelConfig config_from_json(const json& j, ModelConfig c = {}) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    auto read = [&](auto& field) {
      if (!value.is_number_unsigned() && !(value.is_number_integer() && value.get<std::int64_t>() >= 0))
        throw ConfigError("model." + key + " must be a non-negative integer");
      field = value.get<std::remove_reference_t<decltype(field)>>();
    };
    if (key == "d_model") read(c.d_model);
    else if (key == "n_layers") read(c.n_layers);
    else if (key == "n_heads") read(c.n_heads);
    else if (key == "d_ffn") read(c.d_ffn);
    else if (key == "vocab") read(c.vocab);
    else if (key == "seq_len") read(c.seq_len);
    else if (key == "seed") read(c.seed);
    else throw ConfigError("unknown model config field '" + key + "'");
  }
  return c;
}

inline json rotation_record_to_json(const RotationRecord& r) {
  return {{"r1", r.r1}, {"r1_seed", r.r1_seed}, {"r1_kind", r.r1_kind}, {"r2", r.r2},
          {"r3", r.r3}, {"r3_seed", r.r3_seed}, {"r3_kind", r.r3_kind}};
}

inline RotationRecord rotation_record_from_json(const json& j) {
  RotationRecord r;
  r.r1 = j.at("r1").get<bool>();
  r.r1_seed = j.at("r1_seed").get<std::uint64_t>();
  r.r1_kind = j.at("r1_kind").get<std::string>();
  r.r2 = j.at("r2").get<bool>();
  r.r3 = j.at("r3").get<bool>();
  r.r3_seed = j.at("r3_seed").get<std::uint64_t>();
  r.r3_kind = j.at("r3_kind").get<std::string>();
  return r;
}

namespace detail {

inline std::pair<std::size_t, std::size_t> param_shape(const ModelConfig& c, const std::string& name) {
  if (name == "embedding") return {c.vocab, c.d_model};
  if (name == "position") return {c.seq_len, c.d_model};
  if (name == "lm_head") return {c.d_model, c.vocab};
  if (name.find("norm") != std::string::npos) return {1, c.d_model};
  if (name.ends_with("w_up") || name.ends_with("w_gate")) return {c.d_model, c.d_ffn};
  if (name.ends_with("w_down")) return {c.d_ffn, c.d_model};
  return {c.d_model, c.d_model};
}

}  // namespace detail

inline json checkpoint_meta(const ModelCheckpoint& m) {
  return {{"kind", "model"},
          {"config", config_to_json(m.config)},
          {"norm_fused", m.norm_fused},
          {"rotation", rotation_record_to_json(m.rotation)}};
}

inline Container checkpoint_to_container(const ModelCheckpoint& m) {
  Container c;
  c.meta = checkpoint_meta(m);
  for (const auto& name : m.parameter_names()) c.put_matrix(name, m.param(name));
  return c;
}

/// Reads config and flags from `meta`, then every parameter at its configured shape.
inline ModelCheckpoint checkpoint_from_container(const Container& c) {
  ModelCheckpoint m;
  if (c.meta.value("kind", "") != "model")
    throw FormatError(FormatErrorKind::kMalformedHeader, "container is not a model checkpoint");
  try {
    m.config = config_from_json(c.meta.at("config"));
    m.config.validate();
    m.norm_fused = c.meta.at("norm_fused").get<bool>();
    m.rotation = rotation_record_from_json(c.meta.at("rotation"));
  } catch (const json::exception& e) {
    throw FormatError(FormatErrorKind::kMalformedHeader, std::string("checkpoint meta: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(FormatErrorKind::kMalformedHeader, std::string("checkpoint meta: ") + e.what());
  }
  m.layers.resize(m.config.n_layers);
  for (const auto& name : m.parameter_names()) {
    const auto [rows, cols] = detail::param_shape(m.config, name);
    m.param(name) = c.get_matrix(name, rows, cols);
  }
  if (m.norm_fused) {
    auto ones = [](const Matrix& v) {
      return std::all_of(v.values().begin(), v.values().end(), [](double x) { return x == 1.0; });
    };
    bool ok = ones(m.final_norm);
    for (const auto& lw : m.layers) ok = ok && ones(lw.attn_norm) && ones(lw.ffn_norm);
    if (!ok) throw FormatError(FormatErrorKind::kMalformedHeader, "norm_fused checkpoint has non-unit norm scales");
  }
  return m;
}

/// Weights are stored as 32-bit floats, so a save/load round trip rounds to f32.
inline void save_checkpoint(const ModelCheckpoint& m, const std::filesystem::path& path) {
  write_container(path, checkpoint_to_container(m));
}

inline ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_container(read_container(path));
}

/// Every parameter rounded through f32, i.e. what a save/load round trip yields.
inline ModelCheckpoint round_to_storage(ModelCheckpoint m) {
  for (const auto& name : m.parameter_names())
    for (double& v : m.param(name).values()) v = static_cast<float>(v);
  return m;
}

}  // namespace rotaquant
