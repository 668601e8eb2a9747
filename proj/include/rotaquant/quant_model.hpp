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

#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rotaquant/checkpoint.hpp"
#include "rotaquant/container.hpp"
#include "rotaquant/model.hpp"
#include "rotaquant/quant.hpp"

namespace rotaquant {

inline json quant_spec_to_json(const QuantSpec& s) {
  return {{"weight_bits", s.weight_bits},
          {"act_bits", s.act_bits},
          {"weight_quantizer", to_string(s.weight_quantizer)},
          {"clip_ratio", s.clip_ratio},
          {"weight_granularity", "per_output_channel"},
          {"act_granularity", "per_token"},
          {"weight_symmetric", true},
          {"act_symmetric", false}};
}

inline QuantSpec quant_spec_from_json(const json& j, QuantSpec s = {}) {
  if (!j.is_object()) throw ConfigError("quant spec must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "weight_bits") s.weight_bits = value.get<int>();
      else if (key == "act_bits") s.act_bits = value.get<int>();
      else if (key == "weight_quantizer") s.weight_quantizer = parse_weight_quantizer(value.get<std::string>());
      else if (key == "clip_ratio") s.clip_ratio = value.get<double>();
      else if (key == "weight_granularity" || key == "act_granularity" || key == "weight_symmetric" ||
               key == "act_symmetric")
        continue;  // fixed by the implementation
      else throw ConfigError("unknown quant field '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("quant." + key + ": " + e.what());
    }
  }
  s.validate();
  return s;
}

/// Checkpoint whose projection weights hold their dequantized values.
struct QuantizedModel {
  QuantSpec spec;
  ModelCheckpoint model;
  std::map<std::string, QuantizedTensor> weights;  // keyed by projection parameter name
};

namespace detail {

inline const char* capture_for(Projection p) {
  switch (p) {
    case Projection::kQ:
    case Projection::kK:
    case Projection::kV: return "attn_in";
    case Projection::kO: return "attn_out";
    case Projection::kUp:
    case Projection::kGate: return "ffn_in";
    case Projection::kDown: return "ffn_down";
  }
  return "";
}

inline Matrix stack_rows(const std::vector<Matrix>& parts) {
  std::size_t rows = 0, cols = parts.empty() ? 0 : parts.front().cols();
  for (const auto& p : parts) rows += p.rows();
  Matrix out(rows, cols);
  std::size_t r = 0;
  for (const auto& p : parts) {
    set_block(out, r, 0, p);
    r += p.rows();
  }
  return out;
}

}  // namespace detail

/// Full-precision inputs of every projection over the calibration sequences,
/// keyed by projection parameter name.
inline NamedMatrices collect_projection_inputs(const ModelCheckpoint& m, const std::vector<Tokens>& calib) {
  ForwardOptions opts;
  opts.capture = projection_capture_points(m.config);
  std::map<std::string, std::vector<Matrix>> parts;
  for (const auto& seq : calib) {
    ForwardTrace t = forward(m, seq, opts);
    for (auto& [k, v] : t.captured) parts[k].push_back(std::move(v));
  }
  NamedMatrices out;
  for (std::size_t l = 0; l < m.layers.size(); ++l)
    for (Projection p : kAllProjections) {
      const std::string key = "layers." + std::to_string(l) + "." + detail::capture_for(p);
      out[param_name(l, p)] = detail::stack_rows(parts[key]);
    }
  return out;
}

/// Quantizes every projection weight (embedding, norms and lm_head stay in
/// high precision). GPTQ needs calibration sequences; RTN ignores them.
/// Scales are rounded to f32 so that stored quantized checkpoints reproduce exactly.
inline QuantizedModel quantize_model_weights(const ModelCheckpoint& m, const QuantSpec& spec,
                                             const std::vector<Tokens>& calib = {}) {
  spec.validate();
  QuantizedModel q;
  q.spec = spec;
  q.model = m;
  NamedMatrices inputs;
  if (spec.weight_quantizer == WeightQuantizer::kGptq) {
    if (calib.empty()) throw ConfigError("gptq weight quantization needs calibration sequences");
    inputs = collect_projection_inputs(m, calib);
  }
  for (std::size_t l = 0; l < m.layers.size(); ++l)
    for (Projection p : kAllProjections) {
      const std::string name = param_name(l, p);
      const Matrix& w = m.layers[l].weight(p);
      QuantizedTensor t = spec.weight_quantizer == WeightQuantizer::kRtn
                              ? rtn_quantize_weight(w, spec.weight_bits, spec.clip_ratio)
                              : gptq_quantize_weight(w, inputs.at(name), spec.weight_bits, {0.01, spec.clip_ratio});
      for (double& s : t.scales) s = static_cast<float>(s);
      q.model.layers[l].weight(p) = t.dequantize();
      q.weights.emplace(name, std::move(t));
    }
  return q;
}

inline ForwardTrace quantized_forward(const QuantizedModel& q, const Tokens& tokens,
                                      std::vector<std::string> capture = {}) {
  ForwardOptions opts;
  opts.capture = std::move(capture);
  opts.act_bits = q.spec.act_bits;
  return forward(q.model, tokens, opts);
}

/// Weights dequantized from their quantized form, every projection input
/// fake-quantized per token. With the online FFN rotation enabled the
/// transform runs before the w_down activation quantizer.
inline ForwardTrace fake_quant_forward(const ModelCheckpoint& m, const Tokens& tokens, const QuantSpec& spec,
                                       const std::vector<Tokens>& calib = {}) {
  return quantized_forward(quantize_model_weights(m, spec, calib), tokens);
}

/// Mean next-token loss over sequences.
inline double mean_loss(const ModelCheckpoint& m, const std::vector<Tokens>& sequences, const ForwardOptions& opts = {}) {
  if (sequences.empty()) throw InputError("mean_loss needs at least one sequence");
  double total = 0.0;
  for (const auto& s : sequences) {
    const auto t = forward(m, s, opts);
    if (!t.loss) throw InputError("evaluation sequences need at least 2 tokens");
    total += *t.loss;
  }
  return total / static_cast<double>(sequences.size());
}

inline double quantized_loss(const QuantizedModel& q, const std::vector<Tokens>& sequences) {
  ForwardOptions opts;
  opts.act_bits = q.spec.act_bits;
  return mean_loss(q.model, sequences, opts);
}

struct LayerQuantError {
  std::size_t layer = 0;
  double local_error = 0.0;        // ‖block_q(h) - block(h)‖_F with h the exact stream
  double stream_error = 0.0;       // ‖h_q - h‖_F after this block, quantized stream end to end
  double accumulated_error = 0.0;  // running sum of stream_error up to this layer
  double reference_norm = 0.0;     // ‖block(h)‖_F
};

/// Per-layer quantization error of the fake-quantized model against the exact one.
/// Norms aggregate over all sequences (root of summed squares).
inline std::vector<LayerQuantError> layer_quant_error(const ModelCheckpoint& m, const std::vector<Tokens>& sequences,
                                                      const QuantSpec& spec, const std::vector<Tokens>& calib = {}) {
  const QuantizedModel q = quantize_model_weights(m, spec, calib);
  const ForwardOptions exact_opts;
  ForwardOptions quant_opts;
  quant_opts.act_bits = spec.act_bits;
  detail::Runner exact(m, exact_opts), quant(q.model, quant_opts);
  const std::size_t L = m.layers.size();
  std::vector<double> local(L, 0.0), stream(L, 0.0), ref(L, 0.0);
  std::map<std::string, Matrix> unused;
  for (const auto& tokens : sequences) {
    exact.check_tokens(tokens);
    Matrix h = exact.embed(tokens);
    Matrix hq = h;
    for (std::size_t l = 0; l < L; ++l) {
      Matrix next = exact.block(l, h, nullptr, unused);
      const double loc = frobenius_norm(quant.block(l, h, nullptr, unused) - next);
      hq = quant.block(l, hq, nullptr, unused);
      const double str = frobenius_norm(hq - next);
      const double rn = frobenius_norm(next);
      local[l] += loc * loc;
      stream[l] += str * str;
      ref[l] += rn * rn;
      h = std::move(next);
    }
  }
  std::vector<LayerQuantError> out(L);
  double acc = 0.0;
  for (std::size_t l = 0; l < L; ++l) {
    out[l].layer = l;
    out[l].local_error = std::sqrt(local[l]);
    out[l].stream_error = std::sqrt(stream[l]);
    acc += out[l].stream_error;
    out[l].accumulated_error = acc;
    out[l].reference_norm = std::sqrt(ref[l]);
  }
  return out;
}

/// Codes stored as i8 (bits <= 8) or i16, scales as f32; other parameters as f32.
inline Container quantized_model_to_container(const QuantizedModel& q) {
  Container c;
  c.meta = checkpoint_meta(q.model);
  c.meta["kind"] = "quantized_model";
  c.meta["quant"] = quant_spec_to_json(q.spec);
  const DType code_type = q.spec.weight_bits <= 8 ? DType::kI8 : DType::kI16;
  for (const auto& name : q.model.parameter_names()) {
    auto it = q.weights.find(name);
    if (it == q.weights.end()) {
      c.put_matrix(name, q.model.param(name));
      continue;
    }
    const QuantizedTensor& t = it->second;
    c.put_ints(name + ".codes", code_type, {t.rows, t.cols}, t.codes);
    c.put_matrix(name + ".scales", Matrix::row_vector(t.scales));
  }
  return c;
}

inline QuantizedModel quantized_model_from_container(const Container& c) {
  if (c.meta.value("kind", "") != "quantized_model")
    throw FormatError(FormatErrorKind::kMalformedHeader, "container is not a quantized model");
  QuantizedModel q;
  try {
    q.spec = quant_spec_from_json(c.meta.at("quant"));
    q.model.config = config_from_json(c.meta.at("config"));
    q.model.config.validate();
    q.model.norm_fused = c.meta.at("norm_fused").get<bool>();
    q.model.rotation = rotation_record_from_json(c.meta.at("rotation"));
  } catch (const json::exception& e) {
    throw FormatError(FormatErrorKind::kMalformedHeader, std::string("quantized meta: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(FormatErrorKind::kMalformedHeader, std::string("quantized meta: ") + e.what());
  }
  q.model.layers.resize(q.model.config.n_layers);
  for (const auto& name : q.model.parameter_names()) {
    const auto [rows, cols] = detail::param_shape(q.model.config, name);
    if (!c.contains(name + ".codes")) {
      q.model.param(name) = c.get_matrix(name, rows, cols);
      continue;
    }
    QuantizedTensor t;
    t.rows = rows;
    t.cols = cols;
    t.bits = q.spec.weight_bits;
    t.symmetric = true;
    t.axis = GroupAxis::kColumn;
    t.codes = c.get_ints(name + ".codes");
    if (t.codes.size() != rows * cols)
      throw FormatError(FormatErrorKind::kShapeMismatch, name + ".codes: wrong element count");
    const Matrix scales = c.get_matrix(name + ".scales", 1, cols);
    t.scales.assign(scales.values().begin(), scales.values().end());
    q.model.param(name) = t.dequantize();
    q.weights.emplace(name, std::move(t));
  }
  return q;
}

}  // namespace rotaquant
