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

#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "rotaquant/analysis.hpp"
#include "rotaquant/corpus.hpp"
#include "rotaquant/lora.hpp"
#include "rotaquant/quant_model.hpp"
#include "rotaquant/rotation.hpp"

namespace rotaquant {

/// End-to-end fine-tune-then-quantize recipes.
enum class Recipe {
  kRolora,                // rotate → finetune (LAR) → merge → PTQ
  kPostTrainingRotation,  // finetune → merge → rotate → PTQ
  kPlain,                 // finetune → merge → PTQ
  kRoloraLbr,             // finetune (LBR) → merge with rotation → PTQ
};

inline std::string to_string(Recipe r) {
  switch (r) {
    case Recipe::kRolora: return "rolora";
    case Recipe::kPostTrainingRotation: return "post_training_rotation";
    case Recipe::kPlain: return "plain_lora";
    case Recipe::kRoloraLbr: return "rolora_lbr";
  }
  return "";
}

/// Held-in calibration windows and held-out evaluation windows.
struct EvalData {
  std::vector<Tokens> calibration;
  std::vector<Tokens> held_out;
};

inline EvalData make_eval_data(const CorpusSplit& split, std::size_t seq_len, std::size_t calib_count,
                               std::size_t eval_count, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0xda942042e4dd58b5ULL);
  EvalData d;
  d.calibration = sample_windows(split.held_in, seq_len, calib_count, rng);
  d.held_out = consecutive_windows(split.held_out, seq_len, eval_count);
  return d;
}

struct BaseModelSpec {
  ModelConfig model;
  std::size_t pretrain_steps = 300;
  double pretrain_lr = 3e-3;
  std::size_t pretrain_batch = 8;
  std::vector<std::size_t> outlier_channels = {3};
  double outlier_factor = 10.0;
  bool plant_before_pretraining = true;
};

/// Seeded init, planted outlier channels and full-parameter pretraining on
/// `stream` (planting after pretraining when requested).
inline ModelCheckpoint prepare_base_model(const BaseModelSpec& spec, std::span<const int> stream) {
  ModelCheckpoint m = init_model(spec.model);
  const bool plant = !spec.outlier_channels.empty() && spec.outlier_factor != 1.0;
  if (plant && spec.plant_before_pretraining)
    m = plant_outlier_channels(std::move(m), spec.outlier_channels, spec.outlier_factor);
  if (spec.pretrain_steps > 0) {
    FinetuneConfig cfg;
    cfg.scheme = FinetuneScheme::kFull;
    cfg.steps = spec.pretrain_steps;
    cfg.batch = spec.pretrain_batch;
    cfg.learn_rate = spec.pretrain_lr;
    cfg.seed = spec.model.seed;
    cfg.log_every = spec.pretrain_steps;
    cfg.kurtosis_probe = 1;
    TrainingState s = attach_adapters(m, cfg);
    finetune(s, stream);
    m = merge_adapters(s);
  }
  if (plant && !spec.plant_before_pretraining)
    m = plant_outlier_channels(std::move(m), spec.outlier_channels, spec.outlier_factor);
  return m;
}

struct RecipeResult {
  Recipe recipe = Recipe::kPlain;
  ModelCheckpoint merged;
  TrainingLog log;
};

/// Runs the fine-tuning part of a recipe. `lora` supplies targets, rank and
/// optimizer settings; its scheme and rotation are set per recipe.
inline RecipeResult train_recipe(const ModelCheckpoint& base, Recipe recipe, FinetuneConfig lora, const RotationSet& rotation,
                                 std::span<const int> stream) {
  RecipeResult out;
  out.recipe = recipe;
  ModelCheckpoint start = base;
  switch (recipe) {
    case Recipe::kRolora:
      lora.scheme = FinetuneScheme::kRoloraLar;
      lora.rotation = rotation;
      start = apply_rotation(base, rotation);
      break;
    case Recipe::kRoloraLbr:
      lora.scheme = FinetuneScheme::kRoloraLbr;
      lora.rotation = rotation;
      break;
    case Recipe::kPostTrainingRotation:
    case Recipe::kPlain:
      lora.scheme = FinetuneScheme::kPlainLora;
      lora.rotation.reset();
      break;
  }
  TrainingState s = attach_adapters(start, lora);
  out.log = finetune(s, stream);
  out.merged = merge_adapters(s);
  if (recipe == Recipe::kPostTrainingRotation) out.merged = apply_rotation(std::move(out.merged), rotation);
  return out;
}

struct PipelineReport {
  Recipe recipe = Recipe::kPlain;
  QuantSpec spec;
  double exact_loss = 0.0;
  double quant_loss = 0.0;
  double degradation = 0.0;
};

/// Exact and fake-quantized held-out loss; GPTQ calibrates on held-in windows only.
inline PipelineReport evaluate_quantized(const ModelCheckpoint& merged, Recipe recipe, const QuantSpec& spec,
                                         const EvalData& data) {
  PipelineReport r;
  r.recipe = recipe;
  r.spec = spec;
  r.exact_loss = mean_loss(merged, data.held_out);
  r.quant_loss = quantized_loss(quantize_model_weights(merged, spec, data.calibration), data.held_out);
  r.degradation = r.quant_loss - r.exact_loss;
  return r;
}

inline PipelineReport run_pipeline(const ModelCheckpoint& base, Recipe recipe, const FinetuneConfig& lora,
                                   const RotationSet& rotation, const QuantSpec& spec, const CorpusSplit& split,
                                   const EvalData& data) {
  return evaluate_quantized(train_recipe(base, recipe, lora, rotation, split.held_in).merged, recipe, spec, data);
}

inline const std::vector<std::size_t>& fig4_ranks() {
  static const std::vector<std::size_t> ranks = {4, 8, 16, 32, 64};
  return ranks;
}

struct Fig4Row {
  std::string target;
  AdapterScheme scheme = AdapterScheme::kLar;
  std::size_t rank = 0;
  double error = 0.0;
  double tail_error = 0.0;
};

/// Full-parameter fine-tune of `base` to obtain W_FT, then the LAR/LBR
/// approximation-error sweep for every layer's targets under R1 = randomized
/// Hadamard(rotation_seed).
inline std::vector<Fig4Row> run_fig4(const ModelCheckpoint& base, std::span<const int> stream, FinetuneConfig full,
                                     const std::vector<Projection>& targets, std::uint64_t rotation_seed,
                                     const std::vector<std::size_t>& ranks = fig4_ranks()) {
  full.scheme = FinetuneScheme::kFull;
  full.rotation.reset();
  ModelCheckpoint w_ft = base;
  if (full.steps > 0 || full.epochs > 0) {
    TrainingState s = attach_adapters(base, full);
    finetune(s, stream);
    w_ft = merge_adapters(s);
  }
  const RotationMatrix q = randomized_hadamard(base.config.d_model, rotation_seed);
  std::vector<Fig4Row> out;
  for (std::size_t l = 0; l < base.layers.size(); ++l)
    for (Projection p : targets) {
      const auto rows = svd_approx_experiment(base.layers[l].weight(p), w_ft.layers[l].weight(p), q, side_of(p), ranks);
      for (const auto& r : rows) out.push_back({param_name(l, p), r.scheme, r.rank, r.error, r.tail_error});
    }
  return out;
}

inline void write_fig4_csv(std::ostream& os, const std::vector<Fig4Row>& rows) {
  os << "target,scheme,rank,frobenius_error\n";
  for (const auto& r : rows) os << r.target << ',' << to_string(r.scheme) << ',' << r.rank << ',' << format_real(r.error) << '\n';
}

inline void write_qerror_csv(std::ostream& os, const std::vector<LayerQuantError>& rows) {
  os << "layer,local_error,accumulated_error\n";
  for (const auto& r : rows)
    os << r.layer << ',' << format_real(r.local_error) << ',' << format_real(r.accumulated_error) << '\n';
}

struct AblationRow {
  std::string axis;
  std::string variant;
  PipelineReport report;
};

struct AblationSetup {
  ModelCheckpoint base;
  FinetuneConfig lora;
  std::uint64_t rotation_seed = 0;
  QuantSpec spec;
  CorpusSplit split;
  EvalData data;
};

namespace detail {

inline AblationRow ablation_row(const AblationSetup& a, const std::string& axis, const std::string& variant, Recipe recipe,
                                const RotationSet& rot, const FinetuneConfig& lora) {
  return {axis, variant, run_pipeline(a.base, recipe, lora, rot, a.spec, a.split, a.data)};
}

}  // namespace detail

/// "when": rotation-aware fine-tuning vs post-training rotation vs none.
inline std::vector<AblationRow> ablate_when(const AblationSetup& a) {
  const RotationSet rot = make_rotation_set(a.base.config, true, true, false, a.rotation_seed);
  std::vector<AblationRow> out;
  for (Recipe r : {Recipe::kRolora, Recipe::kPostTrainingRotation, Recipe::kPlain})
    out.push_back(detail::ablation_row(a, "when", to_string(r), r, rot, a.lora));
  return out;
}

/// "where": which rotations are applied before rotation-aware fine-tuning.
inline std::vector<AblationRow> ablate_where(const AblationSetup& a) {
  struct Placement {
    const char* name;
    bool r1, r2, r3;
  };
  const Placement placements[] = {{"R1", true, false, false}, {"R1+R2", true, true, false},
                                  {"R1+R3", true, false, true}, {"R1+R2+R3", true, true, true}};
  std::vector<AblationRow> out;
  for (const auto& p : placements)
    out.push_back(detail::ablation_row(a, "where", p.name, Recipe::kRolora,
                                       make_rotation_set(a.base.config, p.r1, p.r2, p.r3, a.rotation_seed), a.lora));
  return out;
}

/// "how": adapters after (LAR) vs before (LBR) the rotation.
inline std::vector<AblationRow> ablate_how(const AblationSetup& a) {
  const RotationSet rot = make_rotation_set(a.base.config, true, true, false, a.rotation_seed);
  return {detail::ablation_row(a, "how", "LAR", Recipe::kRolora, rot, a.lora),
          detail::ablation_row(a, "how", "LBR", Recipe::kRoloraLbr, rot, a.lora)};
}

/// Rank sweep for rotation-aware and plain fine-tuning.
inline std::vector<AblationRow> ablate_rank(const AblationSetup& a, const std::vector<std::size_t>& ranks = fig4_ranks()) {
  const RotationSet rot = make_rotation_set(a.base.config, true, true, false, a.rotation_seed);
  std::vector<AblationRow> out;
  for (Recipe r : {Recipe::kRolora, Recipe::kPlain})
    for (std::size_t rank : ranks) {
      FinetuneConfig lora = a.lora;
      lora.rank = rank;
      out.push_back(detail::ablation_row(a, "rank", to_string(r) + ":r" + std::to_string(rank), r, rot, lora));
    }
  return out;
}

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "axis,variant,setting,exact_loss,quant_loss,degradation\n";
  for (const auto& r : rows)
    os << r.axis << ',' << r.variant << ',' << r.report.spec.label() << ',' << format_real(r.report.exact_loss) << ','
       << format_real(r.report.quant_loss) << ',' << format_real(r.report.degradation) << '\n';
}

}  // namespace rotaquant
