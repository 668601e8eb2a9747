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
// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "rotaquant/config.hpp"
#include "test_support.hpp"

namespace rotaquant {
namespace {

using testing::apply_per_layer_bbr;
using testing::lively_model;
using testing::micro_config;
using testing::random_tokens;

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---- 1 ----

Outcome hadamard_correctness() {
  Outcome o;
  std::vector<std::size_t> dims;
  for (std::size_t n = 2; n <= 1024; n *= 2) dims.push_back(n);
  for (std::size_t n : {24u, 40u, 56u}) dims.push_back(n);
  double worst_orth = 0.0;
  for (std::size_t n : dims) {
    const Matrix h = hadamard_matrix(n).dense();
    worst_orth = std::max(worst_orth, max_abs_diff(matmul_nt(h, h), Matrix::identity(n)));
  }
  o.require(worst_orth <= 1e-10, fmt("max |QQᵀ-I| %.3g", worst_orth));
  double worst_fwht = 0.0;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  for (std::size_t n = 2; n <= 1024; n *= 2) {
    const Matrix h = hadamard_matrix(n).dense();
    for (int v = 0; v < 100; ++v) {
      std::vector<double> x(n);
      for (double& e : x) e = g(rng);
      const auto fast = fwht(x, true);
      const Matrix dense = matmul(h, Matrix(n, 1, x));
      for (std::size_t i = 0; i < n; ++i) worst_fwht = std::max(worst_fwht, std::abs(fast[i] - dense(i, 0)));
    }
  }
  o.require(worst_fwht <= 1e-10, fmt("max |fwht-dense| %.3g", worst_fwht));
  if (o.pass) o.detail = fmt("%zu dims, max |QQᵀ-I| %.2g, max |fwht-dense| %.2g", dims.size(), worst_orth, worst_fwht);
  return o;
}

// ---- 2 ----

Outcome computational_invariance() {
  Outcome o;
  const ModelConfig c;  // default 4-layer model
  ModelCheckpoint plain = init_model(c);
  ModelCheckpoint scaled = plain;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (auto& lw : scaled.layers)
    for (Matrix* n : {&lw.attn_norm, &lw.ffn_norm})
      for (double& v : n->values()) v = u(rng);
  for (double& v : scaled.final_norm.values()) v = u(rng);
  double worst = 0.0;
  for (const ModelCheckpoint* m : {&plain, &scaled}) {
    const ModelCheckpoint r = apply_rotation(*m, make_rotation_set(c, true, true, true, 17));
    worst = std::max(worst, verify_invariance(*m, r, 64, 1e-6, 3).max_deviation);
  }
  o.require(worst <= 1e-6, fmt("rotated max |Δlogit| %.3g > 1e-6", worst));
  const ModelCheckpoint fused = fuse_norms(scaled);
  std::vector<RotationMatrix> independent;
  for (std::size_t l = 0; l < c.n_layers; ++l) independent.push_back(randomized_hadamard(c.d_model, 100 + l));
  const double broken = verify_invariance(scaled, apply_per_layer_bbr(fused, independent), 64, 1e-6, 3).max_deviation;
  o.require(broken > 1e-2, fmt("independent per-layer R1 deviation %.3g not > 1e-2", broken));
  if (o.pass) o.detail = fmt("shared R1+R2+R3 max |Δlogit| %.2g; independent R1s %.3g", worst, broken);
  return o;
}

// ---- 3 ----

// Five-point central difference, O(h⁴) truncation.
template <typename LossFn>
double central_difference5(double& slot, LossFn&& loss, double h = 1e-4) {
  const double saved = slot;
  double f[4];
  const double offsets[4] = {2 * h, h, -h, -2 * h};
  for (int i = 0; i < 4; ++i) {
    slot = saved + offsets[i];
    f[i] = loss();
  }
  slot = saved;
  return (-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * h);
}

Outcome gradient_fidelity() {
  Outcome o;
  constexpr double kRel = 1e-4, kFloor = 1e-8;
  std::size_t checked = 0, bad = 0;
  double worst = 0.0;
  std::set<std::string> classes;
  std::string offenders;
  auto check = [&](const std::string& name, double analytic, double numeric) {
    ++checked;
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    const double err = std::abs(analytic - numeric);
    if (scale > kFloor) worst = std::max(worst, err / scale);
    if (err > kRel * scale + kFloor && ++bad <= 3) offenders += fmt(" %s %.6g vs %.6g;", name.c_str(), analytic, numeric);
    const auto dot = name.rfind('.');
    classes.insert(name.rfind("layers.", 0) == 0 || name.rfind("lora.", 0) == 0 ? name.substr(name.find('.', name.find('.') + 1) + 1)
                                                                               : name.substr(0, dot));
  };
  // Every parameter, with and without the online FFN transform.
  for (bool r2 : {false, true}) {
    const ModelConfig c = micro_config(r2 ? 3 : 1);
    ModelCheckpoint m = lively_model(c);
    m.rotation.r2 = r2;
    const Tokens tokens = random_tokens(c, c.seq_len, 40 + r2);
    const auto names = m.parameter_names();
    const std::set<std::string> all(names.begin(), names.end());
    const auto r = loss_and_grads(m, tokens, all, {});
    for (const auto& name : names) {
      Matrix& p = m.param(name);
      for (std::size_t i = 0; i < p.size(); ++i)
        check(name, r.grads.at(name).data()[i],
              central_difference5(p.data()[i], [&] { return *forward(m, tokens).loss; }));
    }
  }
  // Adapter factors, plain and sandwiched between rewrite factors, with activation quantization.
  {
    const ModelConfig c = micro_config(4);
    const ModelCheckpoint m = lively_model(c);
    std::mt19937_64 rng(10);
    DeltaMap deltas;
    deltas["layers.0.wq"] = {random_gaussian(8, 3, 0.3, rng), random_gaussian(3, 8, 0.3, rng), 0.7, {}, {}};
    deltas["layers.1.w_up"] = {random_gaussian(8, 2, 0.3, rng), random_gaussian(2, 16, 0.3, rng), 1.3,
                               random_gaussian(8, 8, 0.5, rng), random_gaussian(16, 16, 0.5, rng)};
    deltas["layers.1.w_down"] = {random_gaussian(16, 2, 0.3, rng), random_gaussian(2, 8, 0.3, rng), 1.0, {},
                                 random_gaussian(8, 8, 0.5, rng)};
    ForwardOptions opts;
    opts.deltas = &deltas;
    const Tokens tokens = random_tokens(c, c.seq_len, rng);
    std::set<std::string> names;
    for (const auto& [base, _] : deltas) {
      names.insert(lora_param_name(base, 'A'));
      names.insert(lora_param_name(base, 'B'));
    }
    const auto r = loss_and_grads(m, tokens, names, opts);
    for (auto& [base, d] : deltas)
      for (char f : {'A', 'B'}) {
        Matrix& p = f == 'A' ? d.a : d.b;
        const std::string n = lora_param_name(base, f);
        for (std::size_t i = 0; i < p.size(); ++i)
          check(n, r.grads.at(n).data()[i], central_difference5(p.data()[i], [&] { return *forward(m, tokens, opts).loss; }));
      }
  }
  o.require(bad == 0, fmt("%zu of %zu entries outside 1e-4 relative:", bad, checked) + offenders);
  if (o.pass) o.detail = fmt("%zu entries over %zu parameter classes, worst relative error %.2g", checked, classes.size(), worst);
  return o;
}

// ---- 4 ----

Matrix gaussian(std::size_t r, std::size_t c, std::uint64_t seed, double std = 1.0) {
  std::mt19937_64 rng(seed);
  return random_gaussian(r, c, std, rng);
}

Outcome quantizer_contracts() {
  Outcome o;
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> dim(1, 6);
  std::uniform_real_distribution<double> logscale(-3.0, 3.0);
  const int widths[] = {4, 6, 8, 16};
  std::size_t violations = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const int bits = widths[trial % 4];
    const Matrix x = random_gaussian(dim(rng), dim(rng), std::pow(10.0, logscale(rng)), rng);
    const QuantizedTensor qa = rtn_quantize_activation(x, bits);
    const QuantizedTensor qw = rtn_quantize_weight(x, bits);
    const Matrix da = qa.dequantize(), dw = qw.dequantize();
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < x.cols(); ++c) {
        const double slack = 1e-12 * (1 + std::abs(x(r, c)));
        violations += std::abs(da(r, c) - x(r, c)) > qa.scales[r] / 2 + slack;
        violations += std::abs(dw(r, c) - x(r, c)) > qw.scales[c] / 2 + slack;
      }
  }
  o.require(violations == 0, fmt("%zu round-trip bound violations", violations));
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Matrix w = gaussian(16, 16, seed);
    Matrix x = gaussian(64, 16, seed + 1000);
    x = matmul(x, gaussian(16, 16, seed + 2000)) + x;
    wins += proxy_loss(x, w, gptq_quantize_weight(w, x, 4).dequantize()) <=
            proxy_loss(x, w, rtn_quantize_weight(w, 4).dequantize()) + 1e-9;
  }
  o.require(wins >= 95, fmt("GPTQ <= RTN on %d/100 seeds", wins));
  bool identical = true;
  for (std::size_t n : {4u, 16u, 64u}) {
    const Matrix x = 2.0 * hadamard_matrix(n).dense();
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const Matrix w = gaussian(n, 6, seed);
      identical = identical && gptq_quantize_weight(w, x, 4).codes == rtn_quantize_weight(w, 4).codes;
    }
  }
  o.require(identical, "identity-covariance GPTQ differs from RTN");
  if (o.pass) o.detail = fmt("10000 tensors, GPTQ <= RTN on %d/100, identity covariance exact", wins);
  return o;
}

// ---- 5 ----

Outcome rotation_benefit() {
  Outcome o;
  constexpr std::size_t d = 64;
  int wweights = 0, wacts = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Matrix w = gaussian(d, d, seed);
    for (double& v : w.row(seed % d)) v *= 100.0;
    const RotationMatrix q = randomized_hadamard(d, seed + 1);
    const Matrix rw = transpose(rotate_rows(transpose(w), q));
    wweights += frobenius_norm(fake_quant_weight(rw, 4) - rw) < frobenius_norm(fake_quant_weight(w, 4) - w);

    Matrix x = gaussian(32, d, seed + 500);
    const std::size_t ch = (seed * 7) % d;
    for (std::size_t r = 0; r < x.rows(); ++r) x(r, ch) *= 100.0;
    const Matrix rx = rotate_rows(x, randomized_hadamard(d, seed));
    Matrix qx = x, qr = rx;
    fake_quant_activation_inplace(qx, 4);
    fake_quant_activation_inplace(qr, 4);
    wacts += frobenius_norm(qr - rx) < frobenius_norm(qx - x);
  }
  o.require(wweights >= 95, fmt("weights: rotated MSE lower on %d/100", wweights));
  o.require(wacts >= 95, fmt("activations: rotated MSE lower on %d/100", wacts));
  double worst = 0.0;
  for (std::size_t n : {16u, 64u, 256u, 1024u}) {
    Matrix x(1, n);
    x(0, n / 3) = 100.0;
    worst = std::max(worst, std::abs(max_abs(rotate_rows(x, randomized_hadamard(n, 11))) - 100.0 / std::sqrt(double(n))));
  }
  o.require(worst <= 1e-9, fmt("spike magnitude off by %.3g", worst));
  if (o.pass) o.detail = fmt("weights %d/100, activations %d/100, spike/√d error %.2g", wweights, wacts, worst);
  return o;
}

// ---- shared toy setup for 6-8 ----

struct Toy {
  ModelCheckpoint base;
  CorpusSplit task;
  EvalData data;
};

// One channel planted ×100 before pretraining on one Markov variant; fine-tuning
// and evaluation use a second variant of the same chain.
Toy make_toy(std::uint64_t seed, std::size_t layers) {
  BaseModelSpec spec;
  spec.model.d_model = 64;
  spec.model.n_layers = layers;
  spec.model.n_heads = 4;
  spec.model.d_ffn = 128;
  spec.model.vocab = 64;
  spec.model.seq_len = 32;
  spec.model.seed = seed;
  spec.outlier_channels = {3};
  spec.outlier_factor = 100.0;
  spec.plant_before_pretraining = true;
  MarkovSpec ms;
  ms.vocab = 64;
  ms.length = 32768;
  ms.seed = seed;
  const Corpus pre = markov_corpus(ms);
  ms.variant = 1;
  Toy t;
  t.task = split_corpus(markov_corpus(ms), 0.1);
  t.base = prepare_base_model(spec, split_corpus(pre, 0.1).held_in);
  t.data = make_eval_data(t.task, spec.model.seq_len, 16, 32, seed);
  return t;
}

FinetuneConfig toy_lora(std::uint64_t seed, std::size_t steps) {
  FinetuneConfig f;
  f.steps = steps;
  f.learn_rate = 1e-3;
  f.seed = seed;
  f.log_every = 10;
  return f;
}

// ---- 6 ----

Outcome kurtosis_methodology() {
  Outcome o;
  const Toy t = make_toy(0, 4);
  const RotationSet rot = make_rotation_set(t.base.config, true, true, false, 0);
  const RecipeResult lar = train_recipe(t.base, Recipe::kRolora, toy_lora(0, 500), rot, t.task.held_in);
  const RecipeResult plain = train_recipe(t.base, Recipe::kPlain, toy_lora(0, 500), rot, t.task.held_in);
  std::vector<std::pair<std::size_t, double>> a, b;
  for (const auto& e : lar.log.entries)
    if (e.mean_kurtosis) a.emplace_back(e.step, *e.mean_kurtosis);
  for (const auto& e : plain.log.entries)
    if (e.mean_kurtosis) b.emplace_back(e.step, *e.mean_kurtosis);
  a.emplace_back(lar.log.steps, lar.log.final_mean_kurtosis);
  b.emplace_back(plain.log.steps, plain.log.final_mean_kurtosis);
  o.require(a.size() == b.size() && a.size() == 51, fmt("logged %zu vs %zu steps", a.size(), b.size()));
  std::size_t below = 0;
  double max_ratio = 0.0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
    below += a[i].second < b[i].second;
    max_ratio = std::max(max_ratio, a[i].second / b[i].second);
  }
  o.require(below == a.size(), fmt("LAR below plain at %zu/%zu logged steps", below, a.size()));
  const auto& la = lar.log.final_layer_kurtosis;
  const auto& lb = plain.log.final_layer_kurtosis;
  std::size_t lower = 0;
  for (std::size_t l = 0; l < la.size(); ++l) lower += la[l] < lb[l];
  o.require(10 * lower >= 9 * la.size(), fmt("final per-layer kurtosis lower in %zu/%zu layers", lower, la.size()));
  if (o.pass)
    o.detail = fmt("LAR below plain at %zu/%zu logged steps (max ratio %.3f), final %.2f vs %.2f, layers %zu/%zu", below,
                   a.size(), max_ratio, lar.log.final_mean_kurtosis, plain.log.final_mean_kurtosis, lower, la.size());
  return o;
}

// ---- 7 ----

Outcome end_to_end_direction() {
  Outcome o;
  const QuantSpec specs[] = {{4, 4, WeightQuantizer::kRtn, 1.0}, {4, 4, WeightQuantizer::kGptq, 1.0}, {6, 6, WeightQuantizer::kRtn, 1.0}};
  int both[2] = {0, 0}, ac[2] = {0, 0}, ab[2] = {0, 0};
  double worst_w6 = -1e9;
  std::printf("      seed | W4A4-rtn deg a / b / c      | W4A4-gptq deg a / b / c     | W6A6-rtn deg a / b / c\n");
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Toy t = make_toy(seed, 2);
    const RotationSet rot = make_rotation_set(t.base.config, true, true, false, seed);
    std::vector<RecipeResult> runs;
    for (Recipe r : {Recipe::kRolora, Recipe::kPostTrainingRotation, Recipe::kPlain})
      runs.push_back(train_recipe(t.base, r, toy_lora(seed, 200), rot, t.task.held_in));
    std::printf("      %4llu", static_cast<unsigned long long>(seed));
    for (int s = 0; s < 3; ++s) {
      double d[3];
      for (int r = 0; r < 3; ++r) d[r] = evaluate_quantized(runs[r].merged, runs[r].recipe, specs[s], t.data).degradation;
      std::printf(" | %+.4f %+.4f %+.4f", d[0], d[1], d[2]);
      if (s < 2) {
        ac[s] += d[0] < d[2];
        ab[s] += d[0] <= d[1];
        both[s] += d[0] < d[2] && d[0] <= d[1];
      } else {
        worst_w6 = std::max({worst_w6, d[0], d[1], d[2]});
      }
    }
    std::printf("\n");
    std::fflush(stdout);
  }
  for (int s = 0; s < 2; ++s)
    o.require(both[s] >= 7, fmt("%s: a<c and a<=b on %d/10 seeds (a<c %d, a<=b %d)", specs[s].label().c_str(), both[s],
                                ac[s], ab[s]));
  o.require(worst_w6 < 0.1, fmt("W6A6 worst degradation %.4f", worst_w6));
  const std::string counts = fmt("rtn %d/10 (a<c %d, a<=b %d), gptq %d/10 (a<c %d, a<=b %d), W6A6 worst %+.4f", both[0],
                                 ac[0], ab[0], both[1], ac[1], ab[1], worst_w6);
  o.detail = o.pass ? counts : o.detail + " | " + counts;
  return o;
}

// ---- 8 ----

Outcome fig4_methodology() {
  Outcome o;
  // Oracle on unstructured matrices of both orientations.
  std::size_t curves = 0;
  double worst_tail = 0.0;
  bool monotone = true;
  auto check_rows = [&](const std::vector<ApproxErrorRow>& rows) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      worst_tail = std::max(worst_tail, std::abs(rows[i].error - rows[i].tail_error));
      if (i > 0 && rows[i].scheme == rows[i - 1].scheme) monotone = monotone && rows[i].error <= rows[i - 1].error + 1e-12;
      else ++curves;
    }
  };
  for (std::uint64_t seed = 0; seed < 10; ++seed)
    for (WeightSide side : {WeightSide::kLeft, WeightSide::kRight}) {
      const Matrix w0 = gaussian(64, 128, seed), w1 = w0 + 0.1 * gaussian(64, 128, seed + 50);
      const std::size_t qdim = side == WeightSide::kLeft ? 64 : 128;
      check_rows(svd_approx_experiment(w0, w1, randomized_hadamard(qdim, seed), side, fig4_ranks()));
    }
  // Toy run on a fully fine-tuned d_model = 64 model.
  const Toy t = make_toy(0, 2);
  FinetuneConfig full = toy_lora(0, 100);
  const std::vector<Projection> targets(kAllProjections.begin(), kAllProjections.end());
  const auto rows = run_fig4(t.base, t.task.held_in, full, targets, 0, fig4_ranks());
  std::map<std::pair<std::size_t, std::string>, double> total;
  std::vector<ApproxErrorRow> curve;
  std::string last;
  for (const auto& r : rows) {
    const std::string key = r.target + to_string(r.scheme);
    if (key != last && !curve.empty()) {
      check_rows(curve);
      curve.clear();
    }
    last = key;
    curve.push_back({r.scheme, r.rank, r.error, r.tail_error});
    total[{r.rank, to_string(r.scheme)}] += r.error;
  }
  check_rows(curve);
  o.require(monotone, "an error curve increases with rank");
  o.require(worst_tail <= 1e-8, fmt("tail-spectrum mismatch %.3g", worst_tail));
  std::string cmp;
  std::size_t lar_wins = 0;
  for (std::size_t r : fig4_ranks()) {
    const double lar = total[{r, "LAR"}], lbr = total[{r, "LBR"}];
    lar_wins += lar < lbr;
    cmp += fmt(" r%zu %.3f/%.3f", r, lar, lbr);
  }
  o.detail = (o.pass ? "" : o.detail + " | ") +
             fmt("%zu curves monotone, tail error %.2g; summed LAR/LBR error:", curves, worst_tail) + cmp +
             fmt(" (LAR lower at %zu/5 ranks, logged only)", lar_wins);
  return o;
}

// ---- 9 ----

struct PipelineBytes {
  std::vector<std::byte> base, rotated, merged, adapters, quantized;
  std::string log_csv, kurtosis_csv, qerror_csv;
  bool operator==(const PipelineBytes&) const = default;
};

PipelineBytes run_small_pipeline() {
  ExperimentConfig c = experiment_config_from_json(resolve_config(
      {json{{"model", {{"d_model", 16}, {"n_layers", 2}, {"n_heads", 2}, {"d_ffn", 32}, {"vocab", 32}, {"seq_len", 16}}},
            {"corpus", {{"length", 8192}}},
            {"pretrain", {{"steps", 10}, {"outlier_channels", {3}}, {"outlier_factor", 10.0}}},
            {"seed", 5}}}));
  const CorpusSplit split = split_corpus(load_corpus(c), c.corpus.held_out_fraction);
  PipelineBytes out;
  const ModelCheckpoint base = prepare_base_model(base_model_spec(c), split.held_in);
  out.base = encode_container(checkpoint_to_container(base));
  const ModelCheckpoint rotated = round_to_storage(apply_rotation(base, rotation_set(c)));
  out.rotated = encode_container(checkpoint_to_container(rotated));
  FinetuneConfig f = c.finetune;
  f.scheme = FinetuneScheme::kRoloraLar;
  f.rotation = rotation_set_from_record(rotated.config, rotated.rotation);
  f.steps = 20;
  f.learn_rate = 1e-3;
  f.log_every = 5;
  TrainingState s = attach_adapters(rotated, f);
  const TrainingLog tl = finetune(s, split.held_in);
  const ModelCheckpoint merged = round_to_storage(merge_adapters(s));
  out.merged = encode_container(checkpoint_to_container(merged));
  out.adapters = encode_container(adapters_to_container(s));
  std::ostringstream a, b, q;
  write_training_log_csv(a, tl);
  write_kurtosis_csv(b, tl);
  out.log_csv = a.str();
  out.kurtosis_csv = b.str();
  const EvalData data = make_eval_data(split, 16, 8, 8, c.seed);
  QuantSpec spec = c.quant;
  spec.weight_quantizer = WeightQuantizer::kGptq;
  out.quantized = encode_container(quantized_model_to_container(quantize_model_weights(merged, spec, data.calibration)));
  write_qerror_csv(q, layer_quant_error(merged, data.held_out, spec, data.calibration));
  out.qerror_csv = q.str();
  return out;
}

FormatErrorKind corrupted_kind(std::span<const std::byte> bytes, bool* threw) {
  try {
    checkpoint_from_container(decode_container(bytes));
  } catch (const FormatError& e) {
    *threw = true;
    return e.kind();
  }
  *threw = false;
  return FormatErrorKind::kBadMagic;
}

std::vector<std::byte> with_header(const std::vector<std::byte>& bytes, const std::string& header) {
  const auto old = detail::read_le<std::uint64_t>(bytes.data() + 4);
  std::vector<std::byte> out(bytes.begin(), bytes.begin() + 4);
  detail::append_le<std::uint64_t>(out, header.size());
  for (char ch : header) out.push_back(static_cast<std::byte>(ch));
  out.insert(out.end(), bytes.begin() + 12 + static_cast<std::ptrdiff_t>(old), bytes.end());
  return out;
}

Outcome determinism_and_format() {
  Outcome o;
  o.require(run_small_pipeline() == run_small_pipeline(), "repeated pipeline runs differ");

  const ModelCheckpoint m = lively_model(micro_config());
  const std::vector<std::byte> bytes = encode_container(checkpoint_to_container(m));
  const ModelCheckpoint back = checkpoint_from_container(decode_container(bytes));
  bool bitwise = back == round_to_storage(m) && encode_container(checkpoint_to_container(back)) == bytes;
  const ModelCheckpoint stored = round_to_storage(m);
  bitwise = bitwise && checkpoint_from_container(decode_container(encode_container(checkpoint_to_container(stored)))) == stored;
  o.require(bitwise, "RTA1 round trip is not bitwise exact");

  const std::string header(reinterpret_cast<const char*>(bytes.data() + 12), detail::read_le<std::uint64_t>(bytes.data() + 4));
  std::vector<std::pair<std::string, std::pair<std::vector<std::byte>, FormatErrorKind>>> cases;
  auto magic = bytes;
  magic[1] = std::byte{'Z'};
  cases.push_back({"bad magic", {magic, FormatErrorKind::kBadMagic}});
  auto cut = bytes;
  cut.resize(cut.size() - 3);
  cases.push_back({"truncated payload", {cut, FormatErrorKind::kTruncated}});
  cases.push_back({"short prefix", {std::vector<std::byte>(bytes.begin(), bytes.begin() + 9), FormatErrorKind::kTruncated}});
  std::string broken = header;
  broken.back() = ',';
  cases.push_back({"malformed header", {with_header(bytes, broken), FormatErrorKind::kMalformedHeader}});
  json shaped = json::parse(header);
  shaped["embedding"]["shape"] = {3, 3};
  cases.push_back({"shape mismatch", {with_header(bytes, shaped.dump()), FormatErrorKind::kShapeMismatch}});
  std::size_t rejected = 0;
  for (const auto& [name, c] : cases) {
    bool threw = false;
    const FormatErrorKind k = corrupted_kind(c.first, &threw);
    const bool ok = threw && k == c.second;
    rejected += ok;
    o.require(ok, name + " not rejected with the declared kind");
  }
  if (o.pass) o.detail = fmt("pipeline bytes identical, round trip exact, %zu/%zu corruptions rejected", rejected, cases.size());
  return o;
}

struct Criterion {
  int id;
  const char* name;
  double limit_seconds;  // 0: no runtime bound
  std::function<Outcome()> run;
};

}  // namespace
}  // namespace rotaquant

int main() {
  using namespace rotaquant;
  const Criterion criteria[] = {
      {1, "Hadamard correctness", 10, hadamard_correctness},
      {2, "computational invariance", 30, computational_invariance},
      {3, "gradient fidelity", 60, gradient_fidelity},
      {4, "quantizer contracts", 60, quantizer_contracts},
      {5, "rotation benefit", 0, rotation_benefit},
      {6, "kurtosis methodology", 600, kurtosis_methodology},
      {7, "end-to-end direction", 1800, end_to_end_direction},
      {8, "low-rank approximation methodology", 0, fig4_methodology},
      {9, "determinism and format", 0, determinism_and_format},
  };
  int failed = 0;
  std::vector<std::string> summary;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_seconds > 0 && secs >= c.limit_seconds) {
      o.pass = false;
      o.detail += fmt(" (runtime %.1f s exceeds %.0f s)", secs, c.limit_seconds);
    }
    failed += !o.pass;
    summary.push_back(fmt("[%s] criterion %d: %s: ", o.pass ? "PASS" : "FAIL", c.id, c.name) + o.detail +
                      fmt(" [%.1f s]", secs));
    std::printf("%s\n", summary.back().c_str());
    std::fflush(stdout);
  }
  std::printf("\nsummary\n");
  for (const auto& s : summary) std::printf("%s\n", s.c_str());
  std::printf("%d of %zu criteria passed\n", static_cast<int>(std::size(criteria)) - failed, std::size(criteria));
  return failed == 0 ? 0 : 1;
}
