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
// rotaquant: batch driver for rotation, fine-tuning, quantization and analysis.

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rotaquant/config.hpp"

namespace fs = std::filesystem;
using namespace rotaquant;

namespace {

constexpr const char* kToolVersion = "0.1.0";

enum ExitCode { kOk = 0, kInternal = 1, kConfig = 2, kNumerical = 3, kIo = 4 };

class InvarianceFailure : public Error {
 public:
  using Error::Error;
};

/// Command-line overrides. Unset members leave the config file value alone.
struct Flags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::string input;
  std::string output;
  std::string against;

  std::optional<std::size_t> d_model, n_layers, n_heads, d_ffn, vocab, seq_len;
  std::optional<std::string> corpus;
  std::optional<std::size_t> corpus_length;
  std::optional<std::uint64_t> corpus_variant;
  std::optional<std::size_t> pretrain_steps;
  std::optional<double> pretrain_lr;
  std::optional<std::vector<std::size_t>> outlier_channels;
  std::optional<double> outlier_factor;

  std::optional<bool> r1, r2, r3;
  std::optional<std::uint64_t> rotation_seed;
  std::optional<std::size_t> trials;
  std::optional<double> tol;

  std::optional<std::string> scheme;
  std::optional<std::vector<std::string>> targets;
  std::optional<std::size_t> rank, steps, epochs, batch, log_every;
  std::optional<double> lr, scaling;
  std::optional<int> train_weight_bits, train_act_bits;

  std::optional<int> wbits, abits;
  std::optional<std::string> quantizer;
  std::optional<double> clip_ratio;
  std::optional<std::size_t> calib_windows, eval_windows;

  std::optional<std::vector<std::size_t>> ranks;
  std::optional<std::size_t> fig4_steps;
  std::optional<double> fig4_lr;
};

template <class T>
void set_if(json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

json flags_patch(const Flags& f) {
  json p = json::object();
  set_if(p, "seed", f.seed);
  set_if(p, "output_dir", f.out_dir);
  json model = json::object();
  set_if(model, "d_model", f.d_model);
  set_if(model, "n_layers", f.n_layers);
  set_if(model, "n_heads", f.n_heads);
  set_if(model, "d_ffn", f.d_ffn);
  set_if(model, "vocab", f.vocab);
  set_if(model, "seq_len", f.seq_len);
  json corpus = json::object();
  set_if(corpus, "path", f.corpus);
  set_if(corpus, "length", f.corpus_length);
  set_if(corpus, "variant", f.corpus_variant);
  json pretrain = json::object();
  set_if(pretrain, "steps", f.pretrain_steps);
  set_if(pretrain, "learn_rate", f.pretrain_lr);
  set_if(pretrain, "outlier_channels", f.outlier_channels);
  set_if(pretrain, "outlier_factor", f.outlier_factor);
  json rotation = json::object();
  set_if(rotation, "r1", f.r1);
  set_if(rotation, "r2", f.r2);
  set_if(rotation, "r3", f.r3);
  set_if(rotation, "seed", f.rotation_seed);
  json finetune = json::object();
  set_if(finetune, "scheme", f.scheme);
  set_if(finetune, "targets", f.targets);
  set_if(finetune, "rank", f.rank);
  set_if(finetune, "steps", f.steps);
  set_if(finetune, "epochs", f.epochs);
  set_if(finetune, "batch", f.batch);
  set_if(finetune, "log_every", f.log_every);
  set_if(finetune, "learn_rate", f.lr);
  set_if(finetune, "scaling", f.scaling);
  set_if(finetune, "train_weight_bits", f.train_weight_bits);
  set_if(finetune, "train_act_bits", f.train_act_bits);
  json quant = json::object();
  set_if(quant, "weight_bits", f.wbits);
  set_if(quant, "act_bits", f.abits);
  set_if(quant, "weight_quantizer", f.quantizer);
  set_if(quant, "clip_ratio", f.clip_ratio);
  json eval = json::object();
  set_if(eval, "calibration_windows", f.calib_windows);
  set_if(eval, "eval_windows", f.eval_windows);
  set_if(eval, "invariance_trials", f.trials);
  set_if(eval, "invariance_tolerance", f.tol);
  json analysis = json::object();
  set_if(analysis, "ranks", f.ranks);
  set_if(analysis, "fig4_steps", f.fig4_steps);
  set_if(analysis, "fig4_learn_rate", f.fig4_lr);
  for (auto& [key, section] : {std::pair<const char*, json&>{"model", model}, {"corpus", corpus}, {"pretrain", pretrain},
                               {"rotation", rotation}, {"finetune", finetune}, {"quant", quant}, {"eval", eval},
                               {"analysis", analysis}})
    if (!section.empty()) p[key] = section;
  return p;
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("ROTAQUANT_SEED");
  if (s == nullptr || *s == '\0') return std::nullopt;
  std::uint64_t v = 0;
  const char* end = s + std::char_traits<char>::length(s);
  const auto [ptr, ec] = std::from_chars(s, end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError("ROTAQUANT_SEED must be a non-negative integer");
  return v;
}

json read_json_file(const fs::path& path) {
  const std::vector<std::byte> bytes = read_file_bytes(path);
  const std::string text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  os.close();
  if (!os) throw IoError("failed writing " + path.string());
}

template <class F>
std::string render(F&& f) {
  std::ostringstream os;
  f(os);
  return os.str();
}

/// Resolved configuration plus the bookkeeping each command reports in its manifest.
class Run {
 public:
  Run(std::string command, const Flags& flags) : command_(std::move(command)), flags_(flags) {
    std::vector<json> layers;
    if (!flags.config_path.empty()) {
      layers.push_back(read_json_file(flags.config_path));
      inputs_.push_back(flags.config_path);
    }
    layers.push_back(flags_patch(flags));
    resolved_ = resolve_config(layers, env_seed());
    cfg_ = experiment_config_from_json(resolved_);
    out_dir_ = cfg_.output_dir;
    std::error_code ec;
    fs::create_directories(out_dir_, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir_.string() + ": " + ec.message());
  }

  const ExperimentConfig& cfg() const { return cfg_; }

  /// Dimensions come from the input checkpoint; the rest of the config is rechecked against them.
  void adopt_model(const ModelConfig& c) {
    cfg_.model = c;
    validate(cfg_);
  }

  ModelCheckpoint load_input() {
    if (flags_.input.empty()) throw ConfigError(command_ + " needs --in <checkpoint>");
    inputs_.push_back(flags_.input);
    ModelCheckpoint m = load_checkpoint(flags_.input);
    adopt_model(m.config);
    return m;
  }

  fs::path output(const std::string& default_name) {
    fs::path p = flags_.output.empty() ? out_dir_ / default_name : fs::path(flags_.output);
    outputs_.push_back(p.string());
    return p;
  }

  fs::path artifact(const std::string& name) {
    const fs::path p = out_dir_ / name;
    outputs_.push_back(p.string());
    return p;
  }

  void note_input(const std::string& path) { inputs_.push_back(path); }

  CorpusSplit split() const { return split_corpus(load_corpus(cfg_), cfg_.corpus.held_out_fraction); }

  EvalData eval_data(const CorpusSplit& s) const {
    return make_eval_data(s, cfg_.model.seq_len, cfg_.eval.calibration_windows, cfg_.eval.eval_windows, cfg_.seed);
  }

  void write_manifest() const {
    json m = {{"tool", "rotaquant"},
              {"version", kToolVersion},
              {"command", command_},
              {"config_hash", config_hash(resolved_)},
              {"seed", cfg_.seed},
              {"config", resolved_},
              {"inputs", inputs_},
              {"outputs", outputs_}};
    write_text(out_dir_ / "manifest.json", m.dump(2) + "\n");
  }

 private:
  std::string command_;
  const Flags& flags_;
  json resolved_;
  ExperimentConfig cfg_;
  fs::path out_dir_;
  std::vector<std::string> inputs_;
  std::vector<std::string> outputs_;
};

void log(const std::string& msg) { std::cerr << "rotaquant: " << msg << '\n'; }

// ---- commands ----

void cmd_init(Run& run) {
  const ExperimentConfig& c = run.cfg();
  ModelCheckpoint m;
  if (c.pretrain.steps > 0) {
    const CorpusSplit s = run.split();
    log("pretraining for " + std::to_string(c.pretrain.steps) + " steps");
    m = prepare_base_model(base_model_spec(c), s.held_in);
  } else {
    m = prepare_base_model(base_model_spec(c), {});
  }
  const fs::path out = run.output("model.rta");
  save_checkpoint(m, out);
  std::cout << "wrote " << out.string() << '\n';
}

/// `max_deviation` is measured on the f32-stored weights, `exact_max_deviation` before rounding.
json invariance_json(const InvarianceReport& r, double exact_deviation) {
  return {{"trials", r.trials},
          {"tolerance", r.tolerance},
          {"max_deviation", r.max_deviation},
          {"exact_max_deviation", exact_deviation},
          {"passed", r.passed}};
}

void cmd_rotate(Run& run) {
  const ModelCheckpoint m = run.load_input();
  if (m.rotation.any()) throw StateError("checkpoint is already rotated");
  const ExperimentConfig& c = run.cfg();
  const RotationSet set = rotation_set(c);
  if (set.empty()) throw ConfigError("rotate needs at least one of --r1, --r2, --r3");
  const ModelCheckpoint r = apply_rotation(m, set);
  const double exact = verify_invariance(m, r, c.eval.invariance_trials, c.eval.invariance_tolerance, c.seed).max_deviation;
  const InvarianceReport rep =
      verify_invariance(m, round_to_storage(r), c.eval.invariance_trials, c.eval.invariance_tolerance, c.seed);
  write_text(run.artifact("invariance.json"), invariance_json(rep, exact).dump(2) + "\n");
  if (!rep.passed)
    throw InvarianceFailure("invariance check failed: max deviation " + format_real(rep.max_deviation) + " > " +
                            format_real(rep.tolerance) + "; checkpoint not written");
  const fs::path out = run.output("rotated.rta");
  save_checkpoint(r, out);
  std::cout << "invariance max deviation " << format_real(rep.max_deviation) << " (before f32 storage "
            << format_real(exact) << "), wrote " << out.string() << '\n';
}

void cmd_invariance_check(Run& run, const std::string& against) {
  const ModelCheckpoint m = run.load_input();
  const ExperimentConfig& c = run.cfg();
  ModelCheckpoint r;
  if (!against.empty()) {
    run.note_input(against);
    r = load_checkpoint(against);
  } else {
    r = apply_rotation(m, rotation_set(c));
  }
  const InvarianceReport rep = verify_invariance(m, r, c.eval.invariance_trials, c.eval.invariance_tolerance, c.seed);
  write_text(run.artifact("invariance.json"), invariance_json(rep, rep.max_deviation).dump(2) + "\n");
  std::cout << "max deviation " << format_real(rep.max_deviation) << " tol " << format_real(rep.tolerance) << ": "
            << (rep.passed ? "pass" : "FAIL") << '\n';
  if (!rep.passed) throw InvarianceFailure("invariance check failed: max deviation " + format_real(rep.max_deviation));
}

void cmd_train(Run& run) {
  const ModelCheckpoint m = run.load_input();
  const ExperimentConfig& c = run.cfg();
  FinetuneConfig f = c.finetune;
  if (f.scheme == FinetuneScheme::kRoloraLar)
    f.rotation = m.rotation.any() ? rotation_set_from_record(m.config, m.rotation) : rotation_set(c);
  else if (f.scheme == FinetuneScheme::kRoloraLbr)
    f.rotation = rotation_set(c);
  else
    f.rotation.reset();
  TrainingState s = attach_adapters(m, f);
  const CorpusSplit split = run.split();
  log("fine-tuning (" + to_string(f.scheme) + ") for " +
      std::to_string(total_steps(f, split.held_in.size(), m.config.seq_len)) + " steps");
  const TrainingLog tl = finetune(s, split.held_in);
  const ModelCheckpoint merged = merge_adapters(s);
  const fs::path out = run.output("merged.rta");
  save_checkpoint(merged, out);
  if (f.scheme != FinetuneScheme::kFull) write_container(run.artifact("adapters.rta"), adapters_to_container(s));
  write_text(run.artifact("train_log.csv"), render([&](std::ostream& os) { write_training_log_csv(os, tl); }));
  write_text(run.artifact("kurtosis.csv"), render([&](std::ostream& os) { write_kurtosis_csv(os, tl); }));
  std::cout << "final loss " << format_real(tl.entries.empty() ? 0.0 : tl.entries.back().loss) << ", final kurtosis "
            << format_real(tl.final_mean_kurtosis) << ", wrote " << out.string() << '\n';
}

/// Exact and quantized held-out loss for a model checkpoint, plus per-layer error.
EvalReport evaluate_model(Run& run, const ModelCheckpoint& m, const EvalData& data, const QuantizedModel& q) {
  const ExperimentConfig& c = run.cfg();
  EvalReport r;
  r.spec = c.quant;
  r.exact_loss = mean_loss(m, data.held_out);
  r.quant_loss = quantized_loss(q, data.held_out);
  r.degradation = r.quant_loss - *r.exact_loss;
  r.calibration_windows = data.calibration.size();
  r.eval_windows = data.held_out.size();
  const auto layers = layer_quant_error(m, data.held_out, c.quant, data.calibration);
  write_text(run.artifact("qerror.csv"), render([&](std::ostream& os) { write_qerror_csv(os, layers); }));
  return r;
}

void emit_report(Run& run, const EvalReport& r) {
  const std::string text = eval_report_to_json(r).dump(2) + "\n";
  write_text(run.artifact("report.json"), text);
  std::cout << text;
}

std::vector<Tokens> calibration_for(const ExperimentConfig& c, const EvalData& data) {
  return c.quant.weight_quantizer == WeightQuantizer::kGptq ? data.calibration : std::vector<Tokens>{};
}

void cmd_quantize(Run& run) {
  const ModelCheckpoint m = run.load_input();
  const ExperimentConfig& c = run.cfg();
  const EvalData data = run.eval_data(run.split());
  const QuantizedModel q = quantize_model_weights(m, c.quant, calibration_for(c, data));
  const fs::path out = run.output("quantized.rta");
  write_container(out, quantized_model_to_container(q));
  emit_report(run, evaluate_model(run, m, data, q));
}

void cmd_eval(Run& run, const std::string& input) {
  if (input.empty()) throw ConfigError("eval needs --in <checkpoint>");
  const Container box = read_container(input);
  if (box.meta.value("kind", "") == "quantized_model") {
    run.note_input(input);
    const QuantizedModel q = quantized_model_from_container(box);
    run.adopt_model(q.model.config);
    const EvalData data = run.eval_data(run.split());
    EvalReport r;
    r.spec = q.spec;
    r.quant_loss = quantized_loss(q, data.held_out);
    r.eval_windows = data.held_out.size();
    emit_report(run, r);
    return;
  }
  const ModelCheckpoint m = run.load_input();
  const ExperimentConfig& c = run.cfg();
  const EvalData data = run.eval_data(run.split());
  emit_report(run, evaluate_model(run, m, data, quantize_model_weights(m, c.quant, calibration_for(c, data))));
}

void cmd_analyze_kurtosis(Run& run) {
  const ModelCheckpoint m = run.load_input();
  const EvalData data = run.eval_data(run.split());
  const auto points = projection_capture_points(m.config);
  const auto stats = capture_stats(m, data.held_out, points);
  write_text(run.artifact("kurtosis.csv"), render([&](std::ostream& os) {
               os << "point,kurtosis,tokens\n";
               for (const auto& s : stats) os << s.point << ',' << format_real(s.kurtosis) << ',' << s.token_count << '\n';
             }));
  write_text(run.artifact("channel_max.csv"), render([&](std::ostream& os) {
               os << "point,channel,max_abs\n";
               for (const auto& s : stats)
                 for (std::size_t ch = 0; ch < s.channel_max_abs.size(); ++ch)
                   os << s.point << ',' << ch << ',' << format_real(s.channel_max_abs[ch]) << '\n';
             }));
  ForwardOptions o;
  o.capture = {points.front()};
  Matrix surface = forward(m, data.held_out.front(), o).captured.at(points.front());
  for (double& v : surface.values()) v = std::abs(v);
  write_text(run.artifact("surface.csv"), render([&](std::ostream& os) { write_csv_matrix(os, surface); }));
  std::cout << "mean projection-input kurtosis " << format_real(mean_projection_kurtosis(m, data.held_out)) << '\n';
}

void cmd_analyze_fig4(Run& run) {
  const ModelCheckpoint m = run.load_input();
  const ExperimentConfig& c = run.cfg();
  FinetuneConfig full = c.finetune;
  full.steps = c.analysis.fig4_steps;
  full.learn_rate = c.analysis.fig4_learn_rate;
  if (full.steps == 0) full.epochs = 0;
  const CorpusSplit split = run.split();
  const auto rows = run_fig4(m, split.held_in, full, c.analysis.fig4_targets, c.rotation.seed, c.analysis.ranks);
  write_text(run.artifact("fig4.csv"), render([&](std::ostream& os) { write_fig4_csv(os, rows); }));
  std::cout << "wrote " << rows.size() << " rows\n";
}

void cmd_analyze_qerror(Run& run) {
  const ModelCheckpoint m = run.load_input();
  const ExperimentConfig& c = run.cfg();
  const EvalData data = run.eval_data(run.split());
  const auto layers = layer_quant_error(m, data.held_out, c.quant, calibration_for(c, data));
  write_text(run.artifact("qerror.csv"), render([&](std::ostream& os) { write_qerror_csv(os, layers); }));
  std::cout << "wrote " << layers.size() << " rows\n";
}

void cmd_analyze_ablate(Run& run) {
  const ModelCheckpoint m = run.load_input();
  if (m.rotation.any()) throw StateError("ablation needs an unrotated base checkpoint");
  const ExperimentConfig& c = run.cfg();
  AblationSetup a;
  a.base = m;
  a.lora = c.finetune;
  a.rotation_seed = c.rotation.seed;
  a.spec = c.quant;
  a.split = run.split();
  a.data = run.eval_data(a.split);
  const std::pair<const char*, std::vector<AblationRow> (*)(const AblationSetup&)> axes[] = {
      {"when", ablate_when}, {"where", ablate_where}, {"how", ablate_how}};
  for (const auto& [name, fn] : axes) {
    log("ablation axis " + std::string(name));
    const auto rows = fn(a);
    write_text(run.artifact(std::string("ablate_") + name + ".csv"),
               render([&](std::ostream& os) { write_ablation_csv(os, rows); }));
  }
  log("ablation axis rank");
  const auto rows = ablate_rank(a, c.analysis.ranks);
  write_text(run.artifact("ablate_rank.csv"), render([&](std::ostream& os) { write_ablation_csv(os, rows); }));
}

// ---- flag registration ----

void add_io(CLI::App* s, Flags& f, bool needs_input) {
  auto* in = s->add_option("--in", f.input, "Input checkpoint");
  if (needs_input) in->required();
}

void add_model_flags(CLI::App* s, Flags& f) {
  s->add_option("--d-model", f.d_model, "model.d_model");
  s->add_option("--n-layers", f.n_layers, "model.n_layers");
  s->add_option("--n-heads", f.n_heads, "model.n_heads");
  s->add_option("--d-ffn", f.d_ffn, "model.d_ffn");
  s->add_option("--vocab", f.vocab, "model.vocab");
  s->add_option("--seq-len", f.seq_len, "model.seq_len");
  s->add_option("--pretrain-steps", f.pretrain_steps, "pretrain.steps");
  s->add_option("--pretrain-lr", f.pretrain_lr, "pretrain.learn_rate");
  s->add_option("--outlier-channels", f.outlier_channels, "pretrain.outlier_channels");
  s->add_option("--outlier-factor", f.outlier_factor, "pretrain.outlier_factor");
}

void add_corpus_flags(CLI::App* s, Flags& f) {
  s->add_option("--corpus", f.corpus, "corpus.path (byte-level text file)");
  s->add_option("--corpus-length", f.corpus_length, "corpus.length");
  s->add_option("--corpus-variant", f.corpus_variant, "corpus.variant");
}

void add_rotation_flags(CLI::App* s, Flags& f) {
  s->add_flag("--r1,!--no-r1", f.r1, "rotation.r1");
  s->add_flag("--r2,!--no-r2", f.r2, "rotation.r2");
  s->add_flag("--r3,!--no-r3", f.r3, "rotation.r3");
  s->add_option("--rotation-seed", f.rotation_seed, "rotation.seed");
}

void add_invariance_flags(CLI::App* s, Flags& f) {
  s->add_option("--trials", f.trials, "eval.invariance_trials");
  s->add_option("--tol", f.tol, "eval.invariance_tolerance");
}

void add_finetune_flags(CLI::App* s, Flags& f) {
  s->add_option("--scheme", f.scheme, "finetune.scheme: plain-lora, rolora-lar, rolora-lbr, full");
  s->add_option("--targets", f.targets, "finetune.targets");
  s->add_option("--rank", f.rank, "finetune.rank");
  s->add_option("--steps", f.steps, "finetune.steps");
  s->add_option("--epochs", f.epochs, "finetune.epochs");
  s->add_option("--batch", f.batch, "finetune.batch");
  s->add_option("--log-every", f.log_every, "finetune.log_every");
  s->add_option("--lr", f.lr, "finetune.learn_rate");
  s->add_option("--scaling", f.scaling, "finetune.scaling");
  s->add_option("--train-weight-bits", f.train_weight_bits, "finetune.train_weight_bits");
  s->add_option("--train-act-bits", f.train_act_bits, "finetune.train_act_bits");
}

void add_quant_flags(CLI::App* s, Flags& f) {
  s->add_option("--wbits", f.wbits, "quant.weight_bits");
  s->add_option("--abits", f.abits, "quant.act_bits");
  s->add_option("--quantizer", f.quantizer, "quant.weight_quantizer: rtn or gptq");
  s->add_option("--clip-ratio", f.clip_ratio, "quant.clip_ratio");
}

void add_window_flags(CLI::App* s, Flags& f) {
  s->add_option("--calib-windows", f.calib_windows, "eval.calibration_windows");
  s->add_option("--eval-windows", f.eval_windows, "eval.eval_windows");
}

void add_analysis_flags(CLI::App* s, Flags& f) {
  s->add_option("--ranks", f.ranks, "analysis.ranks");
  s->add_option("--fig4-steps", f.fig4_steps, "analysis.fig4_steps");
  s->add_option("--fig4-lr", f.fig4_lr, "analysis.fig4_learn_rate");
}

int run_main(int argc, char** argv) {
  Flags f;
  CLI::App app{"rotaquant: rotation-based outlier removal for weight-activation quantization"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("-c,--config", f.config_path, "JSON experiment config");
  app.add_option("--seed", f.seed, "Global seed");
  app.add_option("--out-dir", f.out_dir, "Output directory");
  app.add_option("-o,--out", f.output, "Path of the main output file");

  auto* init = app.add_subcommand("init", "Write a seeded (optionally pretrained) base model");
  add_model_flags(init, f);
  add_corpus_flags(init, f);

  auto* rotate = app.add_subcommand("rotate", "Fuse norms and apply R1/R2/R3, checked for invariance");
  add_io(rotate, f, true);
  add_rotation_flags(rotate, f);
  add_invariance_flags(rotate, f);

  auto* train = app.add_subcommand("train", "Fine-tune and merge adapters");
  add_io(train, f, true);
  add_finetune_flags(train, f);
  add_rotation_flags(train, f);
  add_corpus_flags(train, f);

  auto* quantize = app.add_subcommand("quantize", "Quantize projections and report held-out loss");
  add_io(quantize, f, true);
  add_quant_flags(quantize, f);
  add_window_flags(quantize, f);
  add_corpus_flags(quantize, f);

  auto* eval = app.add_subcommand("eval", "Report exact and quantized held-out loss");
  add_io(eval, f, true);
  add_quant_flags(eval, f);
  add_window_flags(eval, f);
  add_corpus_flags(eval, f);

  auto* analyze = app.add_subcommand("analyze", "Diagnostic experiments");
  analyze->require_subcommand(1);
  auto* kurt = analyze->add_subcommand("kurtosis", "Activation kurtosis and channel profiles");
  auto* fig4 = analyze->add_subcommand("fig4", "Low-rank approximation error, LAR vs LBR");
  auto* qerror = analyze->add_subcommand("qerror", "Per-layer quantization error");
  auto* ablate = analyze->add_subcommand("ablate", "Paired recipe ablations and rank sweep");
  for (auto* s : {kurt, fig4, qerror, ablate}) {
    add_io(s, f, true);
    add_corpus_flags(s, f);
    add_window_flags(s, f);
  }
  for (auto* s : {qerror, ablate}) add_quant_flags(s, f);
  add_finetune_flags(fig4, f);
  add_analysis_flags(fig4, f);
  add_rotation_flags(fig4, f);
  add_finetune_flags(ablate, f);
  add_analysis_flags(ablate, f);
  add_rotation_flags(ablate, f);

  auto* inv = app.add_subcommand("invariance-check", "Compare logits of two checkpoints, or of one and its rotation");
  add_io(inv, f, true);
  inv->add_option("--against", f.against, "Second checkpoint (default: rotate --in)");
  add_rotation_flags(inv, f);
  add_invariance_flags(inv, f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  std::string command;
  CLI::App* leaf = nullptr;
  for (auto* s : {init, rotate, train, quantize, eval, inv})
    if (s->parsed()) command = s->get_name(), leaf = s;
  for (auto* s : {kurt, fig4, qerror, ablate})
    if (s->parsed()) command = "analyze " + s->get_name(), leaf = s;
  if (leaf == nullptr) return kConfig;

  Run run(command, f);
  if (leaf == init) cmd_init(run);
  else if (leaf == rotate) cmd_rotate(run);
  else if (leaf == train) cmd_train(run);
  else if (leaf == quantize) cmd_quantize(run);
  else if (leaf == eval) cmd_eval(run, f.input);
  else if (leaf == inv) cmd_invariance_check(run, f.against);
  else if (leaf == kurt) cmd_analyze_kurtosis(run);
  else if (leaf == fig4) cmd_analyze_fig4(run);
  else if (leaf == qerror) cmd_analyze_qerror(run);
  else if (leaf == ablate) cmd_analyze_ablate(run);
  run.write_manifest();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_main(argc, argv);
  } catch (const InvarianceFailure& e) {
    std::cerr << "rotaquant: " << e.what() << '\n';
    return kNumerical;
  } catch (const NumericalError& e) {
    std::cerr << "rotaquant: numerical error: " << e.what() << '\n';
    return kNumerical;
  } catch (const IoError& e) {
    std::cerr << "rotaquant: I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "rotaquant: bad container: " << e.what() << '\n';
    return kIo;
  } catch (const Error& e) {
    std::cerr << "rotaquant: config error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "rotaquant: internal error: " << e.what() << '\n';
    return kInternal;
  }
}
