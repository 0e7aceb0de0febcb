// Copyright 2026 The GeoLAN Workbench Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training loop: byte-level corpus batches, AdamW, the regularized objective
// with annealed weights, run logging and multi-seed suites.

#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "geolan/autodiff.hpp"
#include "geolan/error.hpp"
#include "geolan/geoloss.hpp"
#include "geolan/io.hpp"
#include "geolan/metrics.hpp"
#include "geolan/model.hpp"
#include "geolan/rng.hpp"
#include "geolan/tensor.hpp"

namespace geolan {

enum class Mode { kBaseline, kControl, kGeolan };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::kBaseline: return "baseline";
    case Mode::kControl: return "control";
    case Mode::kGeolan: return "geolan";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  if (s == "baseline") return Mode::kBaseline;
  if (s == "control") return Mode::kControl;
  if (s == "geolan") return Mode::kGeolan;
  throw InputError("field mode must be one of baseline, control, geolan (got \"" + s + "\")");
}

inline constexpr double kControlWeightDecay = 0.10;

struct RunConfig {
  ModelConfig model;
  RegularizerConfig regularizer;
  Mode mode = Mode::kGeolan;
  double lr = 3e-4;
  double weight_decay = 0.0;
  std::array<double, 2> betas{0.9, 0.999};
  double adam_eps = 1e-8;
  std::size_t steps = 1000;
  std::size_t batch_size = 8;
  std::size_t seq_len = 32;
  std::vector<std::uint64_t> seeds{42, 128, 1008, 3407};
  std::string corpus_path;
  std::string out_dir;
  std::uint64_t eval_seed = 0;  // fixed evaluation batch shared by every run
  std::size_t eval_batch_size = 8;

  /// Checks value ranges and the per-mode rules.
  void validate() const {
    model.validate();
    regularizer.validate();
    if (!(lr > 0.0) || !std::isfinite(lr)) throw InputError("field lr must be a positive number");
    if (!(weight_decay >= 0.0)) throw InputError("field weight_decay must be >= 0");
    for (double b : betas)
      if (!(b >= 0.0 && b < 1.0)) throw InputError("field betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw InputError("field adam_eps must be > 0");
    if (batch_size < 1) throw InputError("field batch_size must be >= 1");
    if (eval_batch_size < 1) throw InputError("field eval_batch_size must be >= 1");
    if (seq_len < 2) throw InputError("field seq_len must be >= 2");
    if (seq_len > model.max_seq) throw InputError("field seq_len exceeds model.max_seq");
    if (model.vocab_size < 256) throw InputError("field model.vocab_size must be >= 256 for byte tokens");
    if (corpus_path.empty()) throw InputError("field corpus_path is required");
    const bool zero_lambda = regularizer.lambda1_target == 0.0 && regularizer.lambda2_target == 0.0;
    switch (mode) {
      case Mode::kBaseline:
        if (!zero_lambda) throw InputError("mode baseline requires regularizer lambda targets of 0");
        if (weight_decay != 0.0) throw InputError("mode baseline requires weight_decay 0");
        break;
      case Mode::kControl:
        if (!zero_lambda) throw InputError("mode control requires regularizer lambda targets of 0");
        if (weight_decay != kControlWeightDecay) throw InputError("mode control requires weight_decay 0.10");
        break;
      case Mode::kGeolan:
        if (weight_decay != 0.0) throw InputError("mode geolan requires weight_decay 0");
        break;
    }
  }
};

/// Per-mode defaults for fields the config leaves out.
inline void apply_mode_defaults(RunConfig& c, bool has_wd, bool has_l1, bool has_l2) {
  const RegularizerConfig defaults;
  if (!has_wd) c.weight_decay = c.mode == Mode::kControl ? kControlWeightDecay : 0.0;
  if (!has_l1) c.regularizer.lambda1_target = c.mode == Mode::kGeolan ? defaults.lambda1_target : 0.0;
  if (!has_l2) c.regularizer.lambda2_target = c.mode == Mode::kGeolan ? defaults.lambda2_target : 0.0;
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"model", to_json(c.model)},
          {"regularizer", to_json(c.regularizer)},
          {"mode", mode_name(c.mode)},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"betas", c.betas},
          {"adam_eps", c.adam_eps},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"seq_len", c.seq_len},
          {"seeds", c.seeds},
          {"corpus_path", c.corpus_path},
          {"out_dir", c.out_dir},
          {"eval_seed", c.eval_seed},
          {"eval_batch_size", c.eval_batch_size}};
}

/// Relative corpus paths resolve against `base_dir` (the config file's folder).
inline RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  detail::check_keys(j, "", {"model", "regularizer", "mode", "lr", "weight_decay", "betas", "adam_eps", "steps",
                             "batch_size", "seq_len", "seeds", "corpus_path", "out_dir", "eval_seed",
                             "eval_batch_size"});
  RunConfig c;
  if (!j.contains("mode")) throw InputError("field mode is required");
  std::string mode;
  detail::read_field(j, "", "mode", mode);
  c.mode = parse_mode(mode);
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  bool has_l1 = false, has_l2 = false;
  if (j.contains("regularizer")) {
    c.regularizer = regularizer_config_from_json(j.at("regularizer"));
    has_l1 = j.at("regularizer").contains("lambda1_target");
    has_l2 = j.at("regularizer").contains("lambda2_target");
  }
  detail::read_field(j, "", "lr", c.lr);
  detail::read_field(j, "", "weight_decay", c.weight_decay);
  detail::read_field(j, "", "betas", c.betas);
  detail::read_field(j, "", "adam_eps", c.adam_eps);
  detail::read_field(j, "", "steps", c.steps);
  detail::read_field(j, "", "batch_size", c.batch_size);
  detail::read_field(j, "", "seq_len", c.seq_len);
  detail::read_field(j, "", "seeds", c.seeds);
  detail::read_field(j, "", "corpus_path", c.corpus_path);
  detail::read_field(j, "", "out_dir", c.out_dir);
  detail::read_field(j, "", "eval_seed", c.eval_seed);
  detail::read_field(j, "", "eval_batch_size", c.eval_batch_size);
  apply_mode_defaults(c, j.contains("weight_decay"), has_l1, has_l2);
  if (!c.corpus_path.empty() && !base_dir.empty() && std::filesystem::path(c.corpus_path).is_relative())
    c.corpus_path = (base_dir / c.corpus_path).lexically_normal().string();
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw InputError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Corpus and batches

using Corpus = std::vector<std::uint8_t>;

inline Corpus load_corpus(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw InputError("field corpus_path: file not found: " + path.string());
  const std::string bytes = detail::read_file(path);
  return Corpus(bytes.begin(), bytes.end());
}

struct Batch {
  TokenBatch inputs;
  std::vector<std::size_t> targets;  // aligned with inputs.ids
  std::vector<std::size_t> starts;
};

/// `batch_size` uniform random windows of seq_len + 1 bytes.
inline Batch batch_iter(std::span<const std::uint8_t> corpus, std::size_t seq_len, std::size_t batch_size, Rng& rng) {
  if (corpus.size() < seq_len + 1)
    throw InputError("corpus has " + std::to_string(corpus.size()) + " bytes; one window needs " +
                     std::to_string(seq_len + 1));
  Batch b;
  b.inputs.n_seq = batch_size;
  b.inputs.seq_len = seq_len;
  b.inputs.ids.reserve(batch_size * seq_len);
  b.targets.reserve(batch_size * seq_len);
  for (std::size_t s = 0; s < batch_size; ++s) {
    const std::size_t start = rng.below(corpus.size() - seq_len);
    b.starts.push_back(start);
    for (std::size_t i = 0; i < seq_len; ++i) {
      b.inputs.ids.push_back(corpus[start + i]);
      b.targets.push_back(corpus[start + i + 1]);
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Optimizer

class AdamW {
 public:
  AdamW(const Params& p, double lr, std::array<double, 2> betas, double eps, double weight_decay)
      : lr_(lr), b1_(betas[0]), b2_(betas[1]), eps_(eps), wd_(weight_decay) {
    for (const auto& t : p.tensors) {
      m_.emplace_back(t.shape());
      v_.emplace_back(t.shape());
      decay_.push_back(t.rank() == 2);
    }
  }

  void step(Params& p, const std::vector<Tensor>& grads) {
    detail::require(grads.size() == p.tensors.size(), "AdamW: gradient count mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < p.tensors.size(); ++k) {
      auto& w = p.tensors[k].values();
      const auto& g = grads[k].values();
      auto& m = m_[k].values();
      auto& v = v_[k].values();
      const double decay = decay_[k] ? lr_ * wd_ : 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
        v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
        w[i] -= decay * w[i];
        w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_, wd_;
  std::vector<Tensor> m_, v_;
  std::vector<bool> decay_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Objective

struct ObjectiveParts {
  Var total;
  double ce = 0.0;
  double cw_sum = 0.0;
  double attn_sum = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  std::optional<std::uint64_t> probe_seed;
};

/// Records the full objective for one batch on `tape`. Regularizer terms are
/// built only when their target weight is positive; probes are drawn from
/// `probe_seed` and shared across layers.
inline ObjectiveParts build_objective(Tape& tape, const Params& p, std::span<const Var> w, const Batch& batch,
                                      const RegularizerConfig& reg, std::size_t step, std::uint64_t probe_seed) {
  Graph g = build_graph(tape, p, w, batch.inputs);
  ObjectiveParts out;
  Var ce = loss_ce(g, batch.targets);
  out.ce = ce.value().item();
  out.lambda1 = anneal(step, reg.lambda1_target, reg.ramp_steps);
  out.lambda2 = anneal(step, reg.lambda2_target, reg.ramp_steps);
  bool finite = std::isfinite(out.ce);
  for (Var a : g.attention)
    for (double v : a.value().values()) finite = finite && std::isfinite(v);
  if (!finite) {
    out.total = tape.constant(Tensor::scalar(std::numeric_limits<double>::quiet_NaN()));
    return out;
  }
  std::vector<Var> cw, attn;
  if (reg.lambda1_target > 0.0) {
    Rng rng(probe_seed);
    out.probe_seed = probe_seed;
    const Tensor probes = sample_probes(p.config.d_model, reg.n_probes, rng);
    for (Var h : g.hidden) {
      cw.push_back(kt_cw_loss(normalize_rows(h), probes));
      out.cw_sum += cw.back().value().item();
    }
  }
  if (reg.lambda2_target > 0.0) {
    const std::size_t r = reg.rank_cap(batch.inputs.seq_len, p.config.d_head);
    for (Var a : g.attention) {
      attn.push_back(kt_attn_loss(a, r, batch.inputs.n_seq));
      out.attn_sum += attn.back().value().item();
    }
  }
  out.total = total_loss(ce, cw, attn, step, reg);
  return out;
}

// ---------------------------------------------------------------------------
// Runs

struct StepRecord {
  std::size_t step = 0;
  double ce = 0.0;
  double cw_sum = 0.0;
  double attn_sum = 0.0;
  double total = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  std::optional<std::uint64_t> probe_seed;
  double wall_time_s = 0.0;

  nlohmann::json to_json() const {
    return {{"step", step},
            {"ce", ce},
            {"cw_sum", cw_sum},
            {"attn_sum", attn_sum},
            {"total", total},
            {"lambda1", lambda1},
            {"lambda2", lambda2},
            {"probe_seed", probe_seed ? nlohmann::json(*probe_seed) : nlohmann::json(nullptr)},
            {"wall_time_s", wall_time_s}};
  }

  /// Equality ignoring wall time.
  bool same_values(const StepRecord& o) const {
    return step == o.step && ce == o.ce && cw_sum == o.cw_sum && attn_sum == o.attn_sum && total == o.total &&
           lambda1 == o.lambda1 && lambda2 == o.lambda2 && probe_seed == o.probe_seed;
  }
};

struct RunLog {
  std::uint64_t seed = 0;
  Mode mode = Mode::kGeolan;
  std::vector<StepRecord> steps;
  std::string checkpoint;  // empty when nothing was written
};

struct MetricRecord {
  std::string run_id;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  std::string metric;
  double value = 0.0;
  nlohmann::json extra;  // null or object
};

struct TrainResult {
  RunLog log;
  Params params;
  Batch eval_batch;
  ForwardTrace eval_trace;
  std::vector<MetricRecord> metrics;
};

/// Stream ids under the run seed.
inline constexpr std::uint64_t kInitStream = 1;
inline constexpr std::uint64_t kBatchStream = 2;
inline constexpr std::uint64_t kProbeStream = 3;

inline std::uint64_t probe_seed_for(std::uint64_t seed, std::size_t step) {
  return Rng(seed).derive(kProbeStream).derive_seed(step);
}

/// Fixed evaluation windows; independent of the run seed so every run is
/// scored on the same text.
inline Batch eval_batch(const Corpus& corpus, const RunConfig& cfg) {
  Rng rng = Rng(cfg.eval_seed).derive(0xE7A1);
  return batch_iter(corpus, cfg.seq_len, cfg.eval_batch_size, rng);
}

inline std::string run_id(const RunConfig& cfg, std::uint64_t seed) {
  return std::string(mode_name(cfg.mode)) + "-seed" + std::to_string(seed);
}

namespace detail {

inline void write_divergence(const std::filesystem::path& dir, const ObjectiveParts& parts, const Batch& batch,
                             std::size_t step, std::uint64_t seed) {
  nlohmann::json j = {{"step", step},     {"seed", seed},           {"ce", parts.ce},
                      {"cw_sum", parts.cw_sum}, {"attn_sum", parts.attn_sum}, {"lambda1", parts.lambda1},
                      {"lambda2", parts.lambda2}, {"batch_starts", batch.starts}, {"batch_ids", batch.inputs.ids}};
  write_file(dir / "diverged.json", j.dump(2) + "\n");
}

}  // namespace detail

/// Final-layer and per-layer metrics of the evaluation pass.
inline std::vector<MetricRecord> eval_metrics(const RunConfig& cfg, std::uint64_t seed, const ForwardTrace& t,
                                              const Batch& batch) {
  std::vector<MetricRecord> out;
  const std::string id = run_id(cfg, seed);
  const std::size_t step = cfg.steps;
  out.push_back({id, seed, step, "eval_ce", cross_entropy_value(t.logits, batch.targets), nullptr});
  const std::size_t d = cfg.model.d_model;
  for (std::size_t l = 0; l < t.hidden.size(); ++l) {
    const SpectrumReport s = covariance_spectrum(t.hidden[l]);
    const nlohmann::json ex = {{"layer", l}};
    if (d >= 10) out.push_back({id, seed, step, "cone_top10", s.top_k(10), ex});
    if (d >= 50) out.push_back({id, seed, step, "cone_top50", s.top_k(50), ex});
    out.push_back({id, seed, step, "isoscore", isoscore_from_eigenvalues(s.eigenvalues), ex});
  }
  const std::size_t r = cfg.regularizer.rank_cap(cfg.seq_len, cfg.model.d_head);
  for (std::size_t l = 0; l < t.attention.size(); ++l) {
    double s = 0.0;
    const auto deficits = entropy_deficits(t.attention[l], r);
    for (double v : deficits) s += v;
    out.push_back({id, seed, step, "attn_entropy_deficit", s / static_cast<double>(deficits.size()),
                   {{"layer", l}}});
  }
  return out;
}

inline nlohmann::json to_json(const MetricRecord& m) {
  nlohmann::json j = {{"run_id", m.run_id}, {"seed", m.seed}, {"step", m.step}, {"metric", m.metric},
                      {"value", m.value}};
  if (!m.extra.is_null()) j["extra"] = m.extra;
  return j;
}

/// Runs cfg.steps AdamW updates for one seed. With a non-empty `out_dir` the
/// run artifacts are written there.
inline TrainResult train(const RunConfig& cfg, std::uint64_t seed, const std::filesystem::path& out_dir = {}) {
  cfg.validate();
  const Corpus corpus = load_corpus(cfg.corpus_path);
  if (corpus.size() < cfg.seq_len + 1)
    throw InputError("field corpus_path: corpus has " + std::to_string(corpus.size()) +
                     " bytes, too small for one window of " + std::to_string(cfg.seq_len + 1));

  const Rng root(seed);
  Rng init_rng = root.derive(kInitStream);
  Rng batch_rng = root.derive(kBatchStream);

  TrainResult res;
  res.params = init_params(cfg.model, init_rng);
  res.log.seed = seed;
  res.log.mode = cfg.mode;
  AdamW opt(res.params, cfg.lr, cfg.betas, cfg.adam_eps, cfg.weight_decay);

  std::ofstream runlog;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    detail::write_file(out_dir / "config.json", to_json(cfg).dump(2) + "\n");
    runlog.open(out_dir / "runlog.jsonl", std::ios::trunc);
    if (!runlog) throw InputError("cannot write " + (out_dir / "runlog.jsonl").string());
  }

  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Batch batch = batch_iter(corpus, cfg.seq_len, cfg.batch_size, batch_rng);
    Tape tape;
    std::vector<Var> w = param_leaves(tape, res.params, true);
    ObjectiveParts parts =
        build_objective(tape, res.params, w, batch, cfg.regularizer, step, probe_seed_for(seed, step));
    const double total = parts.total.value().item();
    auto diverge = [&](const std::string& what) {
      if (!out_dir.empty()) detail::write_divergence(out_dir, parts, batch, step, seed);
      throw DivergenceError(what + " at step " + std::to_string(step) + " (seed " + std::to_string(seed) + ", ce " +
                            std::to_string(parts.ce) + ", cw_sum " + std::to_string(parts.cw_sum) + ", attn_sum " +
                            std::to_string(parts.attn_sum) + ", lambda1 " + std::to_string(parts.lambda1) +
                            ", lambda2 " + std::to_string(parts.lambda2) + ")");
    };
    if (!std::isfinite(total)) diverge("non-finite loss");
    tape.backward(parts.total);
    std::vector<Tensor> grads;
    grads.reserve(w.size());
    for (Var v : w) grads.push_back(tape.grad(v));
    opt.step(res.params, grads);
    for (const auto& t : res.params.tensors)
      for (double v : t.values())
        if (!std::isfinite(v)) diverge("non-finite parameters after update");

    StepRecord rec{step,          parts.ce,      parts.cw_sum, parts.attn_sum, total, parts.lambda1,
                   parts.lambda2, parts.probe_seed, 0.0};
    rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (runlog) runlog << rec.to_json().dump() << '\n';
    res.log.steps.push_back(rec);
  }

  res.eval_batch = eval_batch(corpus, cfg);
  res.eval_trace = forward(res.params, res.eval_batch.inputs);
  res.metrics = eval_metrics(cfg, seed, res.eval_trace, res.eval_batch);

  if (!out_dir.empty()) {
    const auto ckpt = out_dir / "ckpt.glan";
    write_checkpoint(ckpt, res.params);
    res.log.checkpoint = ckpt.string();
    write_dump(out_dir / "dump.glan", dump_from_layers(res.eval_trace.hidden));
    write_dump(out_dir / "attn.glan", dump_from_stacks(res.eval_trace.attention));
    write_dump(out_dir / "queries.glan", dump_from_layers(res.eval_trace.queries));
    const nlohmann::json manifest = {{"checkpoint", "ckpt.glan"},
                                     {"attention", "attn.glan"},
                                     {"queries", "queries.glan"},
                                     {"n_seq", res.eval_batch.inputs.n_seq},
                                     {"seq_len", res.eval_batch.inputs.seq_len},
                                     {"n_heads", cfg.model.n_heads},
                                     {"d_head", cfg.model.d_head},
                                     {"rank_cap", cfg.regularizer.rank_cap(cfg.seq_len, cfg.model.d_head)},
                                     {"tokens", res.eval_batch.inputs.ids},
                                     {"targets", res.eval_batch.targets}};
    detail::write_file(out_dir / "dump.json", manifest.dump(2) + "\n");
    std::string lines;
    for (const auto& m : res.metrics) lines += to_json(m).dump() + "\n";
    detail::write_file(out_dir / "metrics.jsonl", lines);
  }
  return res;
}

/// One independent run per seed, each in out_dir/<mode>-seed<seed> when
/// `out_dir` is non-empty.
inline std::vector<TrainResult> run_suite(const RunConfig& cfg, const std::vector<std::uint64_t>& seeds,
                                          const std::filesystem::path& out_dir = {}) {
  if (seeds.empty()) throw InputError("field seeds must list at least one seed");
  std::vector<TrainResult> out;
  for (std::uint64_t s : seeds) out.push_back(train(cfg, s, out_dir.empty() ? out_dir : out_dir / run_id(cfg, s)));
  return out;
}

}  // namespace geolan
