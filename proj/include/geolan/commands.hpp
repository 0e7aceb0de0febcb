// Copyright 2026 The GeoLAN Workbench Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the geolan CLI: train, analyze, verify,
// compare and patch. Each command returns a process exit code:
//   0 success, 1 verification failure (or aborted training),
//   2 invalid input, 3 corrupt data.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "geolan/error.hpp"
#include "geolan/geometry.hpp"
#include "geolan/io.hpp"
#include "geolan/metrics.hpp"
#include "geolan/model.hpp"
#include "geolan/plot.hpp"
#include "geolan/trainer.hpp"
#include "geolan/verify.hpp"

namespace geolan::cli {

enum ExitCode : int { kOk = 0, kVerificationFailed = 1, kInvalidInput = 2, kCorruptData = 3 };

// ---------------------------------------------------------------------------
// Metric registry

inline constexpr int kMetricRegistryVersion = 1;

/// Every metric name a MetricsRecord may carry.
inline const std::vector<std::string>& metric_registry() {
  static const std::vector<std::string> names{
      "eval_ce",        "cone_top10",          "cone_top50",           "isoscore",
      "pca_probe_efficiency", "grain_count",   "log_c_a",              "c_b",
      "attn_spectral_entropy", "attn_entropy_deficit", "stability_kl", "stability_cos",
      "stability_rate"};
  return names;
}

inline bool is_registered_metric(const std::string& name) {
  const auto& r = metric_registry();
  return std::find(r.begin(), r.end(), name) != r.end();
}

/// Parses one JSONL line into a record, rejecting unknown metric names.
inline MetricRecord parse_metric_record(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptDataError(std::string("metrics line is not valid JSON: ") + e.what());
  }
  MetricRecord m;
  try {
    m.run_id = j.at("run_id").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.step = j.at("step").get<std::size_t>();
    m.metric = j.at("metric").get<std::string>();
    m.value = j.at("value").is_null() ? std::nan("") : j.at("value").get<double>();
    if (j.contains("extra")) m.extra = j.at("extra");
  } catch (const nlohmann::json::exception& e) {
    throw CorruptDataError(std::string("metrics record is malformed: ") + e.what());
  }
  if (!is_registered_metric(m.metric)) throw InputError("unknown metric name \"" + m.metric + "\" in record");
  if (!m.extra.is_null() && !m.extra.is_object()) throw CorruptDataError("metrics record extra must be an object");
  return m;
}

inline std::vector<MetricRecord> read_metrics(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw InputError("metrics file not found: " + path.string());
  std::ifstream in(path);
  std::vector<MetricRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(parse_metric_record(line));
  return out;
}

inline std::string metrics_jsonl(const std::vector<MetricRecord>& records) {
  std::string s;
  for (const auto& m : records) {
    if (!is_registered_metric(m.metric)) throw InputError("unregistered metric " + m.metric);
    s += to_json(m).dump() + "\n";
  }
  return s;
}

/// Maps exceptions to exit codes, printing the message to `err`.
inline int guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const CorruptDataError& e) {
    err << "error: corrupt data: " << e.what() << "\n";
    return kCorruptData;
  } catch (const DivergenceError& e) {
    err << "error: training diverged: " << e.what() << "\n";
    return kVerificationFailed;
  } catch (const std::invalid_argument& e) {
    err << "error: invalid input: " << e.what() << "\n";
    return kInvalidInput;
  } catch (const std::domain_error& e) {
    err << "error: degenerate input: " << e.what() << "\n";
    return kInvalidInput;
  }
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;  // unset: every seed in the config
  std::filesystem::path out;          // unset: config out_dir
};

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(
      [&] {
        const RunConfig cfg = load_run_config(a.config);
        std::filesystem::path dir = a.out.empty() ? std::filesystem::path(cfg.out_dir) : a.out;
        if (dir.empty()) throw InputError("field out_dir is required (or pass --out)");
        std::vector<std::uint64_t> seeds = a.seed ? std::vector<std::uint64_t>{*a.seed} : cfg.seeds;
        if (a.seed) {
          const TrainResult r = train(cfg, *a.seed, dir);
          out << run_id(cfg, *a.seed) << ": final ce " << r.log.steps.back().ce << " -> " << dir.string() << "\n";
        } else {
          for (const TrainResult& r : run_suite(cfg, seeds, dir))
            out << run_id(cfg, r.log.seed) << ": final ce " << (r.log.steps.empty() ? std::nan("") : r.log.steps.back().ce)
                << "\n";
        }
        return static_cast<int>(kOk);
      },
      err);
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeArgs {
  std::filesystem::path dump;
  std::optional<double> delta;  // unset: 0.1 x RMS radius of each layer
  std::filesystem::path out;    // metrics JSONL; unset: stdout
  std::filesystem::path plot_dir;
  std::uint64_t seed = 0;
  std::size_t n_regions = 64;
  double eps = 0.1;
  double tau = 0.9;
};

/// Root-mean-square distance of the rows from their mean.
inline double rms_radius(const Tensor& x) {
  const std::vector<double> mu = row_mean(x);
  double s = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) s += (x(i, j) - mu[j]) * (x(i, j) - mu[j]);
  return std::sqrt(s / static_cast<double>(x.rows()));
}

inline double default_delta(const Tensor& x) {
  const double r = rms_radius(x);
  return r > 0.0 ? 0.1 * r : 1e-12;
}

struct DumpManifest {
  std::size_t n_seq = 0;
  std::size_t seq_len = 0;
  std::size_t n_heads = 0;
  std::size_t d_head = 0;
  std::size_t rank_cap = 0;
  std::vector<std::size_t> tokens;
  std::filesystem::path checkpoint, attention, queries;
};

inline std::optional<DumpManifest> read_dump_manifest(const std::filesystem::path& dump) {
  const auto path = dump.parent_path() / "dump.json";
  if (!std::filesystem::exists(path)) return std::nullopt;
  try {
    const nlohmann::json j = nlohmann::json::parse(detail::read_file(path));
    DumpManifest m;
    m.n_seq = j.at("n_seq").get<std::size_t>();
    m.seq_len = j.at("seq_len").get<std::size_t>();
    m.n_heads = j.at("n_heads").get<std::size_t>();
    m.d_head = j.at("d_head").get<std::size_t>();
    m.rank_cap = j.at("rank_cap").get<std::size_t>();
    m.tokens = j.at("tokens").get<std::vector<std::size_t>>();
    m.checkpoint = dump.parent_path() / j.at("checkpoint").get<std::string>();
    m.attention = dump.parent_path() / j.at("attention").get<std::string>();
    m.queries = dump.parent_path() / j.at("queries").get<std::string>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptDataError("dump manifest " + path.string() + " is malformed: " + e.what());
  }
}

/// Per-layer hidden-state metrics; the same calls the analyze command makes.
inline std::vector<MetricRecord> layer_metrics(const Tensor& x, std::size_t layer, double delta, const AnalyzeArgs& a,
                                               const std::string& id) {
  std::vector<MetricRecord> out;
  const nlohmann::json ex = {{"layer", layer}};
  auto rec = [&](const char* name, double v, nlohmann::json extra) {
    out.push_back({id, a.seed, 0, name, v, std::move(extra)});
  };
  const SpectrumReport s = covariance_spectrum(x);
  const std::size_t d = x.cols();
  if (d >= 10) rec("cone_top10", s.top_k(10), ex);
  if (d >= 50) rec("cone_top50", s.top_k(50), ex);
  rec("isoscore", isoscore_from_eigenvalues(s.eigenvalues), ex);
  rec("pca_probe_efficiency", static_cast<double>(pca_probe_efficiency_from(s, a.tau)),
      {{"layer", layer}, {"tau", a.tau}});
  const RepresentationField field = field_from_slice(x, delta);
  rec("grain_count", static_cast<double>(grain_decompose(field).n_grains), {{"layer", layer}, {"delta", delta}});
  Rng rng = Rng(a.seed).derive(1000 + layer);
  const CollapseEstimate ca = estimate_collapse_constant(field, a.n_regions, a.eps, rng);
  rec("log_c_a", ca.log_estimate, {{"layer", layer}, {"delta", delta}, {"eps", a.eps}, {"regions", a.n_regions}});
  return out;
}

/// Attention-layer metrics: spectral entropy, deficit and the head-variance constant.
inline std::vector<MetricRecord> attention_metrics(const Tensor& attn_rows, const Tensor* queries, std::size_t block,
                                                   const DumpManifest& m, const AnalyzeArgs& a, const std::string& id) {
  std::vector<MetricRecord> out;
  const std::size_t N = m.seq_len;
  const std::size_t K = m.n_seq * m.n_heads;
  if (attn_rows.rows() != K * N || attn_rows.cols() != N)
    throw CorruptDataError("attention dump shape does not match its manifest");
  const Tensor stack = attn_rows.reshaped(Shape{K, N, N});
  const std::size_t r = std::min(m.rank_cap ? m.rank_cap : std::min(N, m.d_head), N);
  double ent = 0.0, def = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<double> sigma = singular_values(stack.slice(k));
    sigma.resize(r);
    const double h = spectral_entropy(sigma);
    ent += h;
    def += std::log(static_cast<double>(r)) - h;
  }
  const nlohmann::json ex = {{"block", block}, {"rank_cap", r}};
  out.push_back({id, a.seed, 0, "attn_spectral_entropy", ent / static_cast<double>(K), ex});
  out.push_back({id, a.seed, 0, "attn_entropy_deficit", def / static_cast<double>(K), ex});
  if (queries && m.n_heads >= 2) {
    std::vector<Tensor> per_head;
    for (std::size_t h = 0; h < m.n_heads; ++h) {
      Tensor q(Shape{queries->rows(), m.d_head});
      for (std::size_t i = 0; i < q.rows(); ++i)
        for (std::size_t c = 0; c < m.d_head; ++c) q(i, c) = (*queries)(i, h * m.d_head + c);
      per_head.push_back(std::move(q));
    }
    double delta = a.delta.value_or(0.0);
    if (!a.delta) {
      for (const auto& q : per_head) delta += default_delta(q);
      delta /= static_cast<double>(per_head.size());
    }
    std::vector<RepresentationField> fields;
    for (const auto& q : per_head) fields.push_back(field_from_slice(q, delta));
    Rng rng = Rng(a.seed).derive(2000 + block);
    const HeadVarianceEstimate cb = estimate_head_variance_constant(fields, a.n_regions, rng);
    out.push_back({id, a.seed, 0, "c_b", cb.estimate, {{"block", block}, {"delta", delta}, {"regions", a.n_regions}}});
  }
  return out;
}

inline std::vector<MetricRecord> analyze_dump(const AnalyzeArgs& a) {
  const EmbeddingDump dump = read_dump(a.dump);
  if (dump.layers == 0 || dump.tokens < 2 || dump.dim == 0)
    throw InputError("dump needs at least one layer, two tokens and one dimension");
  if (a.delta && !(*a.delta > 0.0)) throw InputError("--delta must be > 0");
  detail::require(a.tau > 0.0 && a.tau <= 1.0, "--tau must lie in (0, 1]");
  const std::vector<Tensor> layers = layers_from_dump(dump);
  const std::optional<DumpManifest> man = read_dump_manifest(a.dump);
  const std::string id = std::filesystem::absolute(a.dump).parent_path().filename().string();

  // One task per layer; results are concatenated in layer order.
  std::vector<std::future<std::vector<MetricRecord>>> jobs;
  for (std::size_t l = 0; l < layers.size(); ++l)
    jobs.push_back(std::async(std::launch::async, [&, l] {
      return layer_metrics(layers[l], l, a.delta.value_or(default_delta(layers[l])), a, id);
    }));
  std::vector<MetricRecord> out;
  for (auto& j : jobs) {
    auto r = j.get();
    out.insert(out.end(), r.begin(), r.end());
  }

  if (man && std::filesystem::exists(man->attention)) {
    const std::vector<Tensor> attn = layers_from_dump(read_dump(man->attention));
    std::vector<Tensor> queries;
    if (std::filesystem::exists(man->queries)) queries = layers_from_dump(read_dump(man->queries));
    if (!queries.empty() && queries.size() != attn.size())
      throw CorruptDataError("query dump and attention dump disagree on layer count");
    for (std::size_t b = 0; b < attn.size(); ++b) {
      auto r = attention_metrics(attn[b], queries.empty() ? nullptr : &queries[b], b, *man, a, id);
      out.insert(out.end(), r.begin(), r.end());
    }
  }
  return out;
}

inline void plot_layer_metrics(const std::vector<MetricRecord>& records, const std::filesystem::path& dir) {
  std::map<std::string, Series> by_metric;
  for (const auto& r : records) {
    if (r.extra.is_null()) continue;
    const char* key = r.extra.contains("layer") ? "layer" : r.extra.contains("block") ? "block" : nullptr;
    if (!key) continue;
    Series& s = by_metric[r.metric];
    s.label = r.metric;
    s.x.push_back(r.extra.at(key).get<double>());
    s.y.push_back(r.value);
  }
  for (const auto& [name, s] : by_metric) write_svg(dir / (name + ".svg"), name + " by layer", {s});
}

inline int cmd_analyze(const AnalyzeArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(
      [&] {
        const std::vector<MetricRecord> recs = analyze_dump(a);
        const std::string text = metrics_jsonl(recs);
        if (a.out.empty())
          out << text;
        else
          detail::write_file(a.out, text);
        if (!a.plot_dir.empty()) {
          try {
            plot_layer_metrics(recs, a.plot_dir);
          } catch (const std::exception& e) {
            err << "warning: plots not written: " << e.what() << "\n";
          }
        }
        return static_cast<int>(kOk);
      },
      err);
}

// ---------------------------------------------------------------------------
// verify

struct VerifyArgs {
  std::string suite = "default";
  std::size_t trials = 100;
  std::uint64_t seed = 0;
  double bound_scale = 1.0;  // test hook
  std::filesystem::path out;
};

inline const std::vector<std::string>& verify_check_names() {
  static const std::vector<std::string> names{"moment", "prop_a", "prop_b", "lemma3", "lemma5", "lemma6", "packing"};
  return names;
}

inline std::vector<VerificationReport> run_verify_suite(const VerifyArgs& a) {
  if (a.trials == 0) throw InputError("--trials must be >= 1");
  if (!(a.bound_scale > 0.0)) throw InputError("--bound-scale must be > 0");
  std::vector<std::string> checks;
  if (a.suite == "default" || a.suite == "all") {
    checks = verify_check_names();
  } else {
    std::stringstream ss(a.suite);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto& known = verify_check_names();
      if (std::find(known.begin(), known.end(), item) == known.end())
        throw InputError("unknown verify suite entry \"" + item + "\"");
      checks.push_back(item);
    }
  }
  const VerifyOptions opt{a.bound_scale};
  const std::size_t T = a.trials;
  const Rng root(a.seed);
  std::vector<VerificationReport> out;
  for (std::size_t c = 0; c < checks.size(); ++c) {
    const std::string& name = checks[c];
    Rng rng = root.derive(c + 1);
    if (name == "moment") {
      for (std::size_t d : {2, 3, 8}) {
        VerificationReport r = check_fourth_moment(d, 1000 * T, rng);
        r.check_name += "_d" + std::to_string(d);
        out.push_back(std::move(r));
      }
    } else if (name == "prop_a") {
      out.push_back(verify_prop_a_random(T, T, rng, opt));
    } else if (name == "prop_b") {
      out.push_back(verify_prop_b_random(10 * T, rng, opt));
    } else if (name == "lemma3") {
      VerificationReport r;
      r.check_name = "lemma3_grain_count";
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t n = 2 + rng.below(31);
        const std::size_t d = 1 + rng.below(4);
        Tensor x(Shape{n, d});
        for (auto& v : x.values()) v = rng.normal();
        const double delta = std::exp(rng.uniform(-3.0, 1.0));
        r.observe(static_cast<double>(grain_decompose(field_from_slice(x, delta)).n_grains),
                  opt.bound_scale * static_cast<double>(n), {{"trial", t}, {"n", n}});
      }
      out.push_back(std::move(r));
    } else if (name == "lemma5") {
      ModelConfig mc;
      mc.d_model = 16;
      mc.n_heads = 2;
      mc.d_head = 8;
      mc.n_layers = 2;
      mc.max_seq = 16;
      Rng init = rng.derive(7);
      const Params p = init_params(mc, init);
      LipschitzChainReport rep = verify_lipschitz(p, std::max<std::size_t>(1, T / 10), T, rng, 2, 8);
      out.push_back(std::move(rep.calibration));
      out.push_back(std::move(rep.holdout));
    } else if (name == "lemma6") {
      out.push_back(verify_probe_bound({1, 2, 3, 4}, 0.3, 10 * T, rng, 2, 6, 32, opt));
      VerificationReport ext;
      ext.check_name = "lemma6_extremal";
      for (double cc : {0.1, 0.3, 0.5, 0.9}) {
        const auto [interference, bound] = probe_bound_extremal(cc);
        ext.observe(std::abs(interference - bound), 1e-9, {{"c", cc}});
      }
      out.push_back(std::move(ext));
    } else if (name == "packing") {
      Tensor x(Shape{24, 3});
      for (auto& v : x.values()) v = rng.normal();
      const RepresentationField field = field_from_slice(x, 0.2);
      const double c_a = estimate_collapse_constant(field, 4 * T, 0.1, rng).estimate;
      out.push_back(verify_packing(field, std::max<std::size_t>(1, T / 10), c_a, 0.1, rng, 20000));
      std::vector<RepresentationField> heads;
      for (std::size_t h = 0; h < 4; ++h) {
        Tensor q(Shape{16, 3});
        for (auto& v : q.values()) v = rng.normal();
        heads.push_back(field_from_slice(q, 0.2));
      }
      const double c_b = estimate_head_variance_constant(heads, 4 * T, rng).estimate;
      out.push_back(verify_head_variance_packing(heads, std::max<std::size_t>(1, T / 10), c_b, rng));
    }
  }
  return out;
}

inline int cmd_verify(const VerifyArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(
      [&] {
        const std::vector<VerificationReport> reps = run_verify_suite(a);
        bool ok = true;
        nlohmann::json j = {{"suite", a.suite}, {"seed", a.seed}, {"trials", a.trials}};
        j["reports"] = nlohmann::json::array();
        for (const auto& r : reps) {
          j["reports"].push_back(r.to_json());
          if (r.theorem_backed && !r.passed()) ok = false;
        }
        j["passed"] = ok;
        const std::string text = j.dump(2) + "\n";
        if (a.out.empty())
          out << text;
        else
          detail::write_file(a.out, text);
        if (!ok) err << "verification failed: a theorem-backed check reported violations\n";
        return static_cast<int>(ok ? kOk : kVerificationFailed);
      },
      err);
}

// ---------------------------------------------------------------------------
// compare

struct CompareRow {
  std::string metric;
  std::string comparison;  // "a - b"
  double mean_diff = 0.0;
  double p = 1.0;
  double d = 0.0;
  std::size_t n_a = 0, n_b = 0;
};

/// Mean difference, Welch p and Cohen's d of a against b.
inline CompareRow compare_samples(const std::string& metric, const std::string& comparison,
                                  const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2)
    throw InputError("compare: each group needs at least 2 runs (" + comparison + " has " + std::to_string(a.size()) +
                     " and " + std::to_string(b.size()) + ")");
  CompareRow r{metric, comparison, sample_mean(a) - sample_mean(b), welch_p(a, b), cohens_d(a, b), a.size(), b.size()};
  return r;
}

/// The value a run contributes for `metric`: the record itself, or the one at
/// the highest layer (block) for per-layer metrics.
inline std::optional<double> run_value(const std::vector<MetricRecord>& recs, const std::string& metric) {
  std::optional<double> best;
  double best_layer = -1.0;
  for (const auto& r : recs) {
    if (r.metric != metric) continue;
    double layer = 0.0;
    if (!r.extra.is_null()) {
      if (r.extra.contains("layer")) layer = r.extra["layer"].get<double>();
      else if (r.extra.contains("block")) layer = r.extra["block"].get<double>();
    }
    if (!best || layer > best_layer) {
      best = r.value;
      best_layer = layer;
    }
  }
  return best;
}

struct CompareArgs {
  std::vector<std::filesystem::path> run_dirs;
  std::vector<std::string> metrics{"eval_ce", "cone_top10"};
  bool json = false;
  std::filesystem::path out;  // JSON copy of the table
};

inline std::string run_mode(const std::filesystem::path& dir) {
  const auto p = dir / "config.json";
  if (!std::filesystem::exists(p)) throw InputError("run directory has no config.json: " + dir.string());
  try {
    const nlohmann::json j = nlohmann::json::parse(detail::read_file(p));
    const std::string m = j.at("mode").get<std::string>();
    parse_mode(m);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptDataError("config.json in " + dir.string() + " is malformed: " + e.what());
  }
}

inline std::vector<CompareRow> compare_runs(const CompareArgs& a) {
  if (a.run_dirs.empty()) throw InputError("compare: no run directories");
  for (const auto& m : a.metrics)
    if (!is_registered_metric(m)) throw InputError("compare: unknown metric \"" + m + "\"");
  std::map<std::string, std::vector<std::vector<MetricRecord>>> groups;
  for (const auto& dir : a.run_dirs) groups[run_mode(dir)].push_back(read_metrics(dir / "metrics.jsonl"));
  for (const auto& [mode, runs] : groups)
    if (runs.size() < 2)
      throw InputError("compare: group " + mode + " has " + std::to_string(runs.size()) + " run(s); need at least 2");
  static const std::vector<std::pair<std::string, std::string>> order{
      {"geolan", "control"}, {"geolan", "baseline"}, {"control", "baseline"}};
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& pr : order)
    if (groups.count(pr.first) && groups.count(pr.second)) pairs.push_back(pr);
  if (pairs.empty()) throw InputError("compare: need runs from at least two modes");
  std::vector<CompareRow> rows;
  for (const auto& metric : a.metrics)
    for (const auto& [ga, gb] : pairs) {
      auto values = [&](const std::string& g) {
        std::vector<double> v;
        for (const auto& recs : groups[g]) {
          const auto x = run_value(recs, metric);
          if (!x) throw InputError("compare: a " + g + " run has no " + metric + " record");
          v.push_back(*x);
        }
        return v;
      };
      rows.push_back(compare_samples(metric, ga + " - " + gb, values(ga), values(gb)));
    }
  return rows;
}

inline nlohmann::json rows_to_json(const std::vector<CompareRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows)
    j.push_back({{"metric", r.metric}, {"comparison", r.comparison}, {"mean_diff", r.mean_diff}, {"p", r.p},
                 {"d", r.d},           {"n_a", r.n_a},               {"n_b", r.n_b}});
  return j;
}

inline std::string rows_to_text(const std::vector<CompareRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(24) << "metric" << std::setw(22) << "comparison" << std::right << std::setw(14)
     << "mean_diff" << std::setw(12) << "p" << std::setw(10) << "d" << "\n";
  for (const auto& r : rows) {
    char buf[64];
    os << std::left << std::setw(24) << r.metric << std::setw(22) << r.comparison << std::right;
    std::snprintf(buf, sizeof buf, "%14.6g%12.4g%10.4f", r.mean_diff, r.p, r.d);
    os << buf << "\n";
  }
  return os.str();
}

inline int cmd_compare(const CompareArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(
      [&] {
        const std::vector<CompareRow> rows = compare_runs(a);
        const nlohmann::json j = rows_to_json(rows);
        if (a.json)
          out << j.dump(2) << "\n";
        else
          out << rows_to_text(rows);
        if (!a.out.empty()) detail::write_file(a.out, j.dump(2) + "\n");
        return static_cast<int>(kOk);
      },
      err);
}

// ---------------------------------------------------------------------------
// patch

struct PatchArgs {
  std::filesystem::path clean_dump;   // dump.glan of a run; dump.json and the checkpoint sit beside it
  std::filesystem::path corrupted;    // corrupted token ids: JSON array or whitespace separated
  std::size_t layer = 0;
  std::optional<std::size_t> grain;   // unset: every grain
  std::optional<double> delta;        // grain radius; unset: 0.1 x RMS radius
  bool donor_corrupted = false;       // patch with the corrupted run's own states (no-op)
  std::filesystem::path out;
};

struct PatchRow {
  std::string label;  // "grain <g>" or "all"
  std::size_t tokens = 0;
  double restoration = 0.0;
};

struct PatchReport {
  std::size_t layer = 0;
  double delta = 0.0;
  double clean_margin = 0.0;
  double corrupted_margin = 0.0;
  std::vector<PatchRow> rows;  // grains sorted by restoration, descending; "all" last
};

/// Logit of `target` minus the largest other logit.
inline double logit_margin(const Tensor& logits, std::size_t row, std::size_t target) {
  double other = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < logits.cols(); ++k)
    if (k != target) other = std::max(other, logits(row, k));
  return logits(row, target) - other;
}

inline std::vector<std::size_t> read_token_file(const std::filesystem::path& path) {
  const std::string text = detail::read_file(path);
  std::vector<std::size_t> ids;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '[') {
    try {
      ids = nlohmann::json::parse(text).get<std::vector<std::size_t>>();
    } catch (const nlohmann::json::exception& e) {
      throw InputError("token file " + path.string() + " is not a JSON array of ids: " + e.what());
    }
  } else {
    std::istringstream is(text);
    long long v;
    while (is >> v) {
      if (v < 0) throw InputError("token file has a negative id");
      ids.push_back(static_cast<std::size_t>(v));
    }
    if (!is.eof()) throw InputError("token file " + path.string() + " has a non-numeric entry");
  }
  return ids;
}

inline PatchReport run_patch(const PatchArgs& a) {
  const std::optional<DumpManifest> man = read_dump_manifest(a.clean_dump);
  if (!man) throw InputError("no dump.json beside " + a.clean_dump.string());
  const Params p = read_checkpoint(man->checkpoint);
  const EmbeddingDump dump = read_dump(a.clean_dump);
  const std::size_t n_rows = man->n_seq * man->seq_len;
  if (man->tokens.size() != n_rows) throw CorruptDataError("dump manifest token count does not match n_seq x seq_len");
  if (dump.layers != p.config.n_layers + 1 || dump.tokens != n_rows || dump.dim != p.config.d_model)
    throw CorruptDataError("clean dump shape (" + std::to_string(dump.layers) + ", " + std::to_string(dump.tokens) +
                           ", " + std::to_string(dump.dim) + ") does not match the checkpoint and manifest");
  const std::vector<std::size_t> corrupted = read_token_file(a.corrupted);
  if (corrupted.size() != n_rows)
    throw CorruptDataError("corrupted tokens: " + std::to_string(corrupted.size()) + " ids, clean run has " +
                           std::to_string(n_rows));
  if (a.layer > p.config.n_layers)
    throw InputError("--layer " + std::to_string(a.layer) + " exceeds n_layers " + std::to_string(p.config.n_layers));

  TokenBatch clean_b{man->n_seq, man->seq_len, man->tokens};
  TokenBatch corr_b{man->n_seq, man->seq_len, corrupted};
  const ForwardTrace clean = forward(p, clean_b);
  const ForwardTrace corr = forward(p, corr_b);
  // The clean states must agree with the stored dump to float precision.
  const Tensor stored = layers_from_dump(dump)[a.layer];
  for (std::size_t i = 0; i < stored.size(); ++i)
    if (std::abs(stored[i] - clean.hidden[a.layer][i]) > 1e-4 * (1.0 + std::abs(stored[i])))
      throw CorruptDataError("clean dump does not match a forward pass of the checkpoint on the manifest tokens");

  std::vector<std::size_t> last_rows, targets;
  for (std::size_t b = 0; b < man->n_seq; ++b) {
    const std::size_t row = b * man->seq_len + man->seq_len - 1;
    last_rows.push_back(row);
    targets.push_back(argmax(clean.logits.row(row)));
  }
  auto total_margin = [&](const Tensor& logits) {
    double s = 0.0;
    for (std::size_t b = 0; b < last_rows.size(); ++b) s += logit_margin(logits, last_rows[b], targets[b]);
    return s;
  };
  PatchReport rep;
  rep.layer = a.layer;
  rep.clean_margin = total_margin(clean.logits);
  rep.corrupted_margin = total_margin(corr.logits);
  const double gap = rep.clean_margin - rep.corrupted_margin;
  if (!(std::abs(gap) > 0.0)) throw DegenerateInputError("clean and corrupted margins are equal; restoration undefined");

  const Tensor& donor_src = a.donor_corrupted ? corr.hidden[a.layer] : clean.hidden[a.layer];
  auto restoration = [&](const std::vector<std::size_t>& rows) {
    Tensor donor(Shape{rows.size(), donor_src.cols()});
    for (std::size_t k = 0; k < rows.size(); ++k)
      std::copy(donor_src.row(rows[k]).begin(), donor_src.row(rows[k]).end(), donor.row(k).begin());
    const ForwardTrace t = patch_forward(p, corr_b, a.layer, rows, donor);
    return (total_margin(t.logits) - rep.corrupted_margin) / gap;
  };

  rep.delta = a.delta.value_or(default_delta(clean.hidden[a.layer]));
  if (!(rep.delta > 0.0)) throw InputError("--delta must be > 0");
  const GrainAssignment g = grain_decompose(field_from_slice(clean.hidden[a.layer], rep.delta));
  if (a.grain && *a.grain >= g.n_grains)
    throw InputError("--grain " + std::to_string(*a.grain) + " out of range; layer has " +
                     std::to_string(g.n_grains) + " grains");
  for (std::size_t k = 0; k < g.n_grains; ++k) {
    if (a.grain && *a.grain != k) continue;
    const auto rows = g.members(k);
    rep.rows.push_back({"grain " + std::to_string(k), rows.size(), restoration(rows)});
  }
  std::stable_sort(rep.rows.begin(), rep.rows.end(),
                   [](const PatchRow& x, const PatchRow& y) { return x.restoration > y.restoration; });
  std::vector<std::size_t> all(n_rows);
  std::iota(all.begin(), all.end(), 0);
  rep.rows.push_back({"all", n_rows, restoration(all)});
  return rep;
}

inline nlohmann::json to_json(const PatchReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& x : r.rows) rows.push_back({{"set", x.label}, {"tokens", x.tokens}, {"restoration", x.restoration}});
  return {{"layer", r.layer},
          {"delta", r.delta},
          {"clean_margin", r.clean_margin},
          {"corrupted_margin", r.corrupted_margin},
          {"rows", rows}};
}

inline int cmd_patch(const PatchArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(
      [&] {
        const std::string text = to_json(run_patch(a)).dump(2) + "\n";
        if (a.out.empty())
          out << text;
        else
          detail::write_file(a.out, text);
        return static_cast<int>(kOk);
      },
      err);
}

}  // namespace geolan::cli
