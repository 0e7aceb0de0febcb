// Copyright 2026 The GeoLAN Workbench Authors
// SPDX-License-Identifier: Apache-2.0
//
// geolan: train, analyze, verify, compare, patch.

#include <iostream>

#include "CLI11.hpp"
#include "geolan/commands.hpp"

namespace cli = geolan::cli;

int main(int argc, char** argv) {
  CLI::App app{"geolan: geometric regularization workbench"};
  app.require_subcommand(1);

  cli::TrainArgs train;
  std::uint64_t train_seed = 0;
  auto* t = app.add_subcommand("train", "train one run (--seed) or every seed in the config");
  t->add_option("config", train.config, "run config JSON")->required();
  auto* seed_opt = t->add_option("--seed", train_seed, "train a single seed");
  t->add_option("--out", train.out, "output directory (default: config out_dir)");

  cli::AnalyzeArgs analyze;
  double delta = 0.0;
  auto* an = app.add_subcommand("analyze", "per-layer geometry metrics of an embedding dump");
  an->add_option("dump", analyze.dump, "dump.glan")->required();
  auto* delta_opt = an->add_option("--delta", delta, "tube radius (default 0.1 x RMS radius per layer)");
  an->add_option("--out", analyze.out, "metrics JSONL (default stdout)");
  an->add_option("--plots", analyze.plot_dir, "directory for metric-vs-layer SVG plots");
  an->add_option("--seed", analyze.seed, "seed for region sampling");
  an->add_option("--regions", analyze.n_regions, "sampled regions per constant estimate");
  an->add_option("--eps", analyze.eps, "exponent in the collapse ratio");
  an->add_option("--tau", analyze.tau, "variance share for pca_probe_efficiency");

  cli::VerifyArgs verify;
  auto* v = app.add_subcommand("verify", "brute-force checks of the provable bounds");
  v->add_option("--suite", verify.suite, "default or a comma list of: moment,prop_a,prop_b,lemma3,lemma5,lemma6,packing");
  v->add_option("--trials", verify.trials, "trial scale");
  v->add_option("--seed", verify.seed, "seed");
  v->add_option("--out", verify.out, "report JSON (default stdout)");
  v->add_option("--bound-scale", verify.bound_scale, "multiply every bound (fault injection)")->group("");

  cli::CompareArgs compare;
  auto* c = app.add_subcommand("compare", "mean difference, Welch p and Cohen's d between modes");
  c->add_option("runs", compare.run_dirs, "run directories")->required();
  c->add_option("--metric", compare.metrics, "metric names (repeatable)");
  c->add_flag("--json", compare.json, "print JSON instead of the text table");
  c->add_option("--out", compare.out, "also write the table as JSON");

  cli::PatchArgs patch;
  std::size_t grain = 0;
  double patch_delta = 0.0;
  auto* p = app.add_subcommand("patch", "activation patching restoration per grain");
  p->add_option("clean_dump", patch.clean_dump, "dump.glan of a run")->required();
  p->add_option("corrupted_tokens", patch.corrupted, "corrupted token ids")->required();
  p->add_option("--layer", patch.layer, "layer to patch")->required();
  auto* grain_opt = p->add_option("--grain", grain, "single grain (default: all)");
  auto* pdelta_opt = p->add_option("--delta", patch_delta, "grain radius");
  p->add_flag("--donor-corrupted", patch.donor_corrupted, "patch with the corrupted run's own states");
  p->add_option("--out", patch.out, "report JSON (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : cli::kInvalidInput;
  }

  if (*t) {
    if (*seed_opt) train.seed = train_seed;
    return cli::cmd_train(train, std::cout, std::cerr);
  }
  if (*an) {
    if (*delta_opt) analyze.delta = delta;
    return cli::cmd_analyze(analyze, std::cout, std::cerr);
  }
  if (*v) return cli::cmd_verify(verify, std::cout, std::cerr);
  if (*c) return cli::cmd_compare(compare, std::cout, std::cerr);
  if (*p) {
    if (*grain_opt) patch.grain = grain;
    if (*pdelta_opt) patch.delta = patch_delta;
    return cli::cmd_patch(patch, std::cout, std::cerr);
  }
  return cli::kInvalidInput;
}
