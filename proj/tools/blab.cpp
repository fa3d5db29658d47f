#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <string>

#include "blab/experiment.hpp"

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  uint64_t seed = 0;
  bool seed_set = false;
  int jobs = 1;
  bool overwrite = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "experiment config file");
  cmd->add_option("--out", o.out_dir, "output directory (default $BLAB_OUT or ./out)");
  cmd->add_option("--seed", o.seed, "master seed override")
      ->each([&](const std::string&) { o.seed_set = true; });
  cmd->add_option("--jobs", o.jobs, "parallel cells for sweep/synthesize");
  cmd->add_flag("--overwrite", o.overwrite, "redo cells whose outputs already exist");
}

blab::ExperimentConfig load_config(const CommonOpts& o) {
  blab::ExperimentConfig cfg;
  if (!o.config_path.empty()) cfg = blab::ExperimentConfig::load(o.config_path);
  if (o.seed_set) cfg.master_seed = o.seed;
  if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
  return cfg;
}

std::string method_of(const blab::ExperimentConfig& cfg) {
  if (cfg.train_lambda == 0.0) return "rbt";
  return cfg.train_levels.size() == 1 ? "sl" : "ml";
}

blab::StageContext run_context(const CommonOpts& o) {
  blab::ExperimentConfig cfg = load_config(o);
  return {cfg, cfg.resolved_out_dir() + "/run", method_of(cfg)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"blab: backdoored-classifier workbench with latent-difference "
               "measurement and defense evaluation"};
  app.require_subcommand(1);

  CommonOpts o;
  auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset files");
  auto* train = app.add_subcommand("train", "train one model per the config");
  auto* eval = app.add_subcommand("eval", "print BA/ASR of a trained run");
  auto* distances = app.add_subcommand("distances", "latent distance report");
  auto* defend = app.add_subcommand("defend", "run detection defenses");
  auto* synth = app.add_subcommand("synthesize", "reverse-engineer triggers per class");
  auto* prune = app.add_subcommand("prune", "neuron-pruning BA/ASR curve");
  auto* sweep = app.add_subcommand("sweep", "run the method x attack x seed grid");
  auto* report = app.add_subcommand("report", "aggregate sweep artifacts");
  for (auto* cmd : {gen, train, eval, distances, defend, synth, prune, sweep, report})
    add_common(cmd, o);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      blab::stage_gen_data(load_config(o));
    } else if (train->parsed()) {
      blab::StageContext ctx = run_context(o);
      blab::write_manifest(ctx);
      blab::stage_train(ctx);
      blab::finalize_manifest(ctx, {});
      std::printf("trained: %s\n", ctx.dir.c_str());
    } else if (eval->parsed()) {
      auto [ba, asr] = blab::stage_eval(run_context(o));
      std::printf("ba %.9g\nasr %.9g\n", ba, asr);
    } else if (distances->parsed()) {
      blab::stage_distances(run_context(o));
    } else if (defend->parsed()) {
      blab::stage_defend(run_context(o));
    } else if (synth->parsed()) {
      blab::stage_synthesize(run_context(o), o.jobs);
    } else if (prune->parsed()) {
      blab::stage_prune(run_context(o));
    } else if (sweep->parsed()) {
      blab::run_sweep(load_config(o), o.jobs, o.overwrite);
    } else if (report->parsed()) {
      blab::run_report(load_config(o));
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
