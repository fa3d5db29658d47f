#pragma once

#include <string>

#include "blab/config.hpp"

namespace blab {

// One experiment cell: everything lives under `dir`. Stages are idempotent
// given the same config and seeds.
struct StageContext {
  ExperimentConfig cfg;
  std::string dir;
  std::string method;  // rbt | sl | ml | custom, recorded in the manifest
};

// Training data, trigger, and test sets rebuilt deterministically from the
// config.
struct DataBundle {
  Dataset train, test;
  TriggerSpec trigger;
  PoisonSplit split;
  Dataset asr_test;
};
DataBundle build_data(const ExperimentConfig& cfg);

void write_manifest(const StageContext& ctx);
void finalize_manifest(const StageContext& ctx,
                       const std::vector<std::pair<std::string, double>>& timings);

void stage_gen_data(const ExperimentConfig& cfg);  // writes dataset files
void stage_train(const StageContext& ctx);         // checkpoint + trainlog + eval.csv
std::pair<double, double> stage_eval(const StageContext& ctx);
void stage_distances(const StageContext& ctx);     // distances.csv + projections
void stage_defend(const StageContext& ctx);        // detection.csv
void stage_synthesize(const StageContext& ctx, int jobs = 1);  // triggers.jsonl + images
void stage_prune(const StageContext& ctx);         // prune.csv

// Loads the cell's checkpoint into a freshly built model.
TappedModel load_model(const StageContext& ctx);

struct SweepCell {
  std::string attack;
  std::string method;
  double lambda = 0.0;
  int seed_index = 0;
  std::string name() const;
};
std::vector<SweepCell> sweep_cells(const ExperimentConfig& cfg);
ExperimentConfig cell_config(const ExperimentConfig& base, const SweepCell& cell);

// Runs train + distances + defend for every cell of the sweep grid, up to
// `jobs` cells in parallel; each cell owns its subdirectory exclusively.
void run_sweep(const ExperimentConfig& cfg, int jobs, bool overwrite);

// Pure fold over persisted sweep artifacts into report/summary.csv plus
// copies of the per-cell projection CSVs. Never touches a model.
void run_report(const ExperimentConfig& cfg);

}  // namespace blab
