#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "blab/data.hpp"
#include "blab/distance.hpp"
#include "blab/model.hpp"
#include "blab/train.hpp"

namespace blab {

// Flat key-value experiment configuration ("section.key = value"). Every
// field has a default, so an empty config runs the full pipeline.
struct ExperimentConfig {
  uint64_t master_seed = 1;
  int seed_index = 0;
  std::string out_dir;  // empty: resolved from BLAB_OUT or "out"

  std::string dataset_source = "synth";  // synth | file | cifar10
  int dataset_n_per_class = 30;
  std::string dataset_path;

  std::string attack_kind = "patched";
  int attack_target = 0;
  double attack_ratio = 0.1;
  int attack_patch_size = 3;
  double attack_alpha = 0.2;
  double attack_sig_delta = 0.08;
  int attack_sig_freq = 6;
  int attack_warp_grid = 4;
  double attack_warp_strength = 0.5;

  std::string model_family = "plain";  // plain | residual
  int model_width = 1;

  int train_epochs = 30;
  int train_batch = 64;
  double train_lr = 0.01;
  std::vector<int> train_drop_epochs = {15, 23};
  double train_drop_factor = 0.1;
  double train_lambda = 0.0;
  std::vector<std::string> train_levels = {"s1", "s2", "s3"};
  std::string train_kernel = "GMK2";
  bool train_median_scale = true;

  std::vector<std::string> measure_metrics = {"mmd", "ed", "swd"};
  std::vector<std::string> measure_levels = {"s1", "s2", "s3"};
  std::string measure_kernel = "GMK2";
  bool measure_median_scale = true;
  int measure_sample_size = 200;
  int measure_repeats = 3;
  int measure_swd_projections = 128;
  int measure_pool_per_class = 100;
  bool measure_use_gap = false;

  std::vector<std::string> defend_defenses = {"ac", "ss", "sr"};
  std::vector<std::string> defend_levels = {"s1", "s2", "s3"};
  std::vector<std::pair<int, double>> defend_grid = {
      {100, 0.5}, {100, 1.0}, {500, 0.5}, {500, 1.0}};
  int defend_validation = 200;

  double nc_gamma = 0.01;
  int nc_steps = 500;
  double nc_lr = 0.1;
  int nc_batch = 16;

  std::vector<double> prune_fractions = {0.0,  0.05, 0.1,  0.15, 0.2, 0.25,
                                         0.3,  0.35, 0.4,  0.45, 0.5};

  std::vector<std::string> sweep_methods = {"rbt", "ml"};
  std::vector<double> sweep_lambdas = {0.3};
  std::vector<std::string> sweep_attacks = {"patched", "blended"};
  int sweep_seeds = 3;

  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::string& path);
  std::string serialize() const;  // canonical form; round-trips losslessly
  std::string hash() const;
  void validate() const;

  std::string resolved_out_dir() const;

  // Typed views used by the stages.
  SynthConfig synth_config() const;
  ModelConfig model_config() const;
  TriggerSpec::Params trigger_params() const;
  TriggerSpec make_trigger(int h, int w, int c) const;
  TrainConfig train_config() const;
  DistanceOptions distance_options() const;
};

std::vector<int> parse_levels(const std::vector<std::string>& names);

}  // namespace blab
