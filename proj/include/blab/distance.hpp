#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "blab/linalg.hpp"
#include "blab/model.hpp"
#include "blab/tape.hpp"

namespace blab {

enum class KernelKind { Gaussian, GaussianMixture, Linear };

struct KernelSpec {
  KernelKind kind = KernelKind::GaussianMixture;
  std::vector<double> sigmas = {0.25, 0.5, 1.0, 2.0, 4.0};  // GMK2
  // With median scaling each sigma multiplies the median pairwise distance
  // of the pooled inputs; raw bandwidths otherwise.
  bool median_scale = true;

  // Named kernels: GK1-GK3, GMK1-GMK6, LK.
  static KernelSpec parse(const std::string& name, bool median_scale = true);
  std::string name() const;
  void validate() const;
};

// Effective bandwidths for a pair of sample sets under this kernel spec;
// shared by the measurement estimator and the training regularizer so both
// apply the same scaling rule. Empty for the linear kernel.
std::vector<double> effective_sigmas(const Mat& x, const Mat& y, const KernelSpec& k);

// Biased V-statistic MMD: mean k(x,x') + mean k(y,y') - 2 mean k(x,y).
double mmd(const Mat& x, const Mat& y, const KernelSpec& kernel);

// Non-negative energy distance: 2 E|x-y| - E|x-x'| - E|y-y'|.
double energy_distance(const Mat& x, const Mat& y);

// Sliced Wasserstein distance with l1 cost: average over unit random
// projections of the sorted-match sum. Unequal sizes are reconciled by
// seeded uniform subsampling of the larger set.
double swd(const Mat& x, const Mat& y, int n_projections, uint64_t seed);

// Differentiable MMD between two row sets already on a tape, using fixed
// effective bandwidths (empty = linear kernel).
Var mmd_graph(Tape& tape, Var x, Var y, const std::vector<double>& sigma_eff);

struct DistanceOptions {
  std::vector<int> levels = {0, 1, 2};
  std::vector<std::string> metrics = {"mmd", "ed", "swd"};
  KernelSpec kernel;
  int sample_size = 200;
  int repeats = 3;
  int swd_projections = 128;
  bool use_gap = false;
  int target = 0;
  uint64_t seed = 0;
};

struct DistanceCell {
  std::string metric;
  int level = 0;
  double cross = 0, intra = 0, inter_min = 0;
  int rank = 0;
  bool missing = false;
};

struct DistanceReport {
  std::vector<DistanceCell> cells;
  std::array<double, 3> aro;  // per level, NaN when not computable
  std::vector<std::string> notes;
};

// The cross/intra/inter protocol: populations keyed by the model's own
// predictions, estimates averaged over seeded resamples, ranks of the cross
// distance among {cross, intra, min inter}, ARO = mean rank over metrics.
DistanceReport difference_report(TappedModel& model,
                                 const std::vector<const Tensor*>& benign,
                                 const std::vector<const Tensor*>& malicious,
                                 const DistanceOptions& opts);

void write_distance_csv(const std::string& path, const DistanceReport& report);

// 2-D PCA projection of benign-vs-malicious features at one level, for
// external plotting. Columns x, y, population.
void write_projection_csv(const std::string& path, const Mat& benign,
                          const Mat& malicious);

}  // namespace blab
