#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "blab/data.hpp"
#include "blab/linalg.hpp"
#include "blab/model.hpp"

namespace blab {

// Latent features for N samples all predicted as the target class; truth
// flags are held out for scoring only.
struct DetectionInput {
  Mat features;
  std::vector<uint8_t> truth;
  double r_prime = 1.0;  // malicious : benign ratio
};

struct DetectionReport {
  std::vector<uint8_t> predicted;
  double precision = 0, recall = 0, f1 = 0;
  std::string flags;  // "degenerate", "reduced-rank-K", ... comma separated
};

// Malicious = positive. Zero scores when there are no positives either way.
DetectionReport score_predictions(std::vector<uint8_t> predicted,
                                  const std::vector<uint8_t>& truth);

// FastICA to 20 components (PCA whitening, deflation, tanh contrast, 200
// iterations max, tolerance 1e-4), k-means with k=2 (k-means++ init, 10
// restarts), smaller cluster flagged malicious.
DetectionReport activation_clustering(const DetectionInput& input, uint64_t seed);

// Outlier scores from the top right singular vector of the centered feature
// matrix; the top round(multiplier * expected malicious count) scores are
// flagged.
DetectionReport spectral_signatures(const DetectionInput& input,
                                    double removal_multiplier = 1.5);

// PCA subspace keeping 90% of the validation energy; per-sample loss is the
// l2 reconstruction residual; F1 maximized over thresholds at every distinct
// loss value.
DetectionReport subspace_reconstruction(const DetectionInput& input,
                                        const Mat& validation, double energy = 0.9);

struct SynthesizedTrigger {
  Tensor mask;     // (H,W) in [0,1]
  Tensor pattern;  // (C,H,W) in [0,1]
  double l1 = 0;
  bool converged = true;
  double final_ce = 0;
};

// Reverse-engineers a trigger steering the model toward `target_class`:
// minimizes mean CE(f((1-m) x + m b), class) + gamma |m|_1 over squashed
// (m, b) with SGD-momentum.
SynthesizedTrigger synthesize_trigger(TappedModel& model,
                                      const std::vector<const Tensor*>& validation,
                                      int target_class, double gamma, int steps,
                                      uint64_t seed, double lr = 0.1, int batch = 16);

struct TriggerScan {
  std::vector<SynthesizedTrigger> per_class;
  std::vector<uint8_t> flagged;  // MAD rule: (median - l1) / (1.4826 MAD) > 2
  double median_l1 = 0, mad = 0;
};

TriggerScan nc_scan(TappedModel& model, const std::vector<const Tensor*>& validation,
                    double gamma, int steps, uint64_t seed, double lr = 0.1,
                    int batch = 16, int jobs = 1);

struct PrunePoint {
  double fraction = 0, ba = 0, asr = 0;
};

// Ranks s3 tap channels by mean activation difference (triggered minus
// benign, eval mode) and zeroes the top fraction, tracking BA/ASR. The
// model's tap masks are restored afterwards.
std::vector<PrunePoint> neuron_prune(TappedModel& model, const TriggerSpec& trigger,
                                     const Dataset& benign_test, const Dataset& asr_test,
                                     int target, const std::vector<double>& fractions);

}  // namespace blab
