#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "blab/data.hpp"
#include "blab/distance.hpp"
#include "blab/model.hpp"

namespace blab {

// lambda = 0 is regular backdoor training; lambda > 0 adds the multi-level
// MMD regularizer over the tap levels in `levels`.
struct TrainConfig {
  int epochs = 30;
  int batch = 64;
  double lr = 0.01;
  std::vector<int> drop_epochs = {15, 23};
  double drop_factor = 0.1;
  double lambda = 0.0;
  std::vector<int> levels = {0, 1, 2};
  KernelSpec kernel;
  int target = 0;
  uint64_t seed = 0;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  // Observe taps even when the regularizer is off; taps are pure
  // observations and must not change training.
  bool force_taps = false;

  void validate() const;
};

struct EpochLog {
  int epoch = 0;
  double ba = 0, asr = 0;
  double l1 = 0, l2 = 0, l3 = 0;
  int skipped = 0;  // batches where the regularizer had no usable X2/X3
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  int total_skipped() const;
};

// Mini-batch training over the concatenated set D u U: per batch the rows
// are partitioned into benign (X1), malicious (X2) and benign-target (X3);
// the loss is mean CE on X1 plus mean CE on X2 plus lambda times the mean
// over levels of mmd(taps(X2), taps(X3)). Batches lacking X2 or with fewer
// than two X3 rows skip the regularizer and are counted.
TrainLog train(TappedModel& model, const PoisonSplit& split, const Dataset& test,
               const Dataset& asr_test, const TrainConfig& cfg);

// (BA, ASR): accuracy on the benign test set and the fraction of the
// triggered set predicted as the target class.
std::pair<double, double> evaluate(TappedModel& model, const Dataset& test,
                                   const Dataset& asr_test, int target);

void write_trainlog_csv(const std::string& path, const TrainLog& log);

}  // namespace blab
