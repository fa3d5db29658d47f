#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "blab/tensor.hpp"

namespace blab {

struct LabeledImage {
  Tensor pixels;  // (C,H,W), values in [0,1]
  int label = 0;
  bool malicious = false;
  int origin_label = 0;  // class before poisoning
};

struct Dataset {
  std::vector<LabeledImage> items;
  int num_classes = 10;
  int height = 32, width = 32, channels = 3;

  std::vector<const Tensor*> image_ptrs() const;
  std::vector<int> labels() const;
};

struct SynthConfig {
  uint64_t seed = 1;
  int n_per_class = 30;
  int num_classes = 10;
  int height = 32, width = 32, channels = 3;
};

// Procedurally generated class-distinct images: per class a distinct base
// hue and a distinct shape (disk, square, triangle, ring, bars at six
// angles), additive noise sigma=0.05, balanced, split train/test 5:1.
std::pair<Dataset, Dataset> synth_dataset(const SynthConfig& cfg);

// Extra samples of a single class from an independent stream; used to build
// measurement and detection pools without touching the train/test split.
std::vector<LabeledImage> synth_class_samples(uint64_t seed, int cls, int count,
                                              const SynthConfig& proto);

enum class TriggerKind { Patched, Blended, Sig, Warped };

struct TriggerSpec {
  TriggerKind kind = TriggerKind::Patched;
  // Patched
  Tensor mask;     // (H,W), binary
  Tensor patch;    // (C,H,W)
  // Blended
  Tensor blend;    // (C,H,W)
  double alpha = 0.2;
  // SIG
  double sig_delta = 0.08;
  int sig_freq = 6;
  // Warped: dense flow (2,H,W) precomputed from the control grid
  Tensor warp_flow;

  struct Params {
    int patch_size = 3;
    double alpha = 0.2;
    double sig_delta = 0.08;
    int sig_freq = 6;
    int warp_grid = 4;
    double warp_strength = 0.5;
  };
  static TriggerSpec make(TriggerKind kind, int h, int w, int c, uint64_t seed,
                          const Params& p);
  static TriggerSpec make(TriggerKind kind, int h, int w, int c, uint64_t seed) {
    return make(kind, h, w, c, seed, Params());
  }
  void validate(int h, int w, int c) const;
};

TriggerKind trigger_kind_from_string(const std::string& s);
std::string to_string(TriggerKind k);

// Fuses the trigger into an image; output clamped to [0,1].
Tensor apply_trigger(const Tensor& pixels, const TriggerSpec& spec);

struct PoisonSplit {
  Dataset benign;     // D, unchanged
  Dataset malicious;  // U, triggered copies relabeled to the target
  double ratio = 0.0;
};

// U = triggered copies of round(r*|D|) training images drawn uniformly from
// the samples whose origin label differs from the target.
PoisonSplit poison_split(const Dataset& train, const TriggerSpec& spec, int target,
                         double ratio, uint64_t seed);

// V: triggered copies of all test images whose origin label differs from the
// target.
Dataset build_asr_testset(const Dataset& test, const TriggerSpec& spec, int target);

// Binary dataset file: magic "BDAT", version u32, count u32, H u16, W u16,
// C u8, K u8, then per image label u8, malicious u8, pixels u8 row-major
// (H,W,C interleaved), converted to float/255 on load.
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

// Standard CIFAR-10 binary batches (3073-byte records).
Dataset load_cifar10(const std::vector<std::string>& batch_paths);

}  // namespace blab
