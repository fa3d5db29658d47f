#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "blab/linalg.hpp"
#include "blab/rng.hpp"
#include "blab/tape.hpp"
#include "blab/tensor.hpp"

namespace blab {

enum class Family { PlainConv, Residual };

struct ModelConfig {
  Family family = Family::PlainConv;
  int width = 1;
  int num_classes = 10;
  int in_ch = 3;
  int in_h = 32;
  int in_w = 32;
};

// Convolutional classifier exposing three tap levels s1, s2, s3: the
// activations after each stage (plain family) or residual block, always
// post-pool, with s3 the last hidden representation before global pooling
// and the classifier head.
class TappedModel {
 public:
  static TappedModel build(const ModelConfig& cfg, uint64_t seed);

  struct Output {
    Var logits;
    std::array<Var, 3> taps;  // invalid Vars unless taps were requested
  };

  // Copies parameters into the tape as differentiable leaves, in
  // parameter-registry order.
  std::vector<Var> bind(Tape& tape) const;
  Output forward(Tape& tape, const std::vector<Var>& bound, Var x, bool train,
                 bool want_taps);
  // Eval-mode forward with parameters as constants; gradients can still flow
  // to the input (used by trigger synthesis).
  Output forward_eval(Tape& tape, Var x, bool want_taps);

  // Batch-norm running statistics are updated in place by train-mode
  // forwards; this hook lets the trainer apply gradients back.
  std::vector<Tensor*> parameters();
  const std::vector<std::string>& parameter_names() const { return param_names_; }
  std::vector<std::pair<std::string, const Tensor*>> named_state() const;
  void load_state(const std::vector<std::pair<std::string, Tensor>>& entries);

  // Per-level channel mask applied at the tap point (and downstream); an
  // empty tensor disables masking. Used by neuron pruning.
  void set_tap_mask(int level, Tensor mask);
  void clear_tap_masks();

  const ModelConfig& config() const { return cfg_; }
  int num_classes() const { return cfg_.num_classes; }
  int tap_channels(int level) const { return tap_channels_[static_cast<size_t>(level)]; }

 private:
  struct BnInfo {
    int gamma = -1, beta = -1;  // indices into params_
    int mean = -1, var = -1;    // indices into stats_
  };
  struct ConvBn {
    int w = -1;  // index into params_
    BnInfo bn;
  };
  struct ResBlockInfo {
    ConvBn c1, c2;
    std::optional<ConvBn> proj;
  };

  int add_param(const std::string& name, Tensor t);
  int add_stat(const std::string& name, Tensor t);
  ConvBn make_conv_bn(const std::string& prefix, int ci, int co, int k, Rng& rng);
  Var run_conv_bn(Tape& tape, const std::vector<Var>& bound, const ConvBn& cb, Var x,
                  bool train, int pad);

  ModelConfig cfg_;
  std::vector<Tensor> params_;
  std::vector<std::string> param_names_;
  mutable std::vector<Tensor> stats_;
  std::vector<std::string> stat_names_;

  std::vector<std::vector<ConvBn>> stages_;  // plain family
  ConvBn stem_;                              // residual family
  std::vector<ResBlockInfo> blocks_;
  int fc_w_ = -1, fc_b_ = -1;
  std::array<Tensor, 3> tap_masks_;
  std::array<int, 3> tap_channels_ = {0, 0, 0};
};

// Eval-mode predictions for a list of images (each (C,H,W)).
std::vector<int> predict(TappedModel& model, const std::vector<const Tensor*>& images,
                         int batch = 128);

// Flattened tap activations (row per sample, batch order preserved) plus
// predictions, extracted in eval mode. With use_gap, rows are
// channel-averaged instead of fully flattened.
struct FeatureExtraction {
  std::array<Mat, 3> features;  // only requested levels filled
  std::vector<int> predicted;
};
FeatureExtraction extract_features(TappedModel& model,
                                   const std::vector<const Tensor*>& images,
                                   const std::vector<int>& levels, bool use_gap = false,
                                   int batch = 128);

Tensor stack_images(const std::vector<const Tensor*>& images, int from, int to);

}  // namespace blab
