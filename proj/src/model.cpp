#include "blab/model.hpp"

#include <algorithm>
#include <cmath>

#include "blab/rng.hpp"

namespace blab {

namespace {

Tensor kaiming_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  double bound = std::sqrt(6.0 / fan_in);
  for (int i = 0; i < t.numel(); ++i) t[static_cast<size_t>(i)] = rng.uniform(-bound, bound);
  return t;
}

constexpr double kBnMomentum = 0.1;

}  // namespace

int TappedModel::add_param(const std::string& name, Tensor t) {
  params_.push_back(std::move(t));
  param_names_.push_back(name);
  return static_cast<int>(params_.size()) - 1;
}

int TappedModel::add_stat(const std::string& name, Tensor t) {
  stats_.push_back(std::move(t));
  stat_names_.push_back(name);
  return static_cast<int>(stats_.size()) - 1;
}

TappedModel::ConvBn TappedModel::make_conv_bn(const std::string& prefix, int ci, int co,
                                              int k, Rng& rng) {
  ConvBn cb;
  cb.w = add_param(prefix + ".w", kaiming_uniform({co, ci, k, k}, ci * k * k, rng));
  cb.bn.gamma = add_param(prefix + ".bn.g", Tensor::full({co}, 1.0));
  cb.bn.beta = add_param(prefix + ".bn.b", Tensor::zeros({co}));
  cb.bn.mean = add_stat("rs." + prefix + ".mean", Tensor::zeros({co}));
  cb.bn.var = add_stat("rs." + prefix + ".var", Tensor::full({co}, 1.0));
  return cb;
}

TappedModel TappedModel::build(const ModelConfig& cfg, uint64_t seed) {
  if (cfg.width < 1) fail("build_model: width multiplier must be >= 1");
  if (cfg.num_classes < 2) fail("build_model: need at least 2 classes");
  if (cfg.in_h % 8 != 0 || cfg.in_w % 8 != 0)
    fail("build_model: input spatial dims must be divisible by 8");
  TappedModel m;
  m.cfg_ = cfg;
  Rng rng(derive_seed(seed, "model-init"));
  const int ch[3] = {32 * cfg.width, 64 * cfg.width, 128 * cfg.width};
  if (cfg.family == Family::PlainConv) {
    int prev = cfg.in_ch;
    for (int s = 0; s < 3; ++s) {
      std::vector<ConvBn> stage;
      for (int c = 0; c < 2; ++c) {
        std::string prefix = "s" + std::to_string(s + 1) + ".c" + std::to_string(c + 1);
        stage.push_back(m.make_conv_bn(prefix, prev, ch[s], 3, rng));
        prev = ch[s];
      }
      m.stages_.push_back(std::move(stage));
      m.tap_channels_[static_cast<size_t>(s)] = ch[s];
    }
  } else {
    m.stem_ = m.make_conv_bn("stem", cfg.in_ch, ch[0], 3, rng);
    int prev = ch[0];
    for (int b = 0; b < 3; ++b) {
      ResBlockInfo blk;
      std::string prefix = "b" + std::to_string(b + 1);
      blk.c1 = m.make_conv_bn(prefix + ".c1", prev, ch[b], 3, rng);
      blk.c2 = m.make_conv_bn(prefix + ".c2", ch[b], ch[b], 3, rng);
      if (prev != ch[b]) blk.proj = m.make_conv_bn(prefix + ".proj", prev, ch[b], 1, rng);
      m.blocks_.push_back(std::move(blk));
      m.tap_channels_[static_cast<size_t>(b)] = ch[b];
      prev = ch[b];
    }
  }
  m.fc_w_ = m.add_param("fc.w", kaiming_uniform({cfg.num_classes, ch[2]}, ch[2], rng));
  m.fc_b_ = m.add_param("fc.b", Tensor::zeros({cfg.num_classes}));
  return m;
}

std::vector<Var> TappedModel::bind(Tape& tape) const {
  std::vector<Var> bound;
  bound.reserve(params_.size());
  for (const Tensor& p : params_) bound.push_back(tape.leaf(p, true));
  return bound;
}

Var TappedModel::run_conv_bn(Tape& tape, const std::vector<Var>& bound, const ConvBn& cb,
                             Var x, bool train, int pad) {
  Var y = tape.conv2d(x, bound[static_cast<size_t>(cb.w)], Var{}, pad);
  if (train)
    return tape.batchnorm_train(y, bound[static_cast<size_t>(cb.bn.gamma)],
                                bound[static_cast<size_t>(cb.bn.beta)],
                                stats_[static_cast<size_t>(cb.bn.mean)],
                                stats_[static_cast<size_t>(cb.bn.var)], kBnMomentum);
  return tape.batchnorm_eval(y, bound[static_cast<size_t>(cb.bn.gamma)],
                             bound[static_cast<size_t>(cb.bn.beta)],
                             stats_[static_cast<size_t>(cb.bn.mean)],
                             stats_[static_cast<size_t>(cb.bn.var)]);
}

TappedModel::Output TappedModel::forward(Tape& tape, const std::vector<Var>& bound, Var x,
                                         bool train, bool want_taps) {
  Output out;
  Var a = x;
  if (cfg_.family == Family::PlainConv) {
    for (size_t s = 0; s < stages_.size(); ++s) {
      for (const ConvBn& cb : stages_[s]) a = tape.relu(run_conv_bn(tape, bound, cb, a, train, 1));
      a = tape.maxpool2x2(a);
      if (!tap_masks_[s].empty()) a = tape.channel_mask(a, tap_masks_[s]);
      if (want_taps) out.taps[s] = a;
    }
  } else {
    a = tape.relu(run_conv_bn(tape, bound, stem_, a, train, 1));
    for (size_t b = 0; b < blocks_.size(); ++b) {
      const ResBlockInfo& blk = blocks_[b];
      Var h = tape.relu(run_conv_bn(tape, bound, blk.c1, a, train, 1));
      h = run_conv_bn(tape, bound, blk.c2, h, train, 1);
      Var sc = blk.proj ? run_conv_bn(tape, bound, *blk.proj, a, train, 0) : a;
      a = tape.relu(tape.add(h, sc));
      a = tape.maxpool2x2(a);
      if (!tap_masks_[b].empty()) a = tape.channel_mask(a, tap_masks_[b]);
      if (want_taps) out.taps[b] = a;
    }
  }
  Var pooled = tape.global_avg_pool(a);
  out.logits = tape.affine(pooled, bound[static_cast<size_t>(fc_w_)],
                           bound[static_cast<size_t>(fc_b_)]);
  return out;
}

TappedModel::Output TappedModel::forward_eval(Tape& tape, Var x, bool want_taps) {
  std::vector<Var> bound;
  bound.reserve(params_.size());
  for (const Tensor& p : params_) bound.push_back(tape.constant(p));
  return forward(tape, bound, x, false, want_taps);
}

std::vector<Tensor*> TappedModel::parameters() {
  std::vector<Tensor*> out;
  out.reserve(params_.size());
  for (Tensor& p : params_) out.push_back(&p);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> TappedModel::named_state() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (size_t i = 0; i < params_.size(); ++i) out.emplace_back(param_names_[i], &params_[i]);
  for (size_t i = 0; i < stats_.size(); ++i) out.emplace_back(stat_names_[i], &stats_[i]);
  return out;
}

void TappedModel::load_state(const std::vector<std::pair<std::string, Tensor>>& entries) {
  size_t applied = 0;
  for (const auto& [name, t] : entries) {
    bool found = false;
    for (size_t i = 0; i < params_.size(); ++i)
      if (param_names_[i] == name) {
        if (!params_[i].same_shape(t))
          fail("load_state: shape mismatch for " + name);
        params_[i] = t;
        found = true;
        break;
      }
    if (!found)
      for (size_t i = 0; i < stats_.size(); ++i)
        if (stat_names_[i] == name) {
          if (!stats_[i].same_shape(t)) fail("load_state: shape mismatch for " + name);
          stats_[i] = t;
          found = true;
          break;
        }
    if (!found) fail("load_state: unknown entry " + name);
    ++applied;
  }
  if (applied != params_.size() + stats_.size())
    fail("load_state: checkpoint does not cover the full model state");
}

void TappedModel::set_tap_mask(int level, Tensor mask) {
  tap_masks_[static_cast<size_t>(level)] = std::move(mask);
}

void TappedModel::clear_tap_masks() {
  for (auto& m : tap_masks_) m = Tensor{};
}

Tensor stack_images(const std::vector<const Tensor*>& images, int from, int to) {
  if (from >= to) fail("stack_images: empty range");
  const Tensor& first = *images[static_cast<size_t>(from)];
  if (first.rank() != 3) fail("stack_images: expected (C,H,W) images");
  int c = first.dim(0), h = first.dim(1), w = first.dim(2);
  Tensor batch({to - from, c, h, w});
  for (int i = from; i < to; ++i) {
    const Tensor& img = *images[static_cast<size_t>(i)];
    if (!img.same_shape(first)) fail("stack_images: inconsistent image shapes");
    std::copy(img.data(), img.data() + img.numel(),
              batch.data() + static_cast<size_t>(i - from) * img.numel());
  }
  return batch;
}

std::vector<int> predict(TappedModel& model, const std::vector<const Tensor*>& images,
                         int batch) {
  std::vector<int> out;
  out.reserve(images.size());
  for (int from = 0; from < static_cast<int>(images.size()); from += batch) {
    int to = std::min<int>(from + batch, static_cast<int>(images.size()));
    Tape tape;
    Var x = tape.constant(stack_images(images, from, to));
    auto fw = model.forward_eval(tape, x, false);
    const Tensor& logits = tape.val(fw.logits);
    for (int i = 0; i < logits.dim(0); ++i) {
      int arg = 0;
      for (int j = 1; j < logits.dim(1); ++j)
        if (logits.at2(i, j) > logits.at2(i, arg)) arg = j;
      out.push_back(arg);
    }
  }
  return out;
}

FeatureExtraction extract_features(TappedModel& model,
                                   const std::vector<const Tensor*>& images,
                                   const std::vector<int>& levels, bool use_gap,
                                   int batch) {
  FeatureExtraction out;
  out.predicted.reserve(images.size());
  const int n = static_cast<int>(images.size());
  for (int from = 0; from < n; from += batch) {
    int to = std::min(from + batch, n);
    Tape tape;
    Var x = tape.constant(stack_images(images, from, to));
    auto fw = model.forward_eval(tape, x, true);
    const Tensor& logits = tape.val(fw.logits);
    for (int i = 0; i < logits.dim(0); ++i) {
      int arg = 0;
      for (int j = 1; j < logits.dim(1); ++j)
        if (logits.at2(i, j) > logits.at2(i, arg)) arg = j;
      out.predicted.push_back(arg);
    }
    for (int lvl : levels) {
      const Tensor& tap = tape.val(fw.taps[static_cast<size_t>(lvl)]);
      int nb = tap.dim(0), c = tap.dim(1), hw = tap.dim(2) * tap.dim(3);
      int d = use_gap ? c : c * hw;
      Mat& dst = out.features[static_cast<size_t>(lvl)];
      if (dst.rows == 0) dst = Mat(n, d);
      for (int i = 0; i < nb; ++i) {
        double* row = dst.row(from + i);
        if (use_gap) {
          for (int ch = 0; ch < c; ++ch) {
            const double* plane = tap.data() + (static_cast<size_t>(i) * c + ch) * hw;
            double s = 0.0;
            for (int k = 0; k < hw; ++k) s += plane[k];
            row[ch] = s / hw;
          }
        } else {
          const double* src = tap.data() + static_cast<size_t>(i) * c * hw;
          std::copy(src, src + static_cast<size_t>(c) * hw, row);
        }
      }
    }
  }
  return out;
}

}  // namespace blab
