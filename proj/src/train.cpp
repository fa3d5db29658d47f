#include "blab/train.hpp"

#include <algorithm>
#include <cmath>

#include "blab/csv.hpp"
#include "blab/rng.hpp"
#include "blab/sgd.hpp"

namespace blab {

void TrainConfig::validate() const {
  if (lambda < 0.0) fail("train: lambda must be non-negative");
  if (lambda > 0.0 && levels.empty())
    fail("train: level set must be non-empty when lambda > 0");
  if (epochs < 1 || batch < 1) fail("train: epochs and batch size must be positive");
  kernel.validate();
}

int TrainLog::total_skipped() const {
  int s = 0;
  for (const auto& e : epochs) s += e.skipped;
  return s;
}

namespace {

struct Sample {
  const LabeledImage* img;
  bool malicious;
};

Mat rows_to_mat(const Tensor& flat, const std::vector<int>& idx) {
  Mat m(static_cast<int>(idx.size()), flat.dim(1));
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy(flat.data() + static_cast<size_t>(idx[i]) * flat.dim(1),
              flat.data() + (static_cast<size_t>(idx[i]) + 1) * flat.dim(1),
              m.row(static_cast<int>(i)));
  return m;
}

}  // namespace

TrainLog train(TappedModel& model, const PoisonSplit& split, const Dataset& test,
               const Dataset& asr_test, const TrainConfig& cfg) {
  cfg.validate();
  std::vector<Sample> pool;
  for (const auto& it : split.benign.items) pool.push_back({&it, false});
  for (const auto& it : split.malicious.items) pool.push_back({&it, true});
  if (pool.empty()) fail("train: empty training pool");

  std::vector<Tensor*> params = model.parameters();
  Sgd sgd(params, cfg.momentum, cfg.weight_decay);
  Rng shuffle_rng(derive_seed(cfg.seed, "train-shuffle"));
  const bool regularize = cfg.lambda > 0.0;
  const bool want_taps = regularize || cfg.force_taps;

  TrainLog log;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = scheduled_lr(cfg.lr, cfg.drop_epochs, cfg.drop_factor, epoch);
    shuffle_rng.shuffle(pool);
    double sum_l1 = 0, sum_l2 = 0, sum_l3 = 0;
    int n_l1 = 0, n_l2 = 0, n_l3 = 0, skipped = 0;
    const int n = static_cast<int>(pool.size());
    for (int from = 0, batch_no = 0; from < n; from += cfg.batch, ++batch_no) {
      const int to = std::min(from + cfg.batch, n);
      std::vector<const Tensor*> imgs;
      std::vector<int> idx1, idx2, idx3, y1, y2;
      for (int i = from; i < to; ++i) {
        const Sample& s = pool[static_cast<size_t>(i)];
        imgs.push_back(&s.img->pixels);
        int row = i - from;
        if (s.malicious) {
          idx2.push_back(row);
          y2.push_back(s.img->label);
        } else {
          idx1.push_back(row);
          y1.push_back(s.img->label);
          if (s.img->label == cfg.target) idx3.push_back(row);
        }
      }
      Tape tape;
      std::vector<Var> bound = model.bind(tape);
      Var x = tape.constant(stack_images(imgs, 0, static_cast<int>(imgs.size())));
      auto fw = model.forward(tape, bound, x, true, want_taps);

      Var loss{};
      auto add_term = [&](Var term) { loss = loss.valid() ? tape.add(loss, term) : term; };
      if (!idx1.empty()) {
        Var l1 = tape.softmax_cross_entropy(tape.rows(fw.logits, idx1), y1);
        sum_l1 += tape.val(l1)[0];
        ++n_l1;
        add_term(l1);
      }
      if (!idx2.empty()) {
        Var l2 = tape.softmax_cross_entropy(tape.rows(fw.logits, idx2), y2);
        sum_l2 += tape.val(l2)[0];
        ++n_l2;
        add_term(l2);
      }
      if (regularize) {
        if (!idx2.empty() && static_cast<int>(idx3.size()) >= 2) {
          Var l3{};
          for (int level : cfg.levels) {
            Var tap = fw.taps[static_cast<size_t>(level)];
            const Tensor& tv = tape.val(tap);
            Var flat = tape.reshape(tap, {tv.dim(0), tv.numel() / tv.dim(0)});
            Var fx2 = tape.rows(flat, idx2);
            Var fx3 = tape.rows(flat, idx3);
            // Bandwidths come from the current (detached) activations and are
            // constants of the graph, like the sort permutations.
            std::vector<double> sig = effective_sigmas(
                rows_to_mat(tape.val(flat), idx2), rows_to_mat(tape.val(flat), idx3),
                cfg.kernel);
            Var term = mmd_graph(tape, fx2, fx3, sig);
            l3 = l3.valid() ? tape.add(l3, term) : term;
          }
          l3 = tape.scale(l3, 1.0 / static_cast<double>(cfg.levels.size()));
          sum_l3 += tape.val(l3)[0];
          ++n_l3;
          add_term(tape.scale(l3, cfg.lambda));
        } else {
          ++skipped;
        }
      }
      if (!loss.valid()) fail("train: batch produced no loss terms");
      if (!std::isfinite(tape.val(loss)[0]))
        fail("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
             std::to_string(batch_no));
      tape.backward(loss);
      std::vector<const Tensor*> grads;
      grads.reserve(bound.size());
      for (Var b : bound) grads.push_back(&tape.grad(b));
      sgd.step(params, grads, lr);
    }
    auto [ba, asr] = evaluate(model, test, asr_test, cfg.target);
    EpochLog e;
    e.epoch = epoch;
    e.ba = ba;
    e.asr = asr;
    e.l1 = n_l1 ? sum_l1 / n_l1 : 0.0;
    e.l2 = n_l2 ? sum_l2 / n_l2 : 0.0;
    e.l3 = n_l3 ? sum_l3 / n_l3 : 0.0;
    e.skipped = skipped;
    log.epochs.push_back(e);
  }
  return log;
}

std::pair<double, double> evaluate(TappedModel& model, const Dataset& test,
                                   const Dataset& asr_test, int target) {
  if (test.items.empty() || asr_test.items.empty())
    fail("evaluate: empty evaluation set");
  std::vector<int> pred_t = predict(model, test.image_ptrs());
  int correct = 0;
  for (size_t i = 0; i < pred_t.size(); ++i)
    if (pred_t[i] == test.items[i].label) ++correct;
  std::vector<int> pred_v = predict(model, asr_test.image_ptrs());
  int hits = 0;
  for (int p : pred_v)
    if (p == target) ++hits;
  return {static_cast<double>(correct) / static_cast<double>(pred_t.size()),
          static_cast<double>(hits) / static_cast<double>(pred_v.size())};
}

void write_trainlog_csv(const std::string& path, const TrainLog& log) {
  CsvWriter csv(path, {"epoch", "ba", "asr", "l1", "l2", "l3", "skipped"});
  for (const auto& e : log.epochs)
    csv.row({std::to_string(e.epoch), fmt_g9(e.ba), fmt_g9(e.asr), fmt_g9(e.l1),
             fmt_g9(e.l2), fmt_g9(e.l3), std::to_string(e.skipped)});
}

}  // namespace blab
