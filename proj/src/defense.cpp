#include "blab/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include "blab/gemm.hpp"
#include "blab/rng.hpp"
#include "blab/sgd.hpp"
#include "blab/tape.hpp"
#include "blab/train.hpp"

namespace blab {

DetectionReport score_predictions(std::vector<uint8_t> predicted,
                                  const std::vector<uint8_t>& truth) {
  if (predicted.size() != truth.size())
    fail("score_predictions: prediction/truth size mismatch");
  int tp = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < truth.size(); ++i) {
    if (predicted[i] && truth[i]) ++tp;
    else if (predicted[i] && !truth[i]) ++fp;
    else if (!predicted[i] && truth[i]) ++fn;
  }
  DetectionReport r;
  r.predicted = std::move(predicted);
  r.precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
  r.recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
  r.f1 = r.precision + r.recall > 0
             ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
             : 0.0;
  return r;
}

namespace {

double total_variance(const Mat& centered) {
  double s = 0.0;
  for (double v : centered.a) s += v * v;
  return s;
}

// Whitened coordinates: project centered rows on the top-k principal axes
// and normalize each to unit variance.
Mat whiten(const Mat& centered, const PcaBasis& basis) {
  const int n = centered.rows, k = basis.components.rows, d = centered.cols;
  Mat z(n, k);
  dgemm(false, true, n, k, d, 1.0, centered.a.data(), d, basis.components.a.data(), d,
        0.0, z.a.data(), k);
  for (int j = 0; j < k; ++j) {
    double sd = std::sqrt(basis.energies[static_cast<size_t>(j)] / n);
    if (sd < 1e-150) sd = 1.0;
    for (int i = 0; i < n; ++i) z.at(i, j) /= sd;
  }
  return z;
}

// Deflation FastICA with tanh contrast on whitened rows (n x k).
// Returns the source matrix (n x k).
Mat fastica(const Mat& z, uint64_t seed, int max_iter = 200, double tol = 1e-4) {
  const int n = z.rows, k = z.cols;
  Rng rng(derive_seed(seed, "fastica-init"));
  Mat w_all(k, k);  // row p = unmixing vector p
  for (int p = 0; p < k; ++p) {
    std::vector<double> w(static_cast<size_t>(k));
    double nrm = 0;
    for (int i = 0; i < k; ++i) {
      w[static_cast<size_t>(i)] = rng.normal();
      nrm += w[static_cast<size_t>(i)] * w[static_cast<size_t>(i)];
    }
    nrm = std::sqrt(nrm);
    for (double& v : w) v /= nrm;
    std::vector<double> w_new(static_cast<size_t>(k));
    for (int it = 0; it < max_iter; ++it) {
      std::fill(w_new.begin(), w_new.end(), 0.0);
      double beta = 0.0;
      for (int i = 0; i < n; ++i) {
        const double* zi = z.row(i);
        double u = 0;
        for (int j = 0; j < k; ++j) u += w[static_cast<size_t>(j)] * zi[j];
        double g = std::tanh(u);
        double gp = 1.0 - g * g;
        for (int j = 0; j < k; ++j) w_new[static_cast<size_t>(j)] += zi[j] * g;
        beta += gp;
      }
      for (int j = 0; j < k; ++j)
        w_new[static_cast<size_t>(j)] =
            w_new[static_cast<size_t>(j)] / n - beta / n * w[static_cast<size_t>(j)];
      // deflation: orthogonalize against the found components
      for (int q = 0; q < p; ++q) {
        double dot = 0;
        for (int j = 0; j < k; ++j) dot += w_new[static_cast<size_t>(j)] * w_all.at(q, j);
        for (int j = 0; j < k; ++j) w_new[static_cast<size_t>(j)] -= dot * w_all.at(q, j);
      }
      double nn = 0;
      for (double v : w_new) nn += v * v;
      nn = std::sqrt(nn);
      if (nn < 1e-150) break;  // direction collapsed; keep previous w
      for (double& v : w_new) v /= nn;
      double conv = 0;
      for (int j = 0; j < k; ++j) conv += w_new[static_cast<size_t>(j)] * w[static_cast<size_t>(j)];
      w.swap(w_new);
      if (std::fabs(std::fabs(conv) - 1.0) < tol) break;
    }
    for (int j = 0; j < k; ++j) w_all.at(p, j) = w[static_cast<size_t>(j)];
  }
  Mat s(n, k);
  dgemm(false, true, n, k, k, 1.0, z.a.data(), k, w_all.a.data(), k, 0.0, s.a.data(), k);
  return s;
}

struct KmeansResult {
  std::vector<uint8_t> assign;
  double sse = 0;
  int size0 = 0, size1 = 0;
  std::vector<double> centroid0, centroid1;
};

KmeansResult kmeans2(const Mat& x, uint64_t seed, int restarts = 10, int max_iter = 100) {
  const int n = x.rows, d = x.cols;
  KmeansResult best;
  best.sse = std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    Rng rng(derive_seed(seed, "kmeans", static_cast<uint64_t>(r)));
    // k-means++ for k = 2
    int c0 = rng.uniform_int(n);
    std::vector<double> d2(static_cast<size_t>(n));
    double total = 0;
    for (int i = 0; i < n; ++i) {
      double s = 0;
      for (int j = 0; j < d; ++j) {
        double diff = x.at(i, j) - x.at(c0, j);
        s += diff * diff;
      }
      d2[static_cast<size_t>(i)] = s;
      total += s;
    }
    int c1 = c0;
    if (total > 0) {
      double u = rng.uniform() * total, acc = 0;
      for (int i = 0; i < n; ++i) {
        acc += d2[static_cast<size_t>(i)];
        if (acc >= u) { c1 = i; break; }
      }
    } else {
      c1 = rng.uniform_int(n);
    }
    std::vector<std::vector<double>> cen(2, std::vector<double>(static_cast<size_t>(d)));
    for (int j = 0; j < d; ++j) {
      cen[0][static_cast<size_t>(j)] = x.at(c0, j);
      cen[1][static_cast<size_t>(j)] = x.at(c1, j);
    }
    std::vector<uint8_t> assign(static_cast<size_t>(n), 0);
    for (int it = 0; it < max_iter; ++it) {
      bool changed = false;
      for (int i = 0; i < n; ++i) {
        double s0 = 0, s1 = 0;
        for (int j = 0; j < d; ++j) {
          double a = x.at(i, j) - cen[0][static_cast<size_t>(j)];
          double b = x.at(i, j) - cen[1][static_cast<size_t>(j)];
          s0 += a * a;
          s1 += b * b;
        }
        uint8_t na = s1 < s0 ? 1 : 0;
        if (na != assign[static_cast<size_t>(i)]) {
          assign[static_cast<size_t>(i)] = na;
          changed = true;
        }
      }
      if (!changed && it > 0) break;
      int cnt[2] = {0, 0};
      for (auto& c : cen) std::fill(c.begin(), c.end(), 0.0);
      for (int i = 0; i < n; ++i) {
        int a = assign[static_cast<size_t>(i)];
        ++cnt[a];
        for (int j = 0; j < d; ++j) cen[static_cast<size_t>(a)][static_cast<size_t>(j)] += x.at(i, j);
      }
      for (int c = 0; c < 2; ++c)
        if (cnt[c] > 0)
          for (int j = 0; j < d; ++j) cen[static_cast<size_t>(c)][static_cast<size_t>(j)] /= cnt[c];
    }
    double sse = 0;
    int cnt[2] = {0, 0};
    for (int i = 0; i < n; ++i) {
      int a = assign[static_cast<size_t>(i)];
      ++cnt[a];
      for (int j = 0; j < d; ++j) {
        double diff = x.at(i, j) - cen[static_cast<size_t>(a)][static_cast<size_t>(j)];
        sse += diff * diff;
      }
    }
    if (sse < best.sse) {
      best.sse = sse;
      best.assign = assign;
      best.size0 = cnt[0];
      best.size1 = cnt[1];
      best.centroid0 = cen[0];
      best.centroid1 = cen[1];
    }
  }
  return best;
}

}  // namespace

DetectionReport activation_clustering(const DetectionInput& input, uint64_t seed) {
  const int n = input.features.rows;
  if (n < 10) fail("activation_clustering: need at least 10 samples");
  std::vector<double> mu = col_mean(input.features);
  Mat centered = center_rows(input.features, mu);
  if (total_variance(centered) < 1e-18) {
    DetectionReport r = score_predictions(std::vector<uint8_t>(static_cast<size_t>(n), 0),
                                          input.truth);
    r.flags = "degenerate";
    return r;
  }
  PcaBasis basis = pca(centered, 20);
  std::string flags;
  if (basis.components.rows < 20)
    flags = "reduced-rank-" + std::to_string(basis.components.rows);
  Mat z = whiten(centered, basis);
  Mat s = fastica(z, seed);
  KmeansResult km = kmeans2(s, derive_seed(seed, "ac-kmeans"));
  // smaller cluster = malicious; break size ties toward the cluster whose
  // centroid sits farther out (whitened space is zero-mean)
  int mal_cluster;
  if (km.size0 != km.size1) {
    mal_cluster = km.size0 < km.size1 ? 0 : 1;
  } else {
    double n0 = 0, n1 = 0;
    for (double v : km.centroid0) n0 += v * v;
    for (double v : km.centroid1) n1 += v * v;
    mal_cluster = n0 >= n1 ? 0 : 1;
  }
  std::vector<uint8_t> pred(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    pred[static_cast<size_t>(i)] = km.assign[static_cast<size_t>(i)] == mal_cluster ? 1 : 0;
  DetectionReport r = score_predictions(std::move(pred), input.truth);
  r.flags = flags;
  return r;
}

DetectionReport spectral_signatures(const DetectionInput& input,
                                    double removal_multiplier) {
  const int n = input.features.rows;
  if (n < 10) fail("spectral_signatures: need at least 10 samples");
  std::vector<double> mu = col_mean(input.features);
  Mat centered = center_rows(input.features, mu);
  std::vector<double> v = top_right_singular_vector(centered, 0x5353);
  std::vector<double> score(static_cast<size_t>(n), 0.0);
  double max_score = 0;
  for (int i = 0; i < n; ++i) {
    double dot = 0;
    for (int j = 0; j < centered.cols; ++j) dot += centered.at(i, j) * v[static_cast<size_t>(j)];
    score[static_cast<size_t>(i)] = dot * dot;
    max_score = std::max(max_score, score[static_cast<size_t>(i)]);
  }
  std::vector<uint8_t> pred(static_cast<size_t>(n), 0);
  if (max_score > 1e-18) {
    double expected_mal = n * input.r_prime / (1.0 + input.r_prime);
    int k = static_cast<int>(std::lround(removal_multiplier * expected_mal));
    k = std::min(k, n);
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return score[static_cast<size_t>(a)] > score[static_cast<size_t>(b)];
    });
    for (int i = 0; i < k; ++i) pred[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
  }
  return score_predictions(std::move(pred), input.truth);
}

DetectionReport subspace_reconstruction(const DetectionInput& input,
                                        const Mat& validation, double energy) {
  if (validation.rows < 2) fail("subspace_reconstruction: validation set too small");
  if (validation.cols != input.features.cols)
    fail("subspace_reconstruction: validation feature dimension mismatch");
  std::vector<double> mu = col_mean(validation);
  Mat vc = center_rows(validation, mu);
  const double total = total_variance(vc);
  PcaBasis basis = pca(vc, std::min(validation.rows, validation.cols));
  int k = 0;
  double acc = 0;
  while (k < basis.components.rows && acc < energy * total) {
    acc += basis.energies[static_cast<size_t>(k)];
    ++k;
  }
  if (k == 0) k = basis.components.rows > 0 ? 1 : 0;
  const int n = input.features.rows, d = input.features.cols;
  Mat centered = center_rows(input.features, mu);
  std::vector<double> loss(static_cast<size_t>(n), 0.0);
  if (k > 0) {
    Mat proj(n, k);
    dgemm(false, true, n, k, d, 1.0, centered.a.data(), d, basis.components.a.data(), d,
          0.0, proj.a.data(), k);
    Mat recon(n, d);
    dgemm(false, false, n, d, k, 1.0, proj.a.data(), k, basis.components.a.data(), d,
          0.0, recon.a.data(), d);
    for (int i = 0; i < n; ++i) {
      double s = 0;
      for (int j = 0; j < d; ++j) {
        double diff = centered.at(i, j) - recon.at(i, j);
        s += diff * diff;
      }
      loss[static_cast<size_t>(i)] = std::sqrt(s);
    }
  } else {
    for (int i = 0; i < n; ++i) {
      double s = 0;
      for (int j = 0; j < d; ++j) s += centered.at(i, j) * centered.at(i, j);
      loss[static_cast<size_t>(i)] = std::sqrt(s);
    }
  }
  // threshold sweep: malicious = loss > tau, over every distinct loss value
  // plus the flag-everything cut
  std::vector<double> taus = loss;
  std::sort(taus.begin(), taus.end());
  taus.erase(std::unique(taus.begin(), taus.end()), taus.end());
  double best_f1 = -1;
  std::vector<uint8_t> best_pred;
  auto eval_tau = [&](double tau, bool all) {
    std::vector<uint8_t> pred(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
      pred[static_cast<size_t>(i)] = all || loss[static_cast<size_t>(i)] > tau ? 1 : 0;
    DetectionReport r = score_predictions(std::move(pred), input.truth);
    if (r.f1 > best_f1) {
      best_f1 = r.f1;
      best_pred = r.predicted;
    }
  };
  eval_tau(0.0, true);
  for (double tau : taus) eval_tau(tau, false);
  return score_predictions(std::move(best_pred), input.truth);
}

SynthesizedTrigger synthesize_trigger(TappedModel& model,
                                      const std::vector<const Tensor*>& validation,
                                      int target_class, double gamma, int steps,
                                      uint64_t seed, double lr, int batch) {
  if (validation.empty()) fail("synthesize_trigger: empty validation set");
  const Tensor& proto = *validation[0];
  const int c = proto.dim(0), h = proto.dim(1), w = proto.dim(2);
  Rng rng(derive_seed(seed, "nc-init", static_cast<uint64_t>(target_class)));
  Tensor theta_m({h, w}), theta_b({c, h, w});
  for (int i = 0; i < theta_m.numel(); ++i) theta_m[static_cast<size_t>(i)] = 0.1 * rng.normal();
  for (int i = 0; i < theta_b.numel(); ++i) theta_b[static_cast<size_t>(i)] = 0.1 * rng.normal();

  std::vector<Tensor*> params = {&theta_m, &theta_b};
  Sgd sgd(params, 0.9, 0.0);
  std::vector<int> order(validation.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(derive_seed(seed, "nc-shuffle", static_cast<uint64_t>(target_class)));
  shuffle_rng.shuffle(order);
  size_t cursor = 0;
  double last_ce = 0;
  for (int step = 0; step < steps; ++step) {
    std::vector<const Tensor*> imgs;
    for (int i = 0; i < batch; ++i) {
      if (cursor >= order.size()) {
        cursor = 0;
        shuffle_rng.shuffle(order);
      }
      imgs.push_back(validation[static_cast<size_t>(order[cursor++])]);
    }
    Tape tape;
    Var tm = tape.leaf(theta_m, true);
    Var tb = tape.leaf(theta_b, true);
    Var m = tape.sigmoid(tm);
    Var b = tape.sigmoid(tb);
    Var x = tape.constant(stack_images(imgs, 0, static_cast<int>(imgs.size())));
    Var fused = tape.mask_patch(x, m, b);
    auto fw = model.forward_eval(tape, fused, false);
    std::vector<int> labels(imgs.size(), target_class);
    Var ce = tape.softmax_cross_entropy(fw.logits, labels);
    last_ce = tape.val(ce)[0];
    Var loss = tape.add(ce, tape.scale(tape.sum(m), gamma));
    tape.backward(loss);
    std::vector<const Tensor*> grads = {&tape.grad(tm), &tape.grad(tb)};
    sgd.step(params, grads, lr);
  }
  SynthesizedTrigger out;
  out.mask = Tensor({h, w});
  for (int i = 0; i < out.mask.numel(); ++i) {
    out.mask[static_cast<size_t>(i)] = 1.0 / (1.0 + std::exp(-theta_m[static_cast<size_t>(i)]));
    out.l1 += std::fabs(out.mask[static_cast<size_t>(i)]);
  }
  out.pattern = Tensor({c, h, w});
  for (int i = 0; i < out.pattern.numel(); ++i)
    out.pattern[static_cast<size_t>(i)] = 1.0 / (1.0 + std::exp(-theta_b[static_cast<size_t>(i)]));
  out.final_ce = last_ce;
  out.converged = last_ce <= std::log(static_cast<double>(model.num_classes()));
  return out;
}

TriggerScan nc_scan(TappedModel& model, const std::vector<const Tensor*>& validation,
                    double gamma, int steps, uint64_t seed, double lr, int batch,
                    int jobs) {
  const int k = model.num_classes();
  TriggerScan scan;
  scan.per_class.resize(static_cast<size_t>(k));
  if (jobs < 1) jobs = 1;
  std::vector<std::thread> workers;
  std::atomic_int next{0};
  auto work = [&]() {
    for (;;) {
      int cls = next.fetch_add(1);
      if (cls >= k) return;
      // The model is only read here; per-class synthesis owns its own tapes.
      scan.per_class[static_cast<size_t>(cls)] =
          synthesize_trigger(model, validation, cls, gamma, steps, seed, lr, batch);
    }
  };
  if (jobs == 1) {
    work();
  } else {
    for (int i = 0; i < jobs; ++i) workers.emplace_back(work);
    for (auto& th : workers) th.join();
  }
  std::vector<double> l1(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) l1[static_cast<size_t>(i)] = scan.per_class[static_cast<size_t>(i)].l1;
  std::vector<double> sorted = l1;
  std::sort(sorted.begin(), sorted.end());
  scan.median_l1 = sorted[(sorted.size() - 1) / 2];
  std::vector<double> dev;
  dev.reserve(l1.size());
  for (double v : l1) dev.push_back(std::fabs(v - scan.median_l1));
  std::sort(dev.begin(), dev.end());
  scan.mad = dev[(dev.size() - 1) / 2];
  scan.flagged.assign(static_cast<size_t>(k), 0);
  if (scan.mad > 1e-12) {
    for (int i = 0; i < k; ++i)
      if ((scan.median_l1 - l1[static_cast<size_t>(i)]) / (1.4826 * scan.mad) > 2.0)
        scan.flagged[static_cast<size_t>(i)] = 1;
  }
  return scan;
}

std::vector<PrunePoint> neuron_prune(TappedModel& model, const TriggerSpec& trigger,
                                     const Dataset& benign_test, const Dataset& asr_test,
                                     int target, const std::vector<double>& fractions) {
  constexpr int kLevel = 2;  // s3
  model.clear_tap_masks();
  std::vector<const Tensor*> benign_imgs = benign_test.image_ptrs();
  std::vector<Tensor> triggered;
  triggered.reserve(benign_test.items.size());
  for (const auto& item : benign_test.items)
    triggered.push_back(apply_trigger(item.pixels, trigger));
  std::vector<const Tensor*> trig_ptrs;
  trig_ptrs.reserve(triggered.size());
  for (const auto& t : triggered) trig_ptrs.push_back(&t);

  FeatureExtraction fb = extract_features(model, benign_imgs, {kLevel}, true);
  FeatureExtraction fm = extract_features(model, trig_ptrs, {kLevel}, true);
  const Mat& gb = fb.features[kLevel];
  const Mat& gm = fm.features[kLevel];
  const int channels = gb.cols;
  std::vector<double> diff(static_cast<size_t>(channels), 0.0);
  for (int ch = 0; ch < channels; ++ch) {
    double mb = 0, mm = 0;
    for (int i = 0; i < gb.rows; ++i) mb += gb.at(i, ch);
    for (int i = 0; i < gm.rows; ++i) mm += gm.at(i, ch);
    diff[static_cast<size_t>(ch)] = mm / gm.rows - mb / gb.rows;
  }
  std::vector<int> order(static_cast<size_t>(channels));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return diff[static_cast<size_t>(a)] > diff[static_cast<size_t>(b)];
  });

  std::vector<PrunePoint> curve;
  for (double p : fractions) {
    int zeroed = static_cast<int>(std::lround(p * channels));
    zeroed = std::min(zeroed, channels);
    Tensor mask = Tensor::full({channels}, 1.0);
    for (int i = 0; i < zeroed; ++i) mask[static_cast<size_t>(order[static_cast<size_t>(i)])] = 0.0;
    model.set_tap_mask(kLevel, std::move(mask));
    auto [ba, asr] = evaluate(model, benign_test, asr_test, target);
    curve.push_back({p, ba, asr});
  }
  model.clear_tap_masks();
  return curve;
}

}  // namespace blab
