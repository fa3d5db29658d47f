#include "blab/distance.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "blab/csv.hpp"
#include "blab/gemm.hpp"
#include "blab/rng.hpp"

namespace blab {

KernelSpec KernelSpec::parse(const std::string& name, bool median_scale) {
  KernelSpec k;
  k.median_scale = median_scale;
  if (name == "GK1") { k.kind = KernelKind::Gaussian; k.sigmas = {0.5}; }
  else if (name == "GK2") { k.kind = KernelKind::Gaussian; k.sigmas = {1.0}; }
  else if (name == "GK3") { k.kind = KernelKind::Gaussian; k.sigmas = {2.0}; }
  else if (name == "GMK1") { k.kind = KernelKind::GaussianMixture; k.sigmas = {0.5, 1, 2}; }
  else if (name == "GMK2") { k.kind = KernelKind::GaussianMixture; k.sigmas = {0.25, 0.5, 1, 2, 4}; }
  else if (name == "GMK3") { k.kind = KernelKind::GaussianMixture; k.sigmas = {0.125, 0.25, 0.5, 1, 2, 4, 8}; }
  else if (name == "GMK4") { k.kind = KernelKind::GaussianMixture; k.sigmas = {1.0 / 3, 1, 3}; }
  else if (name == "GMK5") { k.kind = KernelKind::GaussianMixture; k.sigmas = {1.0 / 9, 1.0 / 3, 1, 3, 9}; }
  else if (name == "GMK6") { k.kind = KernelKind::GaussianMixture; k.sigmas = {1.0 / 27, 1.0 / 9, 1.0 / 3, 1, 3, 9, 27}; }
  else if (name == "LK") { k.kind = KernelKind::Linear; k.sigmas = {}; k.median_scale = false; }
  else fail("unknown kernel: " + name);
  return k;
}

std::string KernelSpec::name() const {
  auto sig_eq = [&](std::initializer_list<double> ref) {
    if (sigmas.size() != ref.size()) return false;
    size_t i = 0;
    for (double r : ref)
      if (std::fabs(sigmas[i++] - r) > 1e-12) return false;
    return true;
  };
  if (kind == KernelKind::Linear) return "LK";
  if (kind == KernelKind::Gaussian) {
    if (sig_eq({0.5})) return "GK1";
    if (sig_eq({1.0})) return "GK2";
    if (sig_eq({2.0})) return "GK3";
  } else {
    if (sig_eq({0.5, 1, 2})) return "GMK1";
    if (sig_eq({0.25, 0.5, 1, 2, 4})) return "GMK2";
    if (sig_eq({0.125, 0.25, 0.5, 1, 2, 4, 8})) return "GMK3";
    if (sig_eq({1.0 / 3, 1, 3})) return "GMK4";
    if (sig_eq({1.0 / 9, 1.0 / 3, 1, 3, 9})) return "GMK5";
    if (sig_eq({1.0 / 27, 1.0 / 9, 1.0 / 3, 1, 3, 9, 27})) return "GMK6";
  }
  return "custom";
}

void KernelSpec::validate() const {
  if (kind == KernelKind::Linear) return;
  if (sigmas.empty()) fail("kernel: Gaussian kinds need at least one bandwidth");
  for (double s : sigmas)
    if (s <= 0.0) fail("kernel: bandwidths must be positive");
  if (kind == KernelKind::Gaussian && sigmas.size() != 1)
    fail("kernel: plain Gaussian expects exactly one bandwidth");
}

std::vector<double> effective_sigmas(const Mat& x, const Mat& y, const KernelSpec& k) {
  k.validate();
  if (k.kind == KernelKind::Linear) return {};
  double scale = 1.0;
  if (k.median_scale) {
    double med = median_pairwise_distance(x, y);
    scale = med > 1e-12 ? med : 1.0;
  }
  std::vector<double> out;
  out.reserve(k.sigmas.size());
  for (double s : k.sigmas) out.push_back(s * scale);
  return out;
}

namespace {

double mat_mean(const Mat& m) {
  double s = 0.0;
  for (double v : m.a) s += v;
  return m.a.empty() ? 0.0 : s / static_cast<double>(m.a.size());
}

double gram_mean(const Mat& x, const Mat& y) {
  // mean over all pairs of <x_i, y_j> = <mean x, mean y>
  std::vector<double> mx = col_mean(x), my = col_mean(y);
  double s = 0.0;
  for (size_t i = 0; i < mx.size(); ++i) s += mx[i] * my[i];
  return s;
}

}  // namespace

double mmd(const Mat& x, const Mat& y, const KernelSpec& kernel) {
  if (x.cols != y.cols)
    fail("mmd: feature dimension mismatch " + std::to_string(x.cols) + " vs " +
         std::to_string(y.cols));
  if (x.rows < 1 || y.rows < 1) fail("mmd: empty sample set");
  if (kernel.kind == KernelKind::Linear)
    return gram_mean(x, x) + gram_mean(y, y) - 2.0 * gram_mean(x, y);
  std::vector<double> sig = effective_sigmas(x, y, kernel);
  Mat dxx = pairwise_sqdist_mat(x, x);
  Mat dyy = pairwise_sqdist_mat(y, y);
  Mat dxy = pairwise_sqdist_mat(x, y);
  double acc = 0.0;
  for (double s : sig) {
    double inv = -1.0 / (2.0 * s * s);
    double kxx = 0.0, kyy = 0.0, kxy = 0.0;
    for (double v : dxx.a) kxx += std::exp(v * inv);
    for (double v : dyy.a) kyy += std::exp(v * inv);
    for (double v : dxy.a) kxy += std::exp(v * inv);
    kxx /= static_cast<double>(dxx.a.size());
    kyy /= static_cast<double>(dyy.a.size());
    kxy /= static_cast<double>(dxy.a.size());
    acc += kxx + kyy - 2.0 * kxy;
  }
  return acc / static_cast<double>(sig.size());
}

double energy_distance(const Mat& x, const Mat& y) {
  if (x.cols != y.cols)
    fail("energy_distance: feature dimension mismatch " + std::to_string(x.cols) +
         " vs " + std::to_string(y.cols));
  if (x.rows < 1 || y.rows < 1) fail("energy_distance: empty sample set");
  auto mean_norm = [](const Mat& d2) {
    double s = 0.0;
    for (double v : d2.a) s += std::sqrt(v);
    return s / static_cast<double>(d2.a.size());
  };
  double exy = mean_norm(pairwise_sqdist_mat(x, y));
  double exx = mean_norm(pairwise_sqdist_mat(x, x));
  double eyy = mean_norm(pairwise_sqdist_mat(y, y));
  return 2.0 * exy - exx - eyy;
}

double swd(const Mat& x, const Mat& y, int n_projections, uint64_t seed) {
  if (x.cols != y.cols) fail("swd: feature dimension mismatch");
  if (x.rows < 1 || y.rows < 1) fail("swd: empty sample set");
  if (n_projections < 1) fail("swd: need at least one projection");
  const Mat* a = &x;
  const Mat* b = &y;
  Mat sub;
  if (x.rows != y.rows) {
    const Mat& larger = x.rows > y.rows ? x : y;
    const Mat& smaller = x.rows > y.rows ? y : x;
    Rng rng(derive_seed(seed, "swd-subsample"));
    sub = larger.take_rows(rng.sample_without_replacement(larger.rows, smaller.rows));
    a = &sub;
    b = &smaller;
  }
  const int m = a->rows, d = a->cols, np = n_projections;
  Rng rng(derive_seed(seed, "swd-proj"));
  Mat proj(d, np);
  for (int p = 0; p < np; ++p) {
    double nrm = 0.0;
    std::vector<double> g(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) {
      g[static_cast<size_t>(i)] = rng.normal();
      nrm += g[static_cast<size_t>(i)] * g[static_cast<size_t>(i)];
    }
    nrm = std::sqrt(nrm);
    if (nrm < 1e-300) nrm = 1.0;
    for (int i = 0; i < d; ++i) proj.at(i, p) = g[static_cast<size_t>(i)] / nrm;
  }
  Mat pa(m, np), pb(m, np);
  dgemm(false, false, m, np, d, 1.0, a->a.data(), d, proj.a.data(), np, 0.0, pa.a.data(), np);
  dgemm(false, false, m, np, d, 1.0, b->a.data(), d, proj.a.data(), np, 0.0, pb.a.data(), np);
  std::vector<double> ca(static_cast<size_t>(m)), cb(static_cast<size_t>(m));
  double total = 0.0;
  for (int p = 0; p < np; ++p) {
    for (int i = 0; i < m; ++i) {
      ca[static_cast<size_t>(i)] = pa.at(i, p);
      cb[static_cast<size_t>(i)] = pb.at(i, p);
    }
    std::sort(ca.begin(), ca.end());
    std::sort(cb.begin(), cb.end());
    double s = 0.0;
    for (int i = 0; i < m; ++i) s += std::fabs(ca[static_cast<size_t>(i)] - cb[static_cast<size_t>(i)]);
    total += s;
  }
  return total / np;
}

Var mmd_graph(Tape& tape, Var x, Var y, const std::vector<double>& sigma_eff) {
  if (sigma_eff.empty()) {
    Var kxx = tape.mean_all(tape.matmul(x, x, false, true));
    Var kyy = tape.mean_all(tape.matmul(y, y, false, true));
    Var kxy = tape.mean_all(tape.matmul(x, y, false, true));
    return tape.add(tape.add(kxx, kyy), tape.scale(kxy, -2.0));
  }
  Var dxx = tape.pairwise_sqdist(x, x);
  Var dyy = tape.pairwise_sqdist(y, y);
  Var dxy = tape.pairwise_sqdist(x, y);
  Var acc{};
  for (double s : sigma_eff) {
    double inv = -1.0 / (2.0 * s * s);
    Var kxx = tape.mean_all(tape.exp(tape.scale(dxx, inv)));
    Var kyy = tape.mean_all(tape.exp(tape.scale(dyy, inv)));
    Var kxy = tape.mean_all(tape.exp(tape.scale(dxy, inv)));
    Var term = tape.add(tape.add(kxx, kyy), tape.scale(kxy, -2.0));
    acc = acc.valid() ? tape.add(acc, term) : term;
  }
  return tape.scale(acc, 1.0 / static_cast<double>(sigma_eff.size()));
}

namespace {

Mat subsample(const Mat& src, int limit, Rng& rng) {
  if (src.rows <= limit) {
    // Still permute so repeat averages are genuine resamples.
    return src.take_rows(rng.sample_without_replacement(src.rows, src.rows));
  }
  return src.take_rows(rng.sample_without_replacement(src.rows, limit));
}

double eval_metric(const std::string& metric, const Mat& a, const Mat& b,
                   const DistanceOptions& opts, uint64_t cell_seed) {
  if (metric == "mmd") return mmd(a, b, opts.kernel);
  if (metric == "ed") return energy_distance(a, b);
  if (metric == "swd") return swd(a, b, opts.swd_projections, cell_seed);
  fail("unknown metric: " + metric);
}

}  // namespace

DistanceReport difference_report(TappedModel& model,
                                 const std::vector<const Tensor*>& benign,
                                 const std::vector<const Tensor*>& malicious,
                                 const DistanceOptions& opts) {
  DistanceReport report;
  report.aro = {std::nan(""), std::nan(""), std::nan("")};
  FeatureExtraction ext_t = extract_features(model, benign, opts.levels, opts.use_gap);
  FeatureExtraction ext_v = extract_features(model, malicious, opts.levels, opts.use_gap);
  const int k = model.num_classes();
  const int t = opts.target;

  std::array<std::vector<double>, 3> rank_acc;
  for (int level : opts.levels) {
    const Mat& ft = ext_t.features[static_cast<size_t>(level)];
    const Mat& fv = ext_v.features[static_cast<size_t>(level)];
    std::vector<std::vector<int>> by_class(static_cast<size_t>(k));
    for (size_t i = 0; i < ext_t.predicted.size(); ++i)
      by_class[static_cast<size_t>(ext_t.predicted[i])].push_back(static_cast<int>(i));
    std::vector<int> v_rows;
    for (size_t i = 0; i < ext_v.predicted.size(); ++i)
      if (ext_v.predicted[i] == t) v_rows.push_back(static_cast<int>(i));

    Mat zt = ft.take_rows(by_class[static_cast<size_t>(t)]);
    Mat zv = fv.take_rows(v_rows);

    for (size_t mi = 0; mi < opts.metrics.size(); ++mi) {
      const std::string& metric = opts.metrics[mi];
      DistanceCell cell;
      cell.metric = metric;
      cell.level = level;
      if (zt.rows < 4 || zv.rows < 2) {
        cell.missing = true;
        report.notes.push_back(metric + "/s" + std::to_string(level + 1) +
                               ": population too small (|Zt|=" + std::to_string(zt.rows) +
                               ", |Zv|=" + std::to_string(zv.rows) + ")");
        report.cells.push_back(cell);
        continue;
      }
      double cross = 0, intra = 0, inter = 0;
      int valid_reps = 0;
      for (int rep = 0; rep < opts.repeats; ++rep) {
        uint64_t cell_seed = derive_seed(
            opts.seed, "distance-cell",
            (static_cast<uint64_t>(level) * 16 + mi) * 1024 + static_cast<uint64_t>(rep));
        Rng rng(cell_seed);
        Mat a = subsample(zt, opts.sample_size, rng);
        Mat b = subsample(zv, opts.sample_size, rng);
        cross += eval_metric(metric, a, b, opts, cell_seed);
        // intra baseline: two disjoint halves of the benign target class
        std::vector<int> perm = rng.sample_without_replacement(zt.rows, zt.rows);
        int half = std::min(zt.rows / 2, opts.sample_size);
        Mat h1 = zt.take_rows({perm.begin(), perm.begin() + half});
        Mat h2 = zt.take_rows({perm.begin() + half, perm.begin() + 2 * half});
        intra += eval_metric(metric, h1, h2, opts, derive_seed(cell_seed, "intra"));
        double best = std::nan("");
        for (int j = 0; j < k; ++j) {
          if (j == t || static_cast<int>(by_class[static_cast<size_t>(j)].size()) < 2) continue;
          Mat zj = ft.take_rows(by_class[static_cast<size_t>(j)]);
          Mat aj = subsample(zt, opts.sample_size, rng);
          Mat bj = subsample(zj, opts.sample_size, rng);
          double v = eval_metric(metric, aj, bj, opts,
                                 derive_seed(cell_seed, "inter", static_cast<uint64_t>(j)));
          if (std::isnan(best) || v < best) best = v;
        }
        if (std::isnan(best)) break;  // no usable inter-class population
        inter += best;
        ++valid_reps;
      }
      if (valid_reps == 0) {
        cell.missing = true;
        report.notes.push_back(metric + "/s" + std::to_string(level + 1) +
                               ": no usable inter-class population");
        report.cells.push_back(cell);
        continue;
      }
      cell.cross = cross / valid_reps;
      cell.intra = intra / valid_reps;
      cell.inter_min = inter / valid_reps;
      cell.rank = 1 + (cell.intra < cell.cross ? 1 : 0) + (cell.inter_min < cell.cross ? 1 : 0);
      rank_acc[static_cast<size_t>(level)].push_back(cell.rank);
      report.cells.push_back(cell);
    }
  }
  for (int level : opts.levels) {
    const auto& ranks = rank_acc[static_cast<size_t>(level)];
    if (!ranks.empty()) {
      double s = 0;
      for (double r : ranks) s += r;
      report.aro[static_cast<size_t>(level)] = s / static_cast<double>(ranks.size());
    }
  }
  return report;
}

void write_distance_csv(const std::string& path, const DistanceReport& report) {
  CsvWriter csv(path, {"metric", "level", "cross", "intra", "inter_min", "rank", "aro"});
  for (const auto& c : report.cells) {
    std::string lvl = "s" + std::to_string(c.level + 1);
    if (c.missing) {
      csv.row({c.metric, lvl, "", "", "", "missing", ""});
    } else {
      csv.row({c.metric, lvl, fmt_g9(c.cross), fmt_g9(c.intra), fmt_g9(c.inter_min),
               std::to_string(c.rank), ""});
    }
  }
  for (int level = 0; level < 3; ++level) {
    double aro = report.aro[static_cast<size_t>(level)];
    if (!std::isnan(aro))
      csv.row({"ARO", "s" + std::to_string(level + 1), "", "", "", "", fmt_g9(aro)});
  }
}

void write_projection_csv(const std::string& path, const Mat& benign,
                          const Mat& malicious) {
  Mat pooled(benign.rows + malicious.rows, benign.cols);
  std::copy(benign.a.begin(), benign.a.end(), pooled.a.begin());
  std::copy(malicious.a.begin(), malicious.a.end(), pooled.a.begin() + benign.a.size());
  std::vector<double> mu = col_mean(pooled);
  Mat centered = center_rows(pooled, mu);
  PcaBasis basis = pca(centered, 2);
  CsvWriter csv(path, {"x", "y", "population"});
  for (int i = 0; i < pooled.rows; ++i) {
    double x = 0, y = 0;
    if (basis.components.rows > 0)
      for (int j = 0; j < pooled.cols; ++j) x += centered.at(i, j) * basis.components.at(0, j);
    if (basis.components.rows > 1)
      for (int j = 0; j < pooled.cols; ++j) y += centered.at(i, j) * basis.components.at(1, j);
    csv.row({fmt_g9(x), fmt_g9(y), i < benign.rows ? "benign" : "malicious"});
  }
}

}  // namespace blab
