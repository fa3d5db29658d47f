#include "blab/linalg.hpp"

#include <lapacke.h>

#include <algorithm>
#include <cmath>

#include "blab/gemm.hpp"
#include "blab/rng.hpp"
#include "blab/tensor.hpp"

namespace blab {

Mat Mat::take_rows(const std::vector<int>& idx) const {
  Mat out(static_cast<int>(idx.size()), cols);
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy(row(idx[i]), row(idx[i]) + cols, out.row(static_cast<int>(i)));
  return out;
}

std::vector<double> col_mean(const Mat& x) {
  std::vector<double> mu(static_cast<size_t>(x.cols), 0.0);
  for (int i = 0; i < x.rows; ++i) {
    const double* r = x.row(i);
    for (int j = 0; j < x.cols; ++j) mu[static_cast<size_t>(j)] += r[j];
  }
  if (x.rows > 0)
    for (double& v : mu) v /= x.rows;
  return mu;
}

Mat center_rows(const Mat& x, const std::vector<double>& mean) {
  Mat out(x.rows, x.cols);
  for (int i = 0; i < x.rows; ++i)
    for (int j = 0; j < x.cols; ++j) out.at(i, j) = x.at(i, j) - mean[static_cast<size_t>(j)];
  return out;
}

void sym_eig(int n, std::vector<double>& a, std::vector<double>& evals) {
  evals.assign(static_cast<size_t>(n), 0.0);
  int info = LAPACKE_dsyevd(LAPACK_ROW_MAJOR, 'V', 'U', n, a.data(), n, evals.data());
  if (info != 0) fail("sym_eig: dsyevd failed with info " + std::to_string(info));
  // dsyevd returns eigenvectors as columns; transpose so row i is vector i.
  std::vector<double> vt(a.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      vt[static_cast<size_t>(j) * n + i] = a[static_cast<size_t>(i) * n + j];
  a.swap(vt);
}

namespace {

void fix_sign(double* v, int d) {
  int arg = 0;
  double best = std::fabs(v[0]);
  for (int i = 1; i < d; ++i)
    if (std::fabs(v[i]) > best) {
      best = std::fabs(v[i]);
      arg = i;
    }
  if (v[arg] < 0.0)
    for (int i = 0; i < d; ++i) v[i] = -v[i];
}

}  // namespace

PcaBasis pca(const Mat& centered, int k) {
  const int n = centered.rows, d = centered.cols;
  PcaBasis out;
  if (n == 0 || d == 0) return out;
  if (n <= d) {
    // Gram trick: eigenvectors of X X^T map to d-space as X^T u / sqrt(l).
    std::vector<double> gram(static_cast<size_t>(n) * n);
    dgemm(false, true, n, n, d, 1.0, centered.a.data(), d, centered.a.data(), d, 0.0,
          gram.data(), n);
    std::vector<double> evals;
    sym_eig(n, gram, evals);
    int avail = 0;
    for (int i = n - 1; i >= 0; --i)
      if (evals[static_cast<size_t>(i)] > 1e-10) ++avail;
    int kk = std::min(k, avail);
    out.components = Mat(kk, d);
    out.energies.resize(static_cast<size_t>(kk));
    for (int c = 0; c < kk; ++c) {
      int src = n - 1 - c;  // descending
      double lam = evals[static_cast<size_t>(src)];
      out.energies[static_cast<size_t>(c)] = lam;
      const double* u = gram.data() + static_cast<size_t>(src) * n;
      double* v = out.components.row(c);
      // v = X^T u / sqrt(lam)
      dgemm(true, false, d, 1, n, 1.0 / std::sqrt(lam), centered.a.data(), d, u, 1, 0.0,
            v, 1);
      fix_sign(v, d);
    }
  } else {
    std::vector<double> cov(static_cast<size_t>(d) * d);
    dgemm(true, false, d, d, n, 1.0, centered.a.data(), d, centered.a.data(), d, 0.0,
          cov.data(), d);
    std::vector<double> evals;
    sym_eig(d, cov, evals);
    int avail = 0;
    for (int i = d - 1; i >= 0; --i)
      if (evals[static_cast<size_t>(i)] > 1e-10) ++avail;
    int kk = std::min(k, avail);
    out.components = Mat(kk, d);
    out.energies.resize(static_cast<size_t>(kk));
    for (int c = 0; c < kk; ++c) {
      int src = d - 1 - c;
      out.energies[static_cast<size_t>(c)] = evals[static_cast<size_t>(src)];
      double* v = out.components.row(c);
      std::copy(cov.begin() + static_cast<size_t>(src) * d,
                cov.begin() + (static_cast<size_t>(src) + 1) * d, v);
      fix_sign(v, d);
    }
  }
  return out;
}

std::vector<double> top_right_singular_vector(const Mat& centered, uint64_t seed,
                                              int iters) {
  const int n = centered.rows, d = centered.cols;
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(d));
  for (double& x : v) x = rng.normal();
  std::vector<double> xv(static_cast<size_t>(n));
  for (int it = 0; it < iters; ++it) {
    // v <- normalize(X^T (X v))
    dgemm(false, false, n, 1, d, 1.0, centered.a.data(), d, v.data(), 1, 0.0, xv.data(), 1);
    dgemm(true, false, d, 1, n, 1.0, centered.a.data(), d, xv.data(), 1, 0.0, v.data(), 1);
    double nrm = 0.0;
    for (double x : v) nrm += x * x;
    nrm = std::sqrt(nrm);
    if (nrm < 1e-300) return std::vector<double>(static_cast<size_t>(d), 0.0);
    for (double& x : v) x /= nrm;
  }
  fix_sign(v.data(), d);
  return v;
}

Mat pairwise_sqdist_mat(const Mat& x, const Mat& y) {
  if (x.cols != y.cols) fail("pairwise_sqdist_mat: dimension mismatch");
  const int m = x.rows, n = y.rows, d = x.cols;
  Mat out(m, n);
  dgemm(false, true, m, n, d, -2.0, x.a.data(), d, y.a.data(), d, 0.0, out.a.data(), n);
  std::vector<double> xs(static_cast<size_t>(m), 0.0), ys(static_cast<size_t>(n), 0.0);
  for (int i = 0; i < m; ++i)
    for (int k = 0; k < d; ++k) xs[static_cast<size_t>(i)] += x.at(i, k) * x.at(i, k);
  for (int j = 0; j < n; ++j)
    for (int k = 0; k < d; ++k) ys[static_cast<size_t>(j)] += y.at(j, k) * y.at(j, k);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double v = out.at(i, j) + xs[static_cast<size_t>(i)] + ys[static_cast<size_t>(j)];
      out.at(i, j) = v > 0.0 ? v : 0.0;
    }
  return out;
}

double median_pairwise_distance(const Mat& x, const Mat& y) {
  Mat pooled(x.rows + y.rows, x.cols);
  std::copy(x.a.begin(), x.a.end(), pooled.a.begin());
  std::copy(y.a.begin(), y.a.end(), pooled.a.begin() + x.a.size());
  const int n = pooled.rows;
  if (n < 2) return 0.0;
  Mat d2 = pairwise_sqdist_mat(pooled, pooled);
  std::vector<double> dist;
  dist.reserve(static_cast<size_t>(n) * (n - 1) / 2);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) dist.push_back(std::sqrt(d2.at(i, j)));
  size_t mid = (dist.size() - 1) / 2;
  std::nth_element(dist.begin(), dist.begin() + static_cast<long>(mid), dist.end());
  return dist[mid];
}

}  // namespace blab
