#pragma once

#include <cstdint>
#include <vector>

namespace blab {

// Row-major dense matrix of doubles; the feature-set workhorse.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

  double* row(int i) { return a.data() + static_cast<size_t>(i) * cols; }
  const double* row(int i) const { return a.data() + static_cast<size_t>(i) * cols; }
  double& at(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
  double at(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }

  Mat take_rows(const std::vector<int>& idx) const;
};

// Column means of X.
std::vector<double> col_mean(const Mat& x);
// X with the given mean subtracted from every row.
Mat center_rows(const Mat& x, const std::vector<double>& mean);

// Symmetric eigendecomposition, eigenvalues ascending. `a` is n x n row-major
// and is overwritten with eigenvectors (row i of the result = eigenvector i).
void sym_eig(int n, std::vector<double>& a, std::vector<double>& evals);

// Principal components of already-centered rows. Returns k x d matrix of unit
// basis vectors (rows) plus the corresponding singular values squared (the
// energy per component), in descending order. k is capped by the rank.
struct PcaBasis {
  Mat components;                 // k x d
  std::vector<double> energies;   // singular values squared, descending
};
PcaBasis pca(const Mat& centered, int k);

// Top right singular vector of a (centered) matrix via power iteration with a
// deterministic seeded start. Sign fixed so the largest-magnitude entry is
// positive.
std::vector<double> top_right_singular_vector(const Mat& centered, uint64_t seed,
                                              int iters = 300);

// Lower median of all pairwise Euclidean distances between rows of the pooled
// matrix [X; Y]. Returns 0 for fewer than 2 rows.
double median_pairwise_distance(const Mat& x, const Mat& y);

// Pairwise squared-distance matrix (GEMM-backed), entries clamped at 0.
Mat pairwise_sqdist_mat(const Mat& x, const Mat& y);

}  // namespace blab
