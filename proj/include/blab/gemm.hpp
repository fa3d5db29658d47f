#pragma once

namespace blab {

// Row-major C(MxN) = alpha * op(A) * op(B) + beta * C.
// Single-threaded BLAS underneath; bitwise repeatable for fixed shapes.
void dgemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
           const double* a, int lda, const double* b, int ldb, double beta,
           double* c, int ldc);

}  // namespace blab
