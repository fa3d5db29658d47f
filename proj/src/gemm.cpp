#include "blab/gemm.hpp"

#include <cblas.h>
#include <cpuid.h>
#include <malloc.h>

#include <cstdlib>


namespace blab {
namespace {

// Raw CPUID + XGETBV; runs from a priority constructor, so no reliance on
// libgcc's cpu-model init having happened yet.
bool os_supports_xmm_ymm_zmm(bool zmm) {
  unsigned eax, ebx, ecx, edx;
  if (!__get_cpuid(1, &eax, &ebx, &ecx, &edx)) return false;
  if (!(ecx & (1u << 27))) return false;  // OSXSAVE
  unsigned lo, hi;
  __asm__("xgetbv" : "=a"(lo), "=d"(hi) : "c"(0));
  unsigned need = zmm ? 0xe6u : 0x6u;
  return (lo & need) == need;
}

bool cpu_has_avx512f() {
  unsigned eax, ebx, ecx, edx;
  if (__get_cpuid_count(7, 0, &eax, &ebx, &ecx, &edx) == 0) return false;
  return (ebx & (1u << 16)) != 0 && os_supports_xmm_ymm_zmm(true);
}

bool cpu_has_avx2() {
  unsigned eax, ebx, ecx, edx;
  if (__get_cpuid_count(7, 0, &eax, &ebx, &ecx, &edx) == 0) return false;
  return (ebx & (1u << 5)) != 0 && os_supports_xmm_ymm_zmm(false);
}

// OpenBLAS misdetects the CPU in some virtualized environments and falls
// back to a slow generic kernel. Pick the core type from actual ISA support
// before OpenBLAS's own constructor runs core detection (we link the static
// archive, so init order within the binary applies); a user-provided
// OPENBLAS_CORETYPE wins.
// Threads pinned to 1 the same way: run-level parallelism happens above
// BLAS, and single-threaded GEMM keeps results bitwise repeatable.
__attribute__((constructor(101))) void pick_blas_core() {
  if (std::getenv("OPENBLAS_CORETYPE") == nullptr) {
    if (cpu_has_avx512f())
      setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 0);
    else if (cpu_has_avx2())
      setenv("OPENBLAS_CORETYPE", "HASWELL", 0);
  }
  setenv("OPENBLAS_NUM_THREADS", "1", 0);
  // Tensor buffers are tens of MB and reallocated every training step; keep
  // them on the heap instead of per-allocation mmap/munmap, which costs a
  // page-fault sweep on every reuse.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

}  // namespace

void dgemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
           const double* a, int lda, const double* b, int ldb, double beta,
           double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
              ldb, beta, c, ldc);
}

}  // namespace blab
