// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.
// Keep this translation unit free of inline library templates so no
// AVX2-encoded copy of a shared symbol can leak into scalar callers.

#include "kernels_internal.hpp"

#if defined(__x86_64__) && defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>

namespace pepdpo::simd::detail {
namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

inline double dot_avx2_impl(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4)
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  return dot_avx2_impl(a, b, n);
}

void gemv_avx2(const double* W, std::size_t rows, std::size_t cols,
               const double* x, const double* b, double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double s = dot_avx2_impl(W + r * cols, x, cols);
    y[r] = b ? b[r] + s : s;
  }
}

inline void axpy_avx2_impl(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void gemv_t_acc_avx2(const double* W, std::size_t rows, std::size_t cols,
                     const double* dy, double* dx) {
  for (std::size_t r = 0; r < rows; ++r) {
    if (dy[r] == 0.0) continue;
    axpy_avx2_impl(dy[r], W + r * cols, dx, cols);
  }
}

void ger_acc_avx2(double* G, std::size_t rows, std::size_t cols,
                  const double* a, const double* x) {
  for (std::size_t r = 0; r < rows; ++r) {
    if (a[r] == 0.0) continue;
    axpy_avx2_impl(a[r], x, G + r * cols, cols);
  }
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  axpy_avx2_impl(alpha, x, y, n);
}

constexpr KernelTable kAvx2{Isa::Avx2,      dot_avx2,     gemv_avx2,
                            gemv_t_acc_avx2, ger_acc_avx2, axpy_avx2};

}  // namespace

const KernelTable* avx2_table() { return &kAvx2; }

}  // namespace pepdpo::simd::detail

#else

namespace pepdpo::simd::detail {
const KernelTable* avx2_table() { return nullptr; }
}  // namespace pepdpo::simd::detail

#endif
