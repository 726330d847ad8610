#include "kernels_internal.hpp"

#if defined(__aarch64__) && defined(__ARM_NEON)
#include <arm_neon.h>

namespace pepdpo::simd::detail {
namespace {

inline double dot_neon_impl(const double* a, const double* b, std::size_t n) {
  float64x2_t acc0 = vdupq_n_f64(0.0);
  float64x2_t acc1 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
    acc1 = vfmaq_f64(acc1, vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
  }
  double s = vaddvq_f64(vaddq_f64(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

double dot_neon(const double* a, const double* b, std::size_t n) {
  return dot_neon_impl(a, b, n);
}

void gemv_neon(const double* W, std::size_t rows, std::size_t cols,
               const double* x, const double* b, double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double s = dot_neon_impl(W + r * cols, x, cols);
    y[r] = b ? b[r] + s : s;
  }
}

inline void axpy_neon_impl(double alpha, const double* x, double* y, std::size_t n) {
  const float64x2_t va = vdupq_n_f64(alpha);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), va, vld1q_f64(x + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void gemv_t_acc_neon(const double* W, std::size_t rows, std::size_t cols,
                     const double* dy, double* dx) {
  for (std::size_t r = 0; r < rows; ++r) {
    if (dy[r] == 0.0) continue;
    axpy_neon_impl(dy[r], W + r * cols, dx, cols);
  }
}

void ger_acc_neon(double* G, std::size_t rows, std::size_t cols,
                  const double* a, const double* x) {
  for (std::size_t r = 0; r < rows; ++r) {
    if (a[r] == 0.0) continue;
    axpy_neon_impl(a[r], x, G + r * cols, cols);
  }
}

void axpy_neon(double alpha, const double* x, double* y, std::size_t n) {
  axpy_neon_impl(alpha, x, y, n);
}

constexpr KernelTable kNeon{Isa::Neon,      dot_neon,     gemv_neon,
                            gemv_t_acc_neon, ger_acc_neon, axpy_neon};

}  // namespace

const KernelTable* neon_table() { return &kNeon; }

}  // namespace pepdpo::simd::detail

#else

namespace pepdpo::simd::detail {
const KernelTable* neon_table() { return nullptr; }
}  // namespace pepdpo::simd::detail

#endif
