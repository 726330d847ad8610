#include "pepdpo/kernels.hpp"

namespace pepdpo::simd {
namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void gemv_scalar(const double* W, std::size_t rows, std::size_t cols,
                 const double* x, const double* b, double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = W + r * cols;
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += row[c] * x[c];
    y[r] = b ? b[r] + s : s;
  }
}

void gemv_t_acc_scalar(const double* W, std::size_t rows, std::size_t cols,
                       const double* dy, double* dx) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double g = dy[r];
    if (g == 0.0) continue;
    const double* row = W + r * cols;
    for (std::size_t c = 0; c < cols; ++c) dx[c] += row[c] * g;
  }
}

void ger_acc_scalar(double* G, std::size_t rows, std::size_t cols,
                    const double* a, const double* x) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double g = a[r];
    if (g == 0.0) continue;
    double* row = G + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += g * x[c];
  }
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

constexpr KernelTable kScalar{Isa::Scalar,      dot_scalar,     gemv_scalar,
                              gemv_t_acc_scalar, ger_acc_scalar, axpy_scalar};

}  // namespace

const KernelTable& scalar_kernels() { return kScalar; }

}  // namespace pepdpo::simd
