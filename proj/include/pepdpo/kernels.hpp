#pragma once

// Dense double-precision inner loops used by the policy network.
//
// Every kernel has a scalar reference implementation and, where the
// target supports it, a vectorized variant (AVX2+FMA on x86-64, NEON on
// AArch64). The active table is chosen once at startup from the CPU
// feature flags; `force_isa` overrides it (tests, reproducibility runs).
//
// Layout: matrices are row-major, `rows x cols`.

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace pepdpo::simd {

enum class Isa { Scalar, Avx2, Neon };

std::string_view isa_name(Isa isa);

struct KernelTable {
  Isa isa;
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y[r] = b[r] + sum_c W[r, c] x[c]   (b may be null)
  void (*gemv)(const double* W, std::size_t rows, std::size_t cols,
               const double* x, const double* b, double* y);
  // dx[c] += sum_r W[r, c] dy[r]
  void (*gemv_t_acc)(const double* W, std::size_t rows, std::size_t cols,
                     const double* dy, double* dx);
  // G[r, c] += a[r] x[c]
  void (*ger_acc)(double* G, std::size_t rows, std::size_t cols,
                  const double* a, const double* x);
  // y += alpha x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
};

const KernelTable& scalar_kernels();

// Kernel tables compiled into this binary *and* supported by the running CPU.
std::vector<const KernelTable*> available_kernels();

const KernelTable& active_kernels();
Isa best_isa();
void force_isa(Isa isa);  // throws std::invalid_argument when unsupported

// Convenience wrappers over the active table.
inline double dot(std::span<const double> a, std::span<const double> b) {
  return active_kernels().dot(a.data(), b.data(), a.size());
}
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  active_kernels().axpy(alpha, x.data(), y.data(), x.size());
}

}  // namespace pepdpo::simd
