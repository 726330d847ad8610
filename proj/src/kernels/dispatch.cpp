#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "kernels_internal.hpp"

namespace pepdpo::simd {
namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable* table_for(Isa isa) {
  switch (isa) {
    case Isa::Scalar:
      return &scalar_kernels();
    case Isa::Avx2:
      return cpu_has_avx2() ? detail::avx2_table() : nullptr;
    case Isa::Neon:
      return detail::neon_table();  // NEON is mandatory on AArch64
  }
  return nullptr;
}

// PEPDPO_ISA=scalar|avx2|neon pins the initial choice.
const KernelTable* initial_table() {
  if (const char* env = std::getenv("PEPDPO_ISA")) {
    const std::string v = env;
    if (v == "scalar") return &scalar_kernels();
    if (v == "avx2" && table_for(Isa::Avx2)) return table_for(Isa::Avx2);
    if (v == "neon" && table_for(Isa::Neon)) return table_for(Isa::Neon);
  }
  return table_for(best_isa());
}

std::atomic<const KernelTable*>& active_slot() {
  static std::atomic<const KernelTable*> slot{initial_table()};
  return slot;
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::Scalar: return "scalar";
    case Isa::Avx2: return "avx2";
    case Isa::Neon: return "neon";
  }
  return "unknown";
}

Isa best_isa() {
  if (table_for(Isa::Avx2)) return Isa::Avx2;
  if (table_for(Isa::Neon)) return Isa::Neon;
  return Isa::Scalar;
}

std::vector<const KernelTable*> available_kernels() {
  std::vector<const KernelTable*> out{&scalar_kernels()};
  for (Isa isa : {Isa::Avx2, Isa::Neon})
    if (const KernelTable* t = table_for(isa)) out.push_back(t);
  return out;
}

const KernelTable& active_kernels() { return *active_slot().load(std::memory_order_relaxed); }

void force_isa(Isa isa) {
  const KernelTable* t = table_for(isa);
  if (!t) throw std::invalid_argument("kernel ISA not available: " + std::string(isa_name(isa)));
  active_slot().store(t, std::memory_order_relaxed);
}

}  // namespace pepdpo::simd
