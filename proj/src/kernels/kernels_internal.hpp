#pragma once

#include "pepdpo/kernels.hpp"

namespace pepdpo::simd::detail {

// Null when the variant was not compiled for this target.
const KernelTable* avx2_table();
const KernelTable* neon_table();

}  // namespace pepdpo::simd::detail
