#pragma once

#include <cstddef>

namespace nervesynth::detail {

// C = alpha * op(A) . op(B) + beta * C, row-major, single-threaded Eigen
// kernels so that results are reproducible run to run.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          double alpha, const double* a, std::size_t lda, const double* b, std::size_t ldb,
          double beta, double* c, std::size_t ldc);

}  // namespace nervesynth::detail
