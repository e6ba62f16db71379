#pragma once

#include <cstddef>

namespace mmctp {

/**
 * Row-major general matrix multiply:
 *
 *   C = alpha * op(A) @ op(B) + beta * C
 *
 * where op(X) is X or X^T depending on the trans flags. A is m x k after
 * op, B is k x n after op, C is m x n. Leading dimensions are row strides
 * of the stored (untransposed) matrices.
 *
 * Dispatches to OpenBLAS dgemm when the shared library can be loaded at
 * runtime, otherwise to a built-in blocked kernel. Products too small to
 * amortize a BLAS call always take the built-in path. Both paths run on a
 * single thread so results are reproducible run to run.
 *
 * Set MMCTP_NO_BLAS=1 in the environment to force the built-in kernel.
 */
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          double alpha, const double* a, std::size_t lda, const double* b,
          std::size_t ldb, double beta, double* c, std::size_t ldc);

/** True when the OpenBLAS backend is active (diagnostic only). */
bool gemm_uses_blas();

}  // namespace mmctp
