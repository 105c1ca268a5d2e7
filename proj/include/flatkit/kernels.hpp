#pragma once

// Dense kernels in two builds: `kernels` is the OpenMP-parallel production path,
// `reference` is the serial path kept for testing and benchmarking. Both use the
// same accumulation order, so their results are bit-identical for any thread count.

#include "flatkit/matrix.hpp"

namespace flatkit {

namespace kernels {

Matrix matmul(const Matrix& a, const Matrix& b);
/// a * b^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// Each row of x, viewed row-major as an n1 x n2 block V, becomes vec(P1^T V P2).
Matrix kron_rows(const Matrix& x, const Matrix& p1, const Matrix& p2);

}  // namespace kernels

namespace reference {

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix kron_rows(const Matrix& x, const Matrix& p1, const Matrix& p2);

}  // namespace reference

/// Applies FLATKIT_THREADS (if set) as the OpenMP thread cap. Returns the active cap.
int configure_threads_from_env();
int max_threads();

}  // namespace flatkit
