#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "flatkit/kernels.hpp"
#include "flatkit/matrix.hpp"

namespace flatkit {

inline Matrix matmul(const Matrix& a, const Matrix& b) { return kernels::matmul(a, b); }
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) { return kernels::matmul_nt(a, b); }
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) { return kernels::matmul_tn(a, b); }

/// Strict upper triangle of a skew-symmetric matrix A (A = -A^T), stored row by row.
struct SkewParam {
  std::size_t dim = 0;
  std::vector<double> upper;

  SkewParam() = default;
  explicit SkewParam(std::size_t n) : dim(n), upper(n * (n - (n > 0 ? 1 : 0)) / 2, 0.0) {}

  static std::size_t param_count(std::size_t n) { return n == 0 ? 0 : n * (n - 1) / 2; }
  /// Materializes A.
  Matrix skew() const;
};

/// Invertible matrix in SVD form P = U diag(exp(log_sigma)) V^T with Cayley-parameterized U, V.
struct SvdInvertible {
  SkewParam u_param;
  SkewParam v_param;
  std::vector<double> log_sigma;

  SvdInvertible() = default;
  explicit SvdInvertible(std::size_t n) : u_param(n), v_param(n), log_sigma(n, 0.0) {}
  std::size_t dim() const noexcept { return log_sigma.size(); }
};

struct RealizedInvertible {
  Matrix p;
  Matrix p_inv;
};

/// Q = (I - A)(I + A)^{-1}; orthogonal for skew-symmetric A.
Matrix cayley(const SkewParam& p);

/// P = U Sigma V^T and P^{-1} = V Sigma^{-1} U^T.
RealizedInvertible realize(const SvdInvertible& p);

/// Normalized Sylvester Hadamard matrix (entries +-1/sqrt(n)); n must be a power of two.
Matrix hadamard(std::size_t n);
bool is_power_of_two(std::size_t n) noexcept;

/// x * (P1 kron P2) via the vectorization identity, never materializing the Kronecker product.
inline Matrix kron_apply(const Matrix& x, const Matrix& p1, const Matrix& p2) {
  return kernels::kron_rows(x, p1, p2);
}

/// Weight-side counterpart: w * (P1 kron P2)^{-T}, given the realized inverses of P1 and P2.
Matrix kron_inverse_weights(const Matrix& w, const Matrix& p1_inv, const Matrix& p2_inv);

/// Explicit Kronecker product, for tests and small sizes.
Matrix kron(const Matrix& a, const Matrix& b);

/// Solves a * x = b for square a by partial-pivot LU. Throws NumericalError on singular a.
Matrix lu_solve(const Matrix& a, const Matrix& b);

/// Lower-triangular L with L L^T = a. Returns false if a is not positive definite.
bool cholesky(const Matrix& a, Matrix& lower);

/// Random near-identity parameters: skew entries ~ N(0, stddev^2), log_sigma = 0.
SkewParam random_skew(std::size_t n, double stddev, std::mt19937_64& rng);
SvdInvertible random_invertible(std::size_t n, double skew_stddev, double log_sigma_range,
                                std::mt19937_64& rng);

Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng);

}  // namespace flatkit
