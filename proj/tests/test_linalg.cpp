#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "flatkit/error.hpp"
#include "flatkit/linalg.hpp"
#include "oracles.hpp"

using namespace flatkit;

namespace {

Matrix orthogonality_defect(const Matrix& q) {
  return oracle::naive_matmul(oracle::naive_transpose(q), q) - Matrix::identity(q.rows());
}

}  // namespace

TEST(Cayley, ClosedFormTwoByTwo) {
  for (double a : {-2.0, -0.3, 0.0, 0.1, 1.0, 5.0}) {
    SkewParam p(2);
    p.upper = {a};
    const double d = 1.0 + a * a;
    const Matrix want{{(1 - a * a) / d, -2 * a / d}, {2 * a / d, (1 - a * a) / d}};
    EXPECT_LT(oracle::max_diff(cayley(p), want), 1e-15) << "a=" << a;
  }
}

TEST(Cayley, MatchesDefinitionAndIsOrthogonal) {
  std::mt19937_64 rng(5);
  for (std::size_t n : {1u, 2u, 3u, 8u, 16u, 33u}) {
    const SkewParam p = random_skew(n, 0.7, rng);
    const Matrix a = p.skew();
    EXPECT_LT(oracle::max_abs_entry(a + a.transposed()), 1e-15);
    const Matrix q = cayley(p);
    const Matrix want = oracle::naive_matmul(Matrix::identity(n) - a, oracle::inverse(Matrix::identity(n) + a));
    EXPECT_LT(oracle::max_diff(q, want), 1e-12) << n;
    EXPECT_LT(oracle::max_abs_entry(orthogonality_defect(q)), 1e-12) << n;
  }
  SkewParam zero(6);
  EXPECT_LT(oracle::max_diff(cayley(zero), Matrix::identity(6)), 1e-15);
}

TEST(Cayley, RejectsWrongParameterCount) {
  SkewParam p(4);
  p.upper.pop_back();
  EXPECT_THROW(cayley(p), DimensionError);
}

TEST(SvdInvertible, InverseIsExactInverse) {
  std::mt19937_64 rng(9);
  for (std::size_t n : {1u, 4u, 8u, 17u}) {
    const SvdInvertible s = random_invertible(n, 0.5, 1.0, rng);
    const RealizedInvertible r = realize(s);
    EXPECT_LT(oracle::max_diff(oracle::naive_matmul(r.p, r.p_inv), Matrix::identity(n)), 1e-11);
    EXPECT_LT(oracle::rel_err(r.p_inv, oracle::inverse(r.p)), 1e-10);
    // P = U diag(exp(log_sigma)) V^T
    const Matrix u = cayley(s.u_param), v = cayley(s.v_param);
    std::vector<double> sig(n);
    for (std::size_t i = 0; i < n; ++i) sig[i] = std::exp(s.log_sigma[i]);
    const Matrix want = oracle::naive_matmul(oracle::naive_matmul(u, Matrix::diagonal(sig)), oracle::naive_transpose(v));
    EXPECT_LT(oracle::rel_err(r.p, want), 1e-13);
  }
}

TEST(SvdInvertible, NearIdentityInitialization) {
  std::mt19937_64 rng(2);
  const SvdInvertible s = random_invertible(8, 0.01, 0.0, rng);
  for (double l : s.log_sigma) EXPECT_EQ(l, 0.0);
  EXPECT_LT(oracle::max_diff(realize(s).p, Matrix::identity(8)), 0.1);
}

TEST(Hadamard, OrthogonalWithUnitModulusEntries) {
  for (std::size_t n : {1u, 2u, 4u, 64u, 128u}) {
    const Matrix h = hadamard(n);
    EXPECT_LT(oracle::max_abs_entry(orthogonality_defect(h)), 1e-13);
    for (double v : h.data()) EXPECT_NEAR(std::abs(v), 1.0 / std::sqrt(static_cast<double>(n)), 1e-15);
  }
  EXPECT_THROW(hadamard(12), DimensionError);
  EXPECT_THROW(hadamard(0), DimensionError);
  EXPECT_TRUE(is_power_of_two(1024));
  EXPECT_FALSE(is_power_of_two(0));
  EXPECT_FALSE(is_power_of_two(96));
}

TEST(Kronecker, ExplicitProductMatchesOracle) {
  std::mt19937_64 rng(1);
  const Matrix a = oracle::gaussian(3, 2, rng), b = oracle::gaussian(2, 4, rng);
  EXPECT_EQ(kron(a, b), oracle::explicit_kron(a, b));
}

TEST(Kronecker, ApplyMatchesExplicitProduct) {
  std::mt19937_64 rng(4);
  for (std::size_t n1 = 1; n1 <= 8; ++n1)
    for (std::size_t n2 = 1; n2 <= 8; ++n2) {
      const Matrix x = oracle::gaussian(5, n1 * n2, rng);
      const Matrix p1 = oracle::gaussian(n1, n1, rng), p2 = oracle::gaussian(n2, n2, rng);
      const Matrix want = oracle::naive_matmul(x, oracle::explicit_kron(p1, p2));
      EXPECT_LT(oracle::rel_err(kron_apply(x, p1, p2), want), 1e-12) << n1 << "x" << n2;
    }
}

TEST(Kronecker, InverseWeightsMatchExplicitInverseTranspose) {
  std::mt19937_64 rng(6);
  for (auto [n1, n2] : {std::pair<std::size_t, std::size_t>{2, 3}, {4, 4}, {3, 8}}) {
    const RealizedInvertible a = realize(random_invertible(n1, 0.5, 0.5, rng));
    const RealizedInvertible b = realize(random_invertible(n2, 0.5, 0.5, rng));
    const Matrix w = oracle::gaussian(7, n1 * n2, rng);
    const Matrix pinv_t = oracle::naive_transpose(oracle::inverse(oracle::explicit_kron(a.p, b.p)));
    EXPECT_LT(oracle::rel_err(kron_inverse_weights(w, a.p_inv, b.p_inv), oracle::naive_matmul(w, pinv_t)), 1e-11);
  }
}

TEST(LuSolve, MatchesGaussJordanOracle) {
  std::mt19937_64 rng(8);
  for (std::size_t n : {1u, 3u, 10u, 40u}) {
    const Matrix a = oracle::gaussian(n, n, rng), b = oracle::gaussian(n, 3, rng);
    EXPECT_LT(oracle::rel_err(lu_solve(a, b), oracle::naive_matmul(oracle::inverse(a), b)), 1e-9) << n;
  }
  EXPECT_THROW(lu_solve(Matrix(3, 3), Matrix(3, 1)), NumericalError);
  EXPECT_THROW(lu_solve(Matrix(3, 2), Matrix(3, 1)), DimensionError);
}

TEST(Cholesky, FactorsPositiveDefiniteAndRejectsIndefinite) {
  std::mt19937_64 rng(12);
  const Matrix g = oracle::gaussian(6, 6, rng);
  const Matrix spd = oracle::naive_matmul(g, oracle::naive_transpose(g)) + Matrix::identity(6);
  Matrix l;
  ASSERT_TRUE(cholesky(spd, l));
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = i + 1; j < 6; ++j) EXPECT_EQ(l(i, j), 0.0);
  EXPECT_LT(oracle::rel_err(oracle::naive_matmul(l, oracle::naive_transpose(l)), spd), 1e-13);
  EXPECT_FALSE(cholesky(Matrix{{1, 2}, {2, 1}}, l));
}
