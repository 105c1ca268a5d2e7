#include "flatkit/linalg.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "flatkit/error.hpp"

namespace flatkit {

Matrix SkewParam::skew() const {
  if (upper.size() != param_count(dim))
    throw DimensionError("SkewParam: expected " + std::to_string(param_count(dim)) +
                         " entries, got " + std::to_string(upper.size()));
  Matrix a(dim, dim);
  std::size_t k = 0;
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = i + 1; j < dim; ++j) {
      a(i, j) = upper[k];
      a(j, i) = -upper[k];
      ++k;
    }
  return a;
}

Matrix cayley(const SkewParam& p) {
  const Matrix a = p.skew();
  const Matrix id = Matrix::identity(p.dim);
  // Q = (I - A)(I + A)^{-1}  <=>  (I + A)^T Q^T = (I - A)^T, and (I + A)^T = I - A.
  const Matrix q_t = lu_solve(id - a, (id - a).transposed());
  return q_t.transposed();
}

RealizedInvertible realize(const SvdInvertible& p) {
  const std::size_t n = p.dim();
  if (p.u_param.dim != n || p.v_param.dim != n)
    throw DimensionError("realize: inconsistent SvdInvertible dimensions");
  const Matrix u = cayley(p.u_param);
  const Matrix v = cayley(p.v_param);
  std::vector<double> sigma(n), sigma_inv(n);
  for (std::size_t i = 0; i < n; ++i) {
    sigma[i] = std::exp(p.log_sigma[i]);
    sigma_inv[i] = std::exp(-p.log_sigma[i]);
  }
  return {matmul_nt(scale_cols(u, sigma), v), matmul_nt(scale_cols(v, sigma_inv), u)};
}

bool is_power_of_two(std::size_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

Matrix hadamard(std::size_t n) {
  if (!is_power_of_two(n))
    throw DimensionError("hadamard: size " + std::to_string(n) + " is not a power of two");
  Matrix h(1, 1, 1.0);
  while (h.rows() < n) {
    const std::size_t m = h.rows();
    Matrix next(2 * m, 2 * m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        next(i, j) = h(i, j);
        next(i, j + m) = h(i, j);
        next(i + m, j) = h(i, j);
        next(i + m, j + m) = -h(i, j);
      }
    h = std::move(next);
  }
  h *= 1.0 / std::sqrt(static_cast<double>(n));
  return h;
}

Matrix kron_inverse_weights(const Matrix& w, const Matrix& p1_inv, const Matrix& p2_inv) {
  return kron_apply(w, p1_inv.transposed(), p2_inv.transposed());
}

Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      for (std::size_t k = 0; k < b.rows(); ++k)
        for (std::size_t l = 0; l < b.cols(); ++l)
          out(i * b.rows() + k, j * b.cols() + l) = a(i, j) * b(k, l);
  return out;
}

Matrix lu_solve(const Matrix& a, const Matrix& b) {
  const std::size_t n = a.rows();
  if (a.cols() != n || b.rows() != n) throw DimensionError("lu_solve: dimension mismatch");
  Matrix lu = a;
  Matrix x = b;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(lu(r, col)) > std::abs(lu(piv, col))) piv = r;
    if (lu(piv, col) == 0.0) throw NumericalError("lu_solve: singular matrix");
    if (piv != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(lu(col, c), lu(piv, c));
      for (std::size_t c = 0; c < x.cols(); ++c) std::swap(x(col, c), x(piv, c));
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = lu(r, col) / lu(col, col);
      if (f == 0.0) continue;
      for (std::size_t c = col; c < n; ++c) lu(r, c) -= f * lu(col, c);
      for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) -= f * x(col, c);
    }
  }
  for (std::size_t ii = n; ii-- > 0;) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      double s = x(ii, c);
      for (std::size_t k = ii + 1; k < n; ++k) s -= lu(ii, k) * x(k, c);
      x(ii, c) = s / lu(ii, ii);
    }
  }
  return x;
}

bool cholesky(const Matrix& a, Matrix& lower) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw DimensionError("cholesky: matrix not square");
  lower = Matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= lower(j, k) * lower(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    const double ljj = std::sqrt(d);
    lower(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= lower(i, k) * lower(j, k);
      lower(i, j) = s / ljj;
    }
  }
  return true;
}

SkewParam random_skew(std::size_t n, double stddev, std::mt19937_64& rng) {
  SkewParam p(n);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : p.upper) v = dist(rng);
  return p;
}

SvdInvertible random_invertible(std::size_t n, double skew_stddev, double log_sigma_range,
                                std::mt19937_64& rng) {
  SvdInvertible p(n);
  p.u_param = random_skew(n, skew_stddev, rng);
  p.v_param = random_skew(n, skew_stddev, rng);
  std::uniform_real_distribution<double> dist(-log_sigma_range, log_sigma_range);
  if (log_sigma_range > 0.0)
    for (double& v : p.log_sigma) v = dist(rng);
  return p;
}

Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  Matrix m(rows, cols);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

}  // namespace flatkit
