#include "flatkit/error.hpp"
#include "flatkit/kernels.hpp"

namespace flatkit::reference {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimension mismatch");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t p = 0; p < a.cols(); ++p) {
      const double av = a(i, p);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += av * b(p, j);
    }
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) { return matmul(a, b.transposed()); }

Matrix matmul_tn(const Matrix& a, const Matrix& b) { return matmul(a.transposed(), b); }

Matrix kron_rows(const Matrix& x, const Matrix& p1, const Matrix& p2) {
  const std::size_t n1 = p1.rows(), n2 = p2.rows();
  if (p1.cols() != n1 || p2.cols() != n2 || x.cols() != n1 * n2)
    throw DimensionError("kron_apply: dimension mismatch");
  Matrix out(x.rows(), x.cols());
  Matrix tmp(n1, n2);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    tmp = Matrix(n1, n2);
    for (std::size_t i = 0; i < n1; ++i)
      for (std::size_t p = 0; p < n1; ++p)
        for (std::size_t j = 0; j < n2; ++j) tmp(i, j) += p1(p, i) * x(r, p * n2 + j);
    for (std::size_t i = 0; i < n1; ++i)
      for (std::size_t p = 0; p < n2; ++p)
        for (std::size_t j = 0; j < n2; ++j) out(r, i * n2 + j) += tmp(i, p) * p2(p, j);
  }
  return out;
}

}  // namespace flatkit::reference
