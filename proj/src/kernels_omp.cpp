#include <omp.h>

#include <cstdlib>
#include <string>

#include "flatkit/error.hpp"
#include "flatkit/kernels.hpp"

namespace flatkit {

namespace {

constexpr std::size_t kParallelWork = 1u << 15;

void check_matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

void check_kron(const Matrix& x, const Matrix& p1, const Matrix& p2) {
  if (p1.rows() != p1.cols() || p2.rows() != p2.cols())
    throw DimensionError("kron_apply: factors must be square");
  if (x.cols() != p1.rows() * p2.rows())
    throw DimensionError("kron_apply: width " + std::to_string(x.cols()) + " != " +
                         std::to_string(p1.rows()) + "*" + std::to_string(p2.rows()));
}

}  // namespace

namespace kernels {

Matrix matmul(const Matrix& a, const Matrix& b) {
  check_matmul(a, b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Matrix out(m, n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelWork)
  for (long i = 0; i < rows; ++i) {
    double* orow = po + static_cast<std::size_t>(i) * n;
    const double* arow = pa + static_cast<std::size_t>(i) * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) { return matmul(a, b.transposed()); }

Matrix matmul_tn(const Matrix& a, const Matrix& b) { return matmul(a.transposed(), b); }

Matrix kron_rows(const Matrix& x, const Matrix& p1, const Matrix& p2) {
  check_kron(x, p1, p2);
  const std::size_t n1 = p1.rows(), n2 = p2.rows();
  Matrix out(x.rows(), x.cols());
  const long rows = static_cast<long>(x.rows());
#pragma omp parallel for schedule(static) if (x.rows() * x.cols() * (n1 + n2) > kParallelWork)
  for (long r = 0; r < rows; ++r) {
    std::vector<double> tmp(n1 * n2, 0.0);
    const double* v = x.data().data() + static_cast<std::size_t>(r) * x.cols();
    // tmp = P1^T V
    for (std::size_t i = 0; i < n1; ++i) {
      for (std::size_t p = 0; p < n1; ++p) {
        const double coef = p1(p, i);
        const double* vrow = v + p * n2;
        double* trow = tmp.data() + i * n2;
        for (std::size_t j = 0; j < n2; ++j) trow[j] += coef * vrow[j];
      }
    }
    // out = tmp P2
    double* o = out.data().data() + static_cast<std::size_t>(r) * x.cols();
    for (std::size_t i = 0; i < n1; ++i) {
      const double* trow = tmp.data() + i * n2;
      double* orow = o + i * n2;
      for (std::size_t p = 0; p < n2; ++p) {
        const double coef = trow[p];
        const double* prow = p2.data().data() + p * n2;
        for (std::size_t j = 0; j < n2; ++j) orow[j] += coef * prow[j];
      }
    }
  }
  return out;
}

}  // namespace kernels

int configure_threads_from_env() {
  if (const char* env = std::getenv("FLATKIT_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end != env && n > 0) omp_set_num_threads(static_cast<int>(n));
  }
  return omp_get_max_threads();
}

int max_threads() { return omp_get_max_threads(); }

}  // namespace flatkit
