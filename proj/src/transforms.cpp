#include "flatkit/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "flatkit/error.hpp"

namespace flatkit {

std::vector<double> smooth_scale(std::span<const double> x_absmax, std::span<const double> w_absmax,
                                 const ScalingConfig& cfg) {
  if (x_absmax.size() != w_absmax.size())
    throw DimensionError("smooth_scale: activation and weight statistics differ in length");
  if (cfg.alpha < 0.0 || cfg.alpha > 1.0) throw ConfigError("alpha", "must lie in [0, 1]");
  std::vector<double> c(x_absmax.size());
  for (std::size_t j = 0; j < c.size(); ++j) {
    const double xs = std::pow(x_absmax[j], cfg.alpha);
    const double ws = std::pow(std::max(w_absmax[j], cfg.epsilon), 1.0 - cfg.alpha);
    c[j] = std::max(xs / ws, cfg.epsilon);
  }
  return c;
}

DecompositionChoice choose_decomposition(std::size_t n) {
  if (n == 0) throw DimensionError("choose_decomposition: n must be positive");
  auto n1 = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
  while (n1 * n1 > n) --n1;
  while ((n1 + 1) * (n1 + 1) <= n) ++n1;
  for (; n1 >= 1; --n1)
    if (n % n1 == 0) return {n1, n / n1};
  return {1, n};
}

KronSaving kron_saving(std::size_t n1, std::size_t n2) {
  const double a = static_cast<double>(n1), b = static_cast<double>(n2);
  const double n = a * b;
  return {n * n / (a * a + b * b), n / (a + b)};
}

Matrix merge_scaling(const Matrix& preceding_w, std::span<const double> c) {
  if (c.size() != preceding_w.rows())
    throw DimensionError("merge_scaling: scaling length " + std::to_string(c.size()) +
                         " != producer output width " + std::to_string(preceding_w.rows()));
  std::vector<double> inv(c.size());
  for (std::size_t j = 0; j < c.size(); ++j) {
    if (c[j] == 0.0) throw DimensionError("merge_scaling: zero scaling entry at " + std::to_string(j));
    inv[j] = 1.0 / c[j];
  }
  return scale_rows(preceding_w, inv);
}

std::vector<double> merge_scaling(std::span<const double> norm_gain, std::span<const double> c) {
  if (c.size() != norm_gain.size()) throw DimensionError("merge_scaling: length mismatch");
  std::vector<double> out(c.size());
  for (std::size_t j = 0; j < c.size(); ++j) {
    if (c[j] == 0.0) throw DimensionError("merge_scaling: zero scaling entry at " + std::to_string(j));
    out[j] = norm_gain[j] / c[j];
  }
  return out;
}

LinearTransform LinearTransform::scaling(std::vector<double> c) {
  LinearTransform t;
  t.scale_ = std::move(c);
  return t;
}

LinearTransform LinearTransform::hadamard(std::size_t n) {
  LinearTransform t;
  t.kind_ = Kind::Hadamard;
  Matrix h = flatkit::hadamard(n);
  t.p1_ = {h, h};
  return t;
}

LinearTransform LinearTransform::kronecker(RealizedInvertible p1, RealizedInvertible p2) {
  LinearTransform t;
  t.kind_ = Kind::Kronecker;
  t.p1_ = std::move(p1);
  t.p2_ = std::move(p2);
  return t;
}

LinearTransform LinearTransform::full(RealizedInvertible p) {
  LinearTransform t;
  t.kind_ = Kind::Full;
  t.p1_ = std::move(p);
  return t;
}

LinearTransform LinearTransform::with_scaling(std::vector<double> c) && {
  scale_ = std::move(c);
  return std::move(*this);
}

LinearTransform LinearTransform::without_scaling() const {
  LinearTransform t = *this;
  t.scale_.reset();
  return t;
}

std::size_t LinearTransform::width() const noexcept {
  switch (kind_) {
    case Kind::Identity:
      return scale_ ? scale_->size() : 0;
    case Kind::Hadamard:
    case Kind::Full:
      return p1_.p.rows();
    case Kind::Kronecker:
      return p1_.p.rows() * p2_.p.rows();
  }
  return 0;
}

namespace {

void check_width(const LinearTransform& t, const Matrix& m, const char* what) {
  const std::size_t w = t.width();
  if (w != 0 && m.cols() != w)
    throw DimensionError(std::string(what) + ": width " + std::to_string(m.cols()) +
                         " does not match transform width " + std::to_string(w));
}

}  // namespace

Matrix LinearTransform::forward(const Matrix& x) const {
  check_width(*this, x, "apply_transform_forward");
  Matrix y = x;
  if (scale_) {
    std::vector<double> inv(scale_->size());
    for (std::size_t j = 0; j < inv.size(); ++j) inv[j] = 1.0 / (*scale_)[j];
    y = scale_cols(y, inv);
  }
  switch (kind_) {
    case Kind::Identity:
      return y;
    case Kind::Hadamard:
    case Kind::Full:
      return matmul(y, p1_.p);
    case Kind::Kronecker:
      return kron_apply(y, p1_.p, p2_.p);
  }
  return y;
}

Matrix LinearTransform::absorb(const Matrix& w) const {
  check_width(*this, w, "absorb_transform_into_weight");
  Matrix y = scale_ ? scale_cols(w, *scale_) : w;
  switch (kind_) {
    case Kind::Identity:
      return y;
    case Kind::Hadamard:
    case Kind::Full:
      return matmul_nt(y, p1_.p_inv);
    case Kind::Kronecker:
      return kron_inverse_weights(y, p1_.p_inv, p2_.p_inv);
  }
  return y;
}

}  // namespace flatkit
