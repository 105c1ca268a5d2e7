#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "flatkit/linalg.hpp"
#include "flatkit/matrix.hpp"

namespace flatkit {

/// SmoothQuant-style migration strength and guard.
struct ScalingConfig {
  double alpha = 0.5;
  double epsilon = 1e-5;
};

/// c_j = max|X_j|^alpha / max|W_j|^(1 - alpha), floored at epsilon.
std::vector<double> smooth_scale(std::span<const double> x_absmax, std::span<const double> w_absmax,
                                 const ScalingConfig& cfg = {});

struct DecompositionChoice {
  std::size_t n1 = 1;
  std::size_t n2 = 1;
  /// True when the only split is (1, n): the Kronecker form is a full matrix.
  bool degenerate() const noexcept { return n1 == 1 && n2 > 1; }
};

/// Factor pair n1 * n2 = n with n1 <= n2 minimizing n1 + n2.
DecompositionChoice choose_decomposition(std::size_t n);

struct KronSaving {
  double mem_factor = 1.0;    // n^2 / (n1^2 + n2^2)
  double flops_factor = 1.0;  // n^2 / (n (n1 + n2))
};
KronSaving kron_saving(std::size_t n1, std::size_t n2);

/// Folds a per-channel scaling vector into the layer that produces those channels.
/// `preceding_w` is (out x in); its output channel j is divided by c_j.
Matrix merge_scaling(const Matrix& preceding_w, std::span<const double> c);
/// Same for a normalization gain vector.
std::vector<double> merge_scaling(std::span<const double> norm_gain, std::span<const double> c);

/// One pre-quantization transform for the input of a linear layer. Activations are
/// mapped x -> x diag(c)^{-1} P and the weight absorbs w -> w diag(c) P^{-T}, so the
/// layer output is unchanged before quantization.
class LinearTransform {
 public:
  enum class Kind { Identity, Hadamard, Kronecker, Full };

  LinearTransform() = default;
  static LinearTransform identity() { return {}; }
  static LinearTransform scaling(std::vector<double> c);
  static LinearTransform hadamard(std::size_t n);
  static LinearTransform kronecker(RealizedInvertible p1, RealizedInvertible p2);
  static LinearTransform full(RealizedInvertible p);

  /// Adds a per-channel scaling in front of the transform.
  LinearTransform with_scaling(std::vector<double> c) &&;

  Kind kind() const noexcept { return kind_; }
  const std::optional<std::vector<double>>& scale() const noexcept { return scale_; }
  /// Realized matrices: Hadamard/Full use p1 only; Kronecker uses p1 and p2.
  const RealizedInvertible& p1() const noexcept { return p1_; }
  const RealizedInvertible& p2() const noexcept { return p2_; }

  /// Width the transform accepts; 0 for an unscaled identity (any width).
  std::size_t width() const noexcept;

  Matrix forward(const Matrix& x) const;
  Matrix absorb(const Matrix& w) const;
  /// Same transform with the scaling dropped; pair with merge_scaling on the producer.
  LinearTransform without_scaling() const;

 private:
  Kind kind_ = Kind::Identity;
  std::optional<std::vector<double>> scale_;
  RealizedInvertible p1_;
  RealizedInvertible p2_;
};

}  // namespace flatkit
