#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flatkit/matrix.hpp"

namespace flatkit {

enum class Scheme { Symmetric, Asymmetric };

/// Quantization axis. Tensors are laid out so every granularity is row-oriented:
/// weights are (out x in), so per-channel means one scale per row; activations are
/// (tokens x channels), so per-token is also one scale per row; per-group splits each
/// row into contiguous groups of `group_size`.
enum class Granularity { PerChannel, PerToken, PerGroup };

struct QuantSpec {
  int bits = 4;
  Scheme scheme = Scheme::Symmetric;
  Granularity granularity = Granularity::PerToken;
  std::size_t group_size = 0;
  double clip_ratio = 1.0;

  /// Throws ConfigError on bits < 2, clip_ratio outside (0, 1], or a zero group size.
  void validate() const;
  std::string describe() const;

  static QuantSpec weights(int bits) {
    return {bits, Scheme::Symmetric, Granularity::PerChannel, 0, 1.0};
  }
  static QuantSpec activations(int bits) {
    return {bits, Scheme::Symmetric, Granularity::PerToken, 0, 1.0};
  }
  static QuantSpec kv(int bits, std::size_t head_dim) {
    return {bits, Scheme::Asymmetric, Granularity::PerGroup, head_dim, 1.0};
  }
};

/// Symmetric integer codes live in [-2^(b-1), 2^(b-1)-1]; asymmetric codes in [0, 2^b-1].
int code_min(const QuantSpec& spec);
int code_max(const QuantSpec& spec);

/// Round half away from zero.
inline double round_half_away(double v) { return std::round(v); }

/// Smooth stand-in for rounding used by gradient checks: continuously differentiable,
/// agrees with rounding at integers, and sharpens toward it as temperature grows.
double soft_round(double u, double temperature);
double soft_round_grad(double u, double temperature);

/// Min-max fake quantizer over one contiguous slice. The forward pass is shared by the
/// plain tensor path and the gradient tape, so both produce identical values.
///
/// Symmetric: range = clip * max|x|, step = range / (2^(b-1) - 1).
/// Asymmetric: lo = clip * min x, range = clip * (max x - min x), step = range / (2^b - 1),
/// dequantized value = lo + code * step. Zero-range slices are returned unchanged.
struct SliceQuantizer {
  int bits = 4;
  Scheme scheme = Scheme::Symmetric;
  /// 0 selects hard rounding with the straight-through backward rule.
  double soft_round_temperature = 0.0;

  void forward(std::span<const double> x, double clip, std::span<double> y) const;

  /// Accumulates dL/dx into gx and returns dL/dclip. Rounding passes gradient straight
  /// through inside the code range and blocks it outside; the step size stays
  /// differentiable through both the clip ratio and the slice extrema.
  double backward(std::span<const double> x, double clip, std::span<const double> g,
                  std::span<double> gx) const;

  /// Step size the forward pass would use.
  double step(std::span<const double> x, double clip) const;
};

/// Quantize-dequantize along the spec's granularity with the given clip ratio.
Matrix fake_quant(const Matrix& x, const QuantSpec& spec, double clip);
inline Matrix fake_quant(const Matrix& x, const QuantSpec& spec) {
  return fake_quant(x, spec, spec.clip_ratio);
}

/// Group-wise asymmetric KV fake quantization. Requires PerGroup granularity whose group
/// size divides the width.
Matrix quant_kv(const Matrix& head_tensor, const QuantSpec& spec);

struct QuantizedTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> codes;
  /// One per quantization slice. All-zero slices carry the sentinel scale 1.
  std::vector<double> scales;
  /// Real-valued offsets (asymmetric only; empty otherwise).
  std::vector<double> offsets;
  QuantSpec spec;

  Matrix dequantize() const;
};

/// Round-to-nearest per-channel quantization of a weight matrix.
QuantizedTensor rtn_quantize(const Matrix& w, const QuantSpec& spec);

struct GptqOptions {
  std::size_t block_size = 8;
  double damping = 0.01;
  int max_damping_retries = 4;
  /// Quantize columns in descending order of their Hessian diagonal.
  bool act_order = true;
};

/// Hessian-compensated column-sequential rounding (GPTQ) with H = 2 X^T X. Scales are
/// fixed to the RTN per-channel scales of `w`. Throws NumericalError if the damped
/// Hessian stays indefinite after all retries.
QuantizedTensor gptq_quantize(const Matrix& w, const Matrix& x_calib, const QuantSpec& spec,
                              const GptqOptions& opts = {});

/// ||X W^T - X W_hat^T||_F^2
double proxy_loss(const Matrix& x, const Matrix& w, const Matrix& w_hat);

/// Sigmoid of a clip logit; the effective clipping ratio in (0, 1).
double clip_threshold(double theta);
double clip_logit(double ratio);

}  // namespace flatkit
