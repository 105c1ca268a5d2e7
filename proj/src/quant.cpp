#include "flatkit/quant.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "flatkit/error.hpp"
#include "flatkit/linalg.hpp"

namespace flatkit {

void QuantSpec::validate() const {
  if (bits < 2 || bits > 16) throw ConfigError("bits", "must be in [2, 16], got " + std::to_string(bits));
  if (!(clip_ratio > 0.0 && clip_ratio <= 1.0))
    throw ConfigError("clip_ratio", "must lie in (0, 1], got " + std::to_string(clip_ratio));
  if (granularity == Granularity::PerGroup && group_size == 0)
    throw ConfigError("group_size", "per-group quantization needs a positive group size");
}

std::string QuantSpec::describe() const {
  std::string g = granularity == Granularity::PerChannel ? "per_channel"
                  : granularity == Granularity::PerToken ? "per_token"
                                                         : "per_group(" + std::to_string(group_size) + ")";
  return "int" + std::to_string(bits) + (scheme == Scheme::Symmetric ? " sym " : " asym ") + g;
}

int code_min(const QuantSpec& spec) {
  return spec.scheme == Scheme::Symmetric ? -(1 << (spec.bits - 1)) : 0;
}

int code_max(const QuantSpec& spec) {
  return spec.scheme == Scheme::Symmetric ? (1 << (spec.bits - 1)) - 1 : (1 << spec.bits) - 1;
}

double soft_round(double u, double temperature) {
  const double base = std::floor(u);
  const double r = u - base - 0.5;
  return base + 0.5 + std::tanh(temperature * r) / (2.0 * std::tanh(temperature / 2.0));
}

double soft_round_grad(double u, double temperature) {
  const double r = u - std::floor(u) - 0.5;
  const double t = std::tanh(temperature * r);
  return temperature * (1.0 - t * t) / (2.0 * std::tanh(temperature / 2.0));
}

namespace {

struct SliceGrid {
  double lo = 0.0;     // dequantized value of code 0 (asymmetric) or 0 (symmetric)
  double range = 0.0;  // lo + levels * step spans the clipped range
  double levels = 1.0;
  double qmin = 0.0;
  double qmax = 0.0;
  std::size_t arg_hi = 0;  // index of max |x| (sym) or max x (asym)
  std::size_t arg_lo = 0;  // index of min x (asym)
  double x_hi = 0.0;
  double x_lo = 0.0;
};

SliceGrid make_grid(std::span<const double> x, int bits, Scheme scheme, double clip) {
  SliceGrid g;
  if (x.empty()) return g;
  if (scheme == Scheme::Symmetric) {
    for (std::size_t i = 0; i < x.size(); ++i)
      if (std::abs(x[i]) > std::abs(x[g.arg_hi])) g.arg_hi = i;
    g.x_hi = std::abs(x[g.arg_hi]);
    g.levels = static_cast<double>((1 << (bits - 1)) - 1);
    g.qmin = -static_cast<double>(1 << (bits - 1));
    g.qmax = g.levels;
    g.range = clip * g.x_hi;
  } else {
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] > x[g.arg_hi]) g.arg_hi = i;
      if (x[i] < x[g.arg_lo]) g.arg_lo = i;
    }
    g.x_hi = x[g.arg_hi];
    g.x_lo = x[g.arg_lo];
    g.levels = static_cast<double>((1 << bits) - 1);
    g.qmin = 0.0;
    g.qmax = g.levels;
    g.lo = clip * g.x_lo;
    g.range = clip * g.x_hi - g.lo;
  }
  return g;
}

}  // namespace

double SliceQuantizer::step(std::span<const double> x, double clip) const {
  const SliceGrid g = make_grid(x, bits, scheme, clip);
  return g.range > 0.0 ? g.range / g.levels : 1.0;
}

void SliceQuantizer::forward(std::span<const double> x, double clip, std::span<double> y) const {
  const SliceGrid g = make_grid(x, bits, scheme, clip);
  if (!(g.range > 0.0)) {
    std::copy(x.begin(), x.end(), y.begin());
    return;
  }
  const double inv_step = g.levels / g.range;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double u = std::clamp((x[i] - g.lo) * inv_step, g.qmin, g.qmax);
    const double q = soft_round_temperature > 0.0 ? soft_round(u, soft_round_temperature)
                                                  : round_half_away(u);
    y[i] = g.lo + (q / g.levels) * g.range;
  }
}

double SliceQuantizer::backward(std::span<const double> x, double clip, std::span<const double> g,
                                std::span<double> gx) const {
  const SliceGrid grid = make_grid(x, bits, scheme, clip);
  if (!(grid.range > 0.0)) {
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[i];
    return 0.0;
  }
  const double inv_step = grid.levels / grid.range;
  double g_range = 0.0;
  double g_lo = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double u = (x[i] - grid.lo) * inv_step;
    if (u >= grid.qmin && u <= grid.qmax) {
      double r = 0.0, dr = 1.0;
      if (soft_round_temperature > 0.0) {
        r = soft_round(u, soft_round_temperature);
        dr = soft_round_grad(u, soft_round_temperature);
      } else {
        r = round_half_away(u);
      }
      gx[i] += g[i] * dr;
      g_range += g[i] * (r - u * dr) / grid.levels;
      g_lo += g[i] * (1.0 - dr);
    } else {
      const double q = u < grid.qmin ? grid.qmin : grid.qmax;
      g_range += g[i] * q / grid.levels;
      g_lo += g[i];
    }
  }
  if (scheme == Scheme::Symmetric) {
    // range = clip * |x[arg_hi]|
    const double sign = x[grid.arg_hi] >= 0.0 ? 1.0 : -1.0;
    gx[grid.arg_hi] += g_range * clip * sign;
    return g_range * grid.x_hi;
  }
  // hi = clip * max, lo = clip * min, range = hi - lo
  const double g_hi = g_range;
  const double g_lo_total = g_lo - g_range;
  gx[grid.arg_hi] += g_hi * clip;
  gx[grid.arg_lo] += g_lo_total * clip;
  return g_hi * grid.x_hi + g_lo_total * grid.x_lo;
}

namespace {

std::size_t slice_width(const Matrix& x, const QuantSpec& spec) {
  if (spec.granularity != Granularity::PerGroup) return x.cols();
  if (spec.group_size == 0 || x.cols() % spec.group_size != 0)
    throw DimensionError("quantization group size " + std::to_string(spec.group_size) +
                         " does not divide width " + std::to_string(x.cols()));
  return spec.group_size;
}

}  // namespace

Matrix fake_quant(const Matrix& x, const QuantSpec& spec, double clip) {
  const std::size_t width = slice_width(x, spec);
  const SliceQuantizer sq{spec.bits, spec.scheme, 0.0};
  Matrix y(x.rows(), x.cols());
  if (width == 0) return y;
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c0 = 0; c0 < x.cols(); c0 += width)
      sq.forward(x.row(r).subspan(c0, width), clip, y.row(r).subspan(c0, width));
  return y;
}

Matrix quant_kv(const Matrix& head_tensor, const QuantSpec& spec) {
  if (spec.granularity != Granularity::PerGroup)
    throw DimensionError("quant_kv: KV quantization requires per-group granularity");
  return fake_quant(head_tensor, spec);
}

Matrix QuantizedTensor::dequantize() const {
  Matrix out(rows, cols);
  const std::size_t width = spec.granularity == Granularity::PerGroup ? spec.group_size : cols;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t slice = r * (cols / width) + c / width;
      const double base = offsets.empty() ? 0.0 : offsets[slice];
      out(r, c) = base + scales[slice] * codes[r * cols + c];
    }
  return out;
}

namespace {

/// Per-slice scale/offset that RTN would use; sentinel scale 1 for zero-range slices.
void rtn_grid(std::span<const double> x, const QuantSpec& spec, double& scale, double& offset) {
  const SliceGrid g = make_grid(x, spec.bits, spec.scheme, spec.clip_ratio);
  if (g.range > 0.0) {
    scale = g.range / g.levels;
    offset = g.lo;
  } else {
    scale = 1.0;
    offset = spec.scheme == Scheme::Asymmetric && !x.empty() ? x[0] : 0.0;
  }
}

std::int32_t encode(double v, double scale, double offset, const QuantSpec& spec) {
  const double u = std::clamp((v - offset) / scale, static_cast<double>(code_min(spec)),
                              static_cast<double>(code_max(spec)));
  return static_cast<std::int32_t>(round_half_away(u));
}

}  // namespace

QuantizedTensor rtn_quantize(const Matrix& w, const QuantSpec& spec) {
  const std::size_t width = slice_width(w, spec);
  QuantizedTensor qt;
  qt.rows = w.rows();
  qt.cols = w.cols();
  qt.spec = spec;
  qt.codes.resize(w.size());
  const bool asym = spec.scheme == Scheme::Asymmetric;
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c0 = 0; c0 < w.cols(); c0 += width) {
      double scale = 1.0, offset = 0.0;
      rtn_grid(w.row(r).subspan(c0, width), spec, scale, offset);
      qt.scales.push_back(scale);
      if (asym) qt.offsets.push_back(offset);
      for (std::size_t c = c0; c < c0 + width; ++c)
        qt.codes[r * w.cols() + c] = encode(w(r, c), scale, offset, spec);
    }
  return qt;
}

namespace {

Matrix lower_triangular_inverse(const Matrix& l) {
  const std::size_t n = l.rows();
  Matrix inv(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    inv(j, j) = 1.0 / l(j, j);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = j; k < i; ++k) s -= l(i, k) * inv(k, j);
      inv(i, j) = s / l(i, i);
    }
  }
  return inv;
}

}  // namespace

QuantizedTensor gptq_quantize(const Matrix& w, const Matrix& x_calib, const QuantSpec& spec,
                              const GptqOptions& opts) {
  if (x_calib.cols() != w.cols())
    throw DimensionError("gptq_quantize: calibration width " + std::to_string(x_calib.cols()) +
                         " != weight width " + std::to_string(w.cols()));
  if (spec.granularity == Granularity::PerGroup)
    throw DimensionError("gptq_quantize: per-group weight quantization is not supported");
  const std::size_t rows = w.rows(), n = w.cols();

  if (opts.act_order) {
    std::vector<double> diag(n, 0.0);
    for (std::size_t r = 0; r < x_calib.rows(); ++r)
      for (std::size_t j = 0; j < n; ++j) diag[j] += x_calib(r, j) * x_calib(r, j);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::stable_sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) { return diag[a] > diag[b]; });
    Matrix wp(rows, n), xp(x_calib.rows(), n);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t r = 0; r < rows; ++r) wp(r, j) = w(r, perm[j]);
      for (std::size_t r = 0; r < x_calib.rows(); ++r) xp(r, j) = x_calib(r, perm[j]);
    }
    GptqOptions in_order = opts;
    in_order.act_order = false;
    QuantizedTensor qp = gptq_quantize(wp, xp, spec, in_order);
    QuantizedTensor qt = qp;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < n; ++j) qt.codes[r * n + perm[j]] = qp.codes[r * n + j];
    return qt;
  }

  QuantizedTensor qt = rtn_quantize(w, spec);
  Matrix work = w;
  Matrix h = matmul_tn(x_calib, x_calib);
  h *= 2.0;
  for (std::size_t i = 0; i < n; ++i)
    if (h(i, i) == 0.0) {
      h(i, i) = 1.0;
      for (std::size_t r = 0; r < rows; ++r) work(r, i) = 0.0;
    }
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_diag += h(i, i);
  mean_diag /= static_cast<double>(n);

  double damp = opts.damping * mean_diag;
  Matrix lower;
  bool ok = false;
  for (int attempt = 0; attempt <= opts.max_damping_retries; ++attempt) {
    Matrix hd = h;
    for (std::size_t i = 0; i < n; ++i) hd(i, i) += damp;
    if (cholesky(hd, lower)) {
      ok = true;
      break;
    }
    damp *= 2.0;
  }
  if (!ok) throw NumericalError("gptq_quantize: Hessian not positive definite after damping");

  // H^{-1} = L^{-T} L^{-1}; its upper Cholesky factor U (H^{-1} = U^T U) drives the updates.
  const Matrix l_inv = lower_triangular_inverse(lower);
  const Matrix h_inv = matmul_tn(l_inv, l_inv);
  Matrix hinv_lower;
  if (!cholesky(h_inv, hinv_lower)) throw NumericalError("gptq_quantize: inverse Hessian factorization failed");
  const Matrix u = hinv_lower.transposed();

  const std::size_t block = std::max<std::size_t>(1, opts.block_size);
  const bool asym = spec.scheme == Scheme::Asymmetric;
  for (std::size_t i1 = 0; i1 < n; i1 += block) {
    const std::size_t i2 = std::min(n, i1 + block);
    Matrix err(rows, i2 - i1);
    for (std::size_t i = i1; i < i2; ++i) {
      const double d = u(i, i);
      for (std::size_t r = 0; r < rows; ++r) {
        const double scale = qt.scales[r];
        const double offset = asym ? qt.offsets[r] : 0.0;
        const std::int32_t code = encode(work(r, i), scale, offset, spec);
        qt.codes[r * n + i] = code;
        const double e = (work(r, i) - (offset + scale * code)) / d;
        err(r, i - i1) = e;
        for (std::size_t j = i + 1; j < i2; ++j) work(r, j) -= e * u(i, j);
      }
    }
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = i1; k < i2; ++k) {
        const double e = err(r, k - i1);
        for (std::size_t j = i2; j < n; ++j) work(r, j) -= e * u(k, j);
      }
  }
  return qt;
}

double proxy_loss(const Matrix& x, const Matrix& w, const Matrix& w_hat) {
  return squared_frobenius(matmul_nt(x, w) - matmul_nt(x, w_hat));
}

double clip_threshold(double theta) { return 1.0 / (1.0 + std::exp(-theta)); }

double clip_logit(double ratio) { return std::log(ratio / (1.0 - ratio)); }

}  // namespace flatkit
