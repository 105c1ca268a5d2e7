#include "flatkit/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

#include "flatkit/error.hpp"
#include "flatkit/transforms.hpp"

namespace flatkit {

std::vector<double> channel_magnitudes(const Matrix& t, Axis axis, bool sorted) {
  const std::size_t n = axis == Axis::Columns ? t.cols() : t.rows();
  std::vector<double> d(n, 0.0);
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) {
      const double v = t(r, c);
      d[axis == Axis::Columns ? c : r] += v * v;
    }
  for (double& v : d) v = std::sqrt(v);
  if (sorted) std::sort(d.begin(), d.end(), std::greater<>());
  return d;
}

double flatness(std::span<const double> d) {
  if (d.empty()) return 0.0;
  double ss = 0.0;
  for (double v : d) ss += v * v;
  const double level = std::sqrt(ss / static_cast<double>(d.size()));
  double dist = 0.0;
  for (double v : d) dist += (v - level) * (v - level);
  return std::sqrt(dist);
}

FlatnessReport flatness_report(std::string name, const Matrix& t, Axis axis) {
  FlatnessReport r;
  r.tensor = std::move(name);
  r.magnitudes = channel_magnitudes(t, axis, true);
  r.channels = r.magnitudes.size();
  r.flatness = flatness(r.magnitudes);
  return r;
}

double MseLandscape::sum() const {
  double s = 0.0;
  for (double v : mse) s += v;
  return s;
}

MseLandscape mse_landscape(const TinyModel& model, const std::vector<Matrix>& samples,
                           const QuantMode& mode,
                           const std::vector<RealizedBlockTransforms>* transforms) {
  const ModelConfig& cfg = model.config;
  if (transforms && transforms->size() != model.blocks.size())
    throw DimensionError("mse_landscape: one transform set per block required");
  MseLandscape out;
  out.layers = model.blocks.size();
  out.tokens = cfg.seq_len;
  out.mse.assign(out.layers * out.tokens, 0.0);
  if (samples.empty()) return out;
  for (const auto& s : samples)
    if (s.rows() != cfg.seq_len || s.cols() != cfg.hidden)
      throw DimensionError("mse_landscape: each sample must be seq_len x hidden");

  Matrix fp(samples.size() * cfg.seq_len, cfg.hidden);
  for (std::size_t i = 0; i < samples.size(); ++i) set_rows(fp, i * cfg.seq_len, samples[i]);
  Matrix q = fp;
  const RealizedBlockTransforms id = RealizedBlockTransforms::identity(cfg);
  const double denom = static_cast<double>(samples.size() * cfg.hidden);
  for (std::size_t l = 0; l < out.layers; ++l) {
    const BlockWeights& w = model.blocks[l];
    fp = run_block(prepare_block(cfg, w, id, QuantMode::off()), fp);
    const RealizedBlockTransforms& t = transforms ? (*transforms)[l] : id;
    q = run_block(prepare_block(cfg, w, t, mode, mode.use_gptq ? &q : nullptr), q);
    for (std::size_t r = 0; r < fp.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < fp.cols(); ++c) {
        const double d = fp(r, c) - q(r, c);
        s += d * d;
      }
      out.mse[l * out.tokens + r % cfg.seq_len] += s / denom;
    }
  }
  return out;
}

double online_transform_flops(const ModelConfig& cfg, double b, double s) {
  const double hd = static_cast<double>(cfg.hidden), hi = static_cast<double>(cfg.intermediate);
  const double a = static_cast<double>(cfg.heads);
  return 8.0 * b * s * hd * std::sqrt(hd) + 2.0 * b * s * hd * a + 4.0 * b * s * hd * hd / a +
         4.0 * b * s * hi * std::sqrt(hi);
}

double online_transform_flops_exact(const ModelConfig& cfg, double b, double s) {
  const double hd = static_cast<double>(cfg.hidden), hi = static_cast<double>(cfg.intermediate);
  const double a = static_cast<double>(cfg.heads);
  const DecompositionChoice dh = choose_decomposition(cfg.hidden);
  const DecompositionChoice di = choose_decomposition(cfg.intermediate);
  const double kron_h = 2.0 * b * s * hd * static_cast<double>(dh.n1 + dh.n2);
  const double kron_i = 2.0 * b * s * hi * static_cast<double>(di.n1 + di.n2);
  const double p_o = 2.0 * b * s * hd * a;
  const double p_h = 2.0 * 2.0 * b * s * hd * (hd / a);  // queries and keys
  return 2.0 * kron_h + p_o + p_h + kron_i;
}

double block_flops(const ModelConfig& cfg, double b, double s) {
  const double hd = static_cast<double>(cfg.hidden), hi = static_cast<double>(cfg.intermediate);
  return 8.0 * b * s * hd * hd + 4.0 * b * s * hd * hi + 4.0 * b * s * s * hd;
}

double block_flops_gated(const ModelConfig& cfg, double b, double s) {
  const double hd = static_cast<double>(cfg.hidden), hi = static_cast<double>(cfg.intermediate);
  return 8.0 * b * s * hd * hd + 6.0 * b * s * hd * hi + 4.0 * b * s * s * hd;
}

double transform_memory_bytes(const ModelConfig& cfg, std::size_t layers) {
  const double hd = static_cast<double>(cfg.hidden), hi = static_cast<double>(cfg.intermediate);
  const double a = static_cast<double>(cfg.heads);
  return 2.0 * (4.0 * hd + 2.0 * hi + a * a + (hd / a) * (hd / a)) * static_cast<double>(layers);
}

const char* kernel_case_name(KernelCase::Kind k) {
  switch (k) {
    case KernelCase::Kind::Default: return "default";
    case KernelCase::Kind::Corner1: return "corner1";
    case KernelCase::Kind::Corner2: return "corner2";
  }
  return "unknown";
}

bool kernel_case_feasible(const KernelCase& kc, std::size_t n1_, std::size_t n2_, double m) {
  const double n1 = static_cast<double>(n1_), n2 = static_cast<double>(n2_);
  switch (kc.kind) {
    case KernelCase::Kind::Default:
      return (n1 * n1 + 2.0 * n1 * n2) * 2.0 < m && (n2 * n2 + 2.0 * n1 * n2) * 2.0 < m;
    case KernelCase::Kind::Corner1: {
      if (kc.t_n1 == 0 || kc.t_n1 > n1_) return false;
      const double t = static_cast<double>(kc.t_n1);
      return (t * n1 + n1 * n2 + t * n2) * 2.0 < m && (n2 * n2 + 2.0 * t * n2) * 2.0 < m;
    }
    case KernelCase::Kind::Corner2: {
      if (kc.b_n1 == 0 || kc.b_n2 == 0 || kc.b_n1 > n1_ || kc.b_n2 > n2_) return false;
      const double b1 = static_cast<double>(kc.b_n1), b2 = static_cast<double>(kc.b_n2);
      return (n1 * b1 + b1 * n2 + n1 * n2) * 2.0 < m && (n1 * b2 + b2 * n2 + n1 * n2) * 2.0 < m;
    }
  }
  return false;
}

std::vector<std::size_t> default_tile_options() { return {16, 32, 64, 128}; }

KernelCase select_kernel_case(std::size_t n1, std::size_t n2, double m,
                              std::span<const std::size_t> tile_options) {
  if (!(m > 0.0)) throw DimensionError("select_kernel_case: shared memory size must be positive");
  if (n1 == 0 || n2 == 0) throw DimensionError("select_kernel_case: factor sizes must be positive");
  std::vector<std::size_t> tiles(tile_options.begin(), tile_options.end());
  std::sort(tiles.begin(), tiles.end(), std::greater<>());

  KernelCase kc;
  kc.sram_bytes = m;
  kc.kind = KernelCase::Kind::Default;
  if (kernel_case_feasible(kc, n1, n2, m)) return kc;

  kc.kind = KernelCase::Kind::Corner1;
  for (std::size_t t : tiles) {
    kc.t_n1 = t;
    if (kernel_case_feasible(kc, n1, n2, m)) return kc;
  }
  kc.t_n1 = 0;

  kc.kind = KernelCase::Kind::Corner2;
  // The two inequalities are independent; take the largest tile satisfying each.
  for (std::size_t b1 : tiles) {
    for (std::size_t b2 : tiles) {
      kc.b_n1 = b1;
      kc.b_n2 = b2;
      if (kernel_case_feasible(kc, n1, n2, m)) return kc;
    }
  }
  std::ostringstream os;
  os << "select_kernel_case: no feasible kernel layout for n1=" << n1 << ", n2=" << n2
     << " within " << m << " bytes of shared memory";
  throw NumericalError(os.str());
}

}  // namespace flatkit
