#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "flatkit/matrix.hpp"
#include "flatkit/model.hpp"

namespace flatkit {

/// Columns: one magnitude per column (channels of a tokens x channels activation or the
/// input channels of an out x in weight). Rows: one per row.
enum class Axis { Columns, Rows };

/// Per-channel Frobenius norms, optionally sorted descending.
std::vector<double> channel_magnitudes(const Matrix& t, Axis axis = Axis::Columns, bool sorted = false);

/// Euclidean distance from d to the constant vector with the same l2 norm.
double flatness(std::span<const double> d);

struct FlatnessReport {
  std::string tensor;
  std::size_t channels = 0;
  std::vector<double> magnitudes;  // sorted descending
  double flatness = 0.0;
};
FlatnessReport flatness_report(std::string name, const Matrix& t, Axis axis = Axis::Columns);

/// Mean squared error between full-precision and quantized hidden states after each
/// block, per token position (averaged over samples and channels).
struct MseLandscape {
  std::size_t layers = 0;
  std::size_t tokens = 0;
  std::vector<double> mse;  // layer-major

  double at(std::size_t layer, std::size_t token) const { return mse[layer * tokens + token]; }
  double sum() const;
};

/// `transforms` may be null (identity). Each sample is one sequence.
MseLandscape mse_landscape(const TinyModel& model, const std::vector<Matrix>& samples,
                           const QuantMode& mode,
                           const std::vector<RealizedBlockTransforms>* transforms);

/// Closed-form online-transform FLOPs per block for square decompositions:
/// 8 b s hd sqrt(hd) + 2 b s hd a + 4 b s hd^2 / a + 4 b s hi sqrt(hi).
double online_transform_flops(const ModelConfig& cfg, double batch, double seq);
/// Same accounting using the actual minimal-sum factor pairs of hd and hi.
double online_transform_flops_exact(const ModelConfig& cfg, double batch, double seq);

/// Reference FLOPs of one full-precision block: q/k/v/o projections, a two-matrix FFN
/// (2 b s hd hi each way) and the attention score and value products.
double block_flops(const ModelConfig& cfg, double batch, double seq);
/// Exact count for the three-matrix gated FFN: 7 projections plus attention products.
double block_flops_gated(const ModelConfig& cfg, double batch, double seq);

/// 2 (4 hd + 2 hi + a^2 + (hd/a)^2) bytes per block, times `layers`.
double transform_memory_bytes(const ModelConfig& cfg, std::size_t layers);

struct KernelCase {
  enum class Kind { Default, Corner1, Corner2 };
  Kind kind = Kind::Default;
  std::size_t t_n1 = 0;  // Corner 1 non-reduction tile of P1
  std::size_t b_n1 = 0;  // Corner 2 reduction tiles
  std::size_t b_n2 = 0;
  double sram_bytes = 0.0;
};

const char* kernel_case_name(KernelCase::Kind k);

/// True if the case's shared-memory inequalities hold for (n1, n2, m).
bool kernel_case_feasible(const KernelCase& kc, std::size_t n1, std::size_t n2, double sram_bytes);

/// First feasible of Default, Corner 1 (largest fitting t_n1), Corner 2 (largest fitting
/// b_n1, b_n2), trying the given tile sizes. Throws NumericalError if none fits.
KernelCase select_kernel_case(std::size_t n1, std::size_t n2, double sram_bytes,
                              std::span<const std::size_t> tile_options);
std::vector<std::size_t> default_tile_options();

}  // namespace flatkit
