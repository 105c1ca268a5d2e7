#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "flatkit/matrix.hpp"
#include "flatkit/model.hpp"
#include "flatkit/tape.hpp"

namespace flatkit {

struct CalibConfig {
  std::size_t epochs = 15;
  double lr_transforms = 5e-3;
  double lr_clip = 5e-2;
  std::size_t batch = 4;
  std::size_t samples = 32;
  std::uint64_t seed = 0;
  /// Ablation switches: learnable transforms, per-channel scaling, learnable clipping.
  bool learn_transforms = true;
  bool per_channel_scaling = true;
  bool learnable_clipping = true;
  /// Feed block l the outputs of the already-quantized blocks instead of full precision.
  bool propagate_quantized_inputs = false;
  double init_skew_stddev = 0.01;
  double init_clip_ratio = 0.9;
  /// Symmetric bound on log singular values and log scales; 0 disables clamping.
  double log_sigma_bound = 0.0;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Abort when a batch loss exceeds this multiple of the initial loss.
  double divergence_factor = 10.0;

  void validate() const;
};

struct TraceRow {
  std::size_t epoch = 0;  // 0 = before training
  std::size_t block = 0;
  double loss = 0.0;
  double flatness = 0.0;
};

struct BlockCalibResult {
  BlockTransformSet transforms;
  std::vector<TraceRow> trace;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<std::string> detached;
};

struct ModelCalibResult {
  std::vector<BlockTransformSet> transforms;
  std::vector<TraceRow> trace;
  std::vector<double> initial_loss;
  std::vector<double> final_loss;
  /// max |student input - teacher input| per block.
  std::vector<double> input_gap;
};

/// Squared Frobenius norm of the difference.
double block_loss(const Matrix& teacher_out, const Matrix& student_out);

/// Near-identity initialization: skew entries ~ N(0, stddev^2), unit singular values,
/// unit scales, clip ratio init_clip_ratio. Disabled components stay identity markers.
BlockTransformSet init_transforms(const ModelConfig& cfg, const CalibConfig& calib,
                                  const QuantMode& mode, std::uint64_t seed);

/// Tape variables bound to the parameters of one BlockTransformSet.
struct StudentGraph {
  ad::Var output;
  std::vector<ad::Var> params;  // parallel to parameter_slots() order
};

struct ParamSlot {
  std::string name;
  std::vector<double>* values = nullptr;
  std::size_t rows = 1;
  std::size_t cols = 0;
  bool is_clip = false;
};
std::vector<ParamSlot> parameter_slots(BlockTransformSet& set);

/// Records the quantized student block over stacked sequences `x` on the tape.
/// A positive soft_round_temperature swaps rounding for the smooth surrogate.
StudentGraph build_student(ad::Tape& tape, const ModelConfig& cfg, const BlockWeights& w,
                           BlockTransformSet& set, const QuantMode& mode, const Matrix& x,
                           double soft_round_temperature = 0.0);

/// Gradients of the block loss with respect to every parameter slot, flattened per slot.
std::vector<std::vector<double>> block_gradients(const ModelConfig& cfg, const BlockWeights& w,
                                                 BlockTransformSet& set, const QuantMode& mode,
                                                 const Matrix& x, const Matrix& teacher,
                                                 double soft_round_temperature = 0.0,
                                                 double* loss_out = nullptr);

/// Sum over the block's quantized tensors (linear inputs and absorbed weights) of the
/// flatness of their per-channel magnitudes.
double block_flatness(const ModelConfig& cfg, const BlockWeights& w,
                      const RealizedBlockTransforms& t, const Matrix& x);

/// Minimizes ||F(X_teacher) - F_hat(X_student; theta)||_F^2 over the block's transforms,
/// scales and clip logits. `student_inputs` and `teacher_inputs` hold one sequence each.
BlockCalibResult calibrate_block(const ModelConfig& cfg, const BlockWeights& w,
                                 const std::vector<Matrix>& student_inputs,
                                 const std::vector<Matrix>& teacher_inputs, const QuantMode& mode,
                                 const CalibConfig& calib, std::size_t block_index = 0);

/// Calibrates every block in order.
ModelCalibResult calibrate_model(const TinyModel& model, const std::vector<Matrix>& samples,
                                 const QuantMode& mode, const CalibConfig& calib);

/// Stacks sequences row-wise.
Matrix stack_rows(const std::vector<Matrix>& parts);

}  // namespace flatkit
