#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "flatkit/linalg.hpp"
#include "flatkit/matrix.hpp"
#include "flatkit/quant.hpp"
#include "flatkit/transforms.hpp"

namespace flatkit {

struct ModelConfig {
  std::size_t hidden = 64;
  std::size_t intermediate = 128;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t vocab = 256;
  std::size_t seq_len = 64;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;

  std::size_t head_dim() const noexcept { return heads == 0 ? 0 : hidden / heads; }
  /// Throws ConfigError if the head split or widths are inconsistent.
  void validate() const;
};

struct BlockWeights {
  std::vector<double> attn_norm;
  std::vector<double> ffn_norm;
  Matrix wq, wk, wv, wo;        // (out x in)
  Matrix w_gate, w_up, w_down;  // (out x in)
};

struct TinyModel {
  ModelConfig config;
  Matrix embedding;  // vocab x hidden
  std::vector<BlockWeights> blocks;
};

TinyModel random_model(const ModelConfig& cfg, std::mt19937_64& rng);

/// Which tensors are fake-quantized. Any subset may be enabled.
struct QuantMode {
  std::optional<QuantSpec> weights;
  std::optional<QuantSpec> activations;
  std::optional<QuantSpec> kv;
  bool use_gptq = false;

  bool any() const noexcept { return weights || activations || kv; }
  static QuantMode off() { return {}; }
  static QuantMode w4a4kv4(std::size_t head_dim);
  static QuantMode weight_only(int bits);
  static QuantMode kv_only(int bits, std::size_t head_dim);
};

/// Clipping ratios for every quantizer in a block (1 = no clipping).
struct BlockClips {
  double act_qkv = 1.0, act_o = 1.0, act_ug = 1.0, act_down = 1.0;
  double w_q = 1.0, w_k = 1.0, w_v = 1.0, w_o = 1.0, w_gate = 1.0, w_up = 1.0, w_down = 1.0;
  double k = 1.0, v = 1.0;

  static constexpr std::size_t kCount = 13;
  std::vector<double> to_vector() const;
  static BlockClips from_vector(std::span<const double> v);
};

/// Realized transforms for one block: P_a (qkv input), P_ug (gate/up input), P_d (down
/// input) as linear-input transforms; P_h applied jointly to queries and keys per head;
/// P_v applied to values per head and fused with P_o into the output projection input
/// transform P_o kron P_v.
struct RealizedBlockTransforms {
  LinearTransform qkv;
  LinearTransform ug;
  LinearTransform down;
  RealizedInvertible p_o;  // heads x heads
  RealizedInvertible p_v;  // head_dim
  Matrix p_h;              // head_dim, orthogonal
  BlockClips clips;

  static RealizedBlockTransforms identity(const ModelConfig& cfg);
  /// Hadamard baseline; every width must be a power of two.
  static RealizedBlockTransforms hadamard(const ModelConfig& cfg);
};

/// Learnable parameters of one block. Absent members are identity markers.
struct KroneckerTransform {
  SvdInvertible p1;
  SvdInvertible p2;
};

struct BlockTransformSet {
  std::optional<KroneckerTransform> p_a, p_ug, p_d;
  std::optional<SvdInvertible> p_o, p_v;
  std::optional<SkewParam> p_h;
  std::optional<std::vector<double>> log_c_a, log_c_ug, log_c_d;
  /// Pre-sigmoid clip logits in BlockClips::to_vector order.
  std::optional<std::vector<double>> clip_logits;

  RealizedBlockTransforms realize(const ModelConfig& cfg) const;
};

/// Weights of one block after transform absorption and (optional) weight quantization,
/// ready to run on any input.
struct PreparedBlock {
  ModelConfig config;
  const BlockWeights* weights = nullptr;
  RealizedBlockTransforms transforms;
  QuantMode mode;
  Matrix wq, wk, wv, wo, w_gate, w_up, w_down;
};

/// Inputs of every quantized linear (after the online transform, before quantization).
struct BlockTaps {
  Matrix qkv_in, o_in, ug_in, down_in;
  Matrix keys, values;  // per-head transformed caches, heads concatenated
};

/// `gptq_inputs` supplies calibration hidden states when mode.use_gptq is set.
PreparedBlock prepare_block(const ModelConfig& cfg, const BlockWeights& w,
                            const RealizedBlockTransforms& t, const QuantMode& mode,
                            const Matrix* gptq_inputs = nullptr);

/// Runs a block over `x`, a stack of sequences of cfg.seq_len tokens each.
Matrix run_block(const PreparedBlock& block, const Matrix& x, BlockTaps* taps = nullptr);

/// Convenience: prepare then run. Passing no transforms means the vanilla block.
Matrix block_forward(const ModelConfig& cfg, const Matrix& x, const BlockWeights& w,
                     const RealizedBlockTransforms* t, const QuantMode& mode);

/// Per-channel scaling baseline from calibration activations `x` of this block.
RealizedBlockTransforms smooth_transforms(const ModelConfig& cfg, const BlockWeights& w, const Matrix& x,
                                          const ScalingConfig& sc = {});
/// Scaling baseline for every block, calibrated on full-precision hidden states.
std::vector<RealizedBlockTransforms> smooth_model_transforms(const TinyModel& model, const Matrix& x,
                                                             const ScalingConfig& sc = {});

std::vector<Matrix> model_hidden_states(const TinyModel& model, const Matrix& x,
                                        const std::vector<RealizedBlockTransforms>* t,
                                        const QuantMode& mode);

Matrix rms_norm(const Matrix& x, std::span<const double> gain, double eps);
/// Rotary embedding over each head, position = row index modulo seq_len.
Matrix apply_rope(const Matrix& x, std::size_t heads, std::size_t seq_len, double base);
Matrix silu(const Matrix& x);

struct KvCaches {
  Matrix keys, queries, values;
};

/// Rotates queries and keys by the orthogonal P_h and maps values through P_v, head by
/// head. Throws DimensionError if P_h is not orthogonal to 1e-10.
KvCaches attach_kv_transforms(const Matrix& queries, const Matrix& keys, const Matrix& values,
                              std::size_t heads, const Matrix& p_h, const Matrix& p_v);

/// Scales `channels` by magnitude_ratio; with a pivot token, additionally multiplies the
/// outlier channels of the first token of each sequence by pivot_ratio.
Matrix plant_outliers(const Matrix& x, std::span<const std::size_t> channels,
                      double magnitude_ratio, std::optional<double> pivot_ratio = std::nullopt,
                      std::size_t seq_len = 0);

}  // namespace flatkit
