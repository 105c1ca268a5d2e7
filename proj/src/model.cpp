#include "flatkit/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "flatkit/error.hpp"

namespace flatkit {

void ModelConfig::validate() const {
  if (hidden == 0) throw ConfigError("model.hidden", "must be positive");
  if (intermediate == 0) throw ConfigError("model.intermediate", "must be positive");
  if (heads == 0 || hidden % heads != 0)
    throw ConfigError("model.heads", "must divide hidden (" + std::to_string(hidden) + ")");
  if (head_dim() % 2 != 0) throw ConfigError("model.heads", "head dimension must be even for RoPE");
  if (layers == 0) throw ConfigError("model.layers", "must be positive");
  if (vocab == 0) throw ConfigError("model.vocab", "must be positive");
  if (seq_len == 0) throw ConfigError("model.seq_len", "must be positive");
  if (!(rope_base > 1.0)) throw ConfigError("model.rope_base", "must exceed 1");
}

TinyModel random_model(const ModelConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  TinyModel m;
  m.config = cfg;
  m.embedding = random_normal(cfg.vocab, cfg.hidden, 1.0, rng);
  const double sd_h = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
  const double sd_i = 1.0 / std::sqrt(static_cast<double>(cfg.intermediate));
  std::uniform_real_distribution<double> gain(0.8, 1.2);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    BlockWeights b;
    b.attn_norm.resize(cfg.hidden);
    b.ffn_norm.resize(cfg.hidden);
    for (double& g : b.attn_norm) g = gain(rng);
    for (double& g : b.ffn_norm) g = gain(rng);
    b.wq = random_normal(cfg.hidden, cfg.hidden, sd_h, rng);
    b.wk = random_normal(cfg.hidden, cfg.hidden, sd_h, rng);
    b.wv = random_normal(cfg.hidden, cfg.hidden, sd_h, rng);
    b.wo = random_normal(cfg.hidden, cfg.hidden, sd_h, rng);
    b.w_gate = random_normal(cfg.intermediate, cfg.hidden, sd_h, rng);
    b.w_up = random_normal(cfg.intermediate, cfg.hidden, sd_h, rng);
    b.w_down = random_normal(cfg.hidden, cfg.intermediate, sd_i, rng);
    m.blocks.push_back(std::move(b));
  }
  return m;
}

QuantMode QuantMode::w4a4kv4(std::size_t head_dim) {
  QuantMode m;
  m.weights = QuantSpec::weights(4);
  m.activations = QuantSpec::activations(4);
  m.kv = QuantSpec::kv(4, head_dim);
  return m;
}

QuantMode QuantMode::weight_only(int bits) {
  QuantMode m;
  m.weights = QuantSpec::weights(bits);
  return m;
}

QuantMode QuantMode::kv_only(int bits, std::size_t head_dim) {
  QuantMode m;
  m.kv = QuantSpec::kv(bits, head_dim);
  return m;
}

std::vector<double> BlockClips::to_vector() const {
  return {act_qkv, act_o, act_ug, act_down, w_q, w_k, w_v, w_o, w_gate, w_up, w_down, k, v};
}

BlockClips BlockClips::from_vector(std::span<const double> v) {
  if (v.size() != kCount) throw DimensionError("BlockClips: expected 13 entries");
  BlockClips c;
  c.act_qkv = v[0];
  c.act_o = v[1];
  c.act_ug = v[2];
  c.act_down = v[3];
  c.w_q = v[4];
  c.w_k = v[5];
  c.w_v = v[6];
  c.w_o = v[7];
  c.w_gate = v[8];
  c.w_up = v[9];
  c.w_down = v[10];
  c.k = v[11];
  c.v = v[12];
  return c;
}

namespace {

RealizedInvertible identity_pair(std::size_t n) { return {Matrix::identity(n), Matrix::identity(n)}; }

}  // namespace

RealizedBlockTransforms RealizedBlockTransforms::identity(const ModelConfig& cfg) {
  RealizedBlockTransforms t;
  t.p_o = identity_pair(cfg.heads);
  t.p_v = identity_pair(cfg.head_dim());
  t.p_h = Matrix::identity(cfg.head_dim());
  return t;
}

RealizedBlockTransforms RealizedBlockTransforms::hadamard(const ModelConfig& cfg) {
  RealizedBlockTransforms t;
  t.qkv = LinearTransform::hadamard(cfg.hidden);
  t.ug = LinearTransform::hadamard(cfg.hidden);
  t.down = LinearTransform::hadamard(cfg.intermediate);
  const Matrix ho = flatkit::hadamard(cfg.heads);
  const Matrix hh = flatkit::hadamard(cfg.head_dim());
  t.p_o = {ho, ho};
  t.p_v = {hh, hh};
  t.p_h = hh;
  return t;
}

namespace {

std::vector<double> exp_all(const std::vector<double>& v) {
  std::vector<double> out(v.size());
  std::transform(v.begin(), v.end(), out.begin(), [](double x) { return std::exp(x); });
  return out;
}

LinearTransform realize_linear(const std::optional<KroneckerTransform>& k,
                               const std::optional<std::vector<double>>& log_c, std::size_t width) {
  LinearTransform t;
  if (k) {
    if (k->p1.dim() * k->p2.dim() != width)
      throw DimensionError("BlockTransformSet: Kronecker factors " + std::to_string(k->p1.dim()) +
                           "x" + std::to_string(k->p2.dim()) + " do not match width " +
                           std::to_string(width));
    t = LinearTransform::kronecker(realize(k->p1), realize(k->p2));
  }
  if (log_c) {
    if (log_c->size() != width) throw DimensionError("BlockTransformSet: scaling length mismatch");
    t = std::move(t).with_scaling(exp_all(*log_c));
  }
  return t;
}

}  // namespace

RealizedBlockTransforms BlockTransformSet::realize(const ModelConfig& cfg) const {
  RealizedBlockTransforms t = RealizedBlockTransforms::identity(cfg);
  t.qkv = realize_linear(p_a, log_c_a, cfg.hidden);
  t.ug = realize_linear(p_ug, log_c_ug, cfg.hidden);
  t.down = realize_linear(p_d, log_c_d, cfg.intermediate);
  if (p_o) t.p_o = flatkit::realize(*p_o);
  if (p_v) t.p_v = flatkit::realize(*p_v);
  if (p_h) t.p_h = cayley(*p_h);
  if (clip_logits) {
    std::vector<double> r(clip_logits->size());
    std::transform(clip_logits->begin(), clip_logits->end(), r.begin(), clip_threshold);
    t.clips = BlockClips::from_vector(r);
  }
  return t;
}

Matrix rms_norm(const Matrix& x, std::span<const double> gain, double eps) {
  if (gain.size() != x.cols()) throw DimensionError("rms_norm: gain length mismatch");
  Matrix y(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double ss = 0.0;
    for (double v : x.row(r)) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.cols()) + eps);
    for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) = x(r, c) * inv * gain[c];
  }
  return y;
}

Matrix apply_rope(const Matrix& x, std::size_t heads, std::size_t seq_len, double base) {
  if (heads == 0 || x.cols() % heads != 0) throw DimensionError("apply_rope: heads do not divide width");
  const std::size_t d = x.cols() / heads, half = d / 2;
  Matrix y = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double pos = static_cast<double>(seq_len == 0 ? r : r % seq_len);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < half; ++i) {
        const double theta = pos * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
        const double c = std::cos(theta), s = std::sin(theta);
        const double a = x(r, h * d + i), b = x(r, h * d + i + half);
        y(r, h * d + i) = a * c - b * s;
        y(r, h * d + i + half) = a * s + b * c;
      }
  }
  return y;
}

Matrix silu(const Matrix& x) {
  Matrix y = x;
  for (double& v : y.data()) v = v / (1.0 + std::exp(-v));
  return y;
}

namespace {

/// x (rows x heads*d) -> each head block multiplied by p (d x d).
Matrix per_head(const Matrix& x, std::size_t heads, const Matrix& p) {
  const std::size_t d = p.rows();
  if (x.cols() != heads * d) throw DimensionError("per-head transform: width mismatch");
  Matrix y(x.rows(), x.cols());
  for (std::size_t h = 0; h < heads; ++h) set_cols(y, h * d, matmul(slice_cols(x, h * d, d), p));
  return y;
}

double orthogonality_error(const Matrix& q) {
  return max_abs_diff(matmul_tn(q, q), Matrix::identity(q.rows()));
}

}  // namespace

KvCaches attach_kv_transforms(const Matrix& queries, const Matrix& keys, const Matrix& values,
                              std::size_t heads, const Matrix& p_h, const Matrix& p_v) {
  if (p_h.rows() != p_h.cols() || orthogonality_error(p_h) >= 1e-10)
    throw DimensionError("attach_kv_transforms: P_h must be orthogonal");
  return {per_head(keys, heads, p_h), per_head(queries, heads, p_h), per_head(values, heads, p_v)};
}

Matrix plant_outliers(const Matrix& x, std::span<const std::size_t> channels, double magnitude_ratio,
                      std::optional<double> pivot_ratio, std::size_t seq_len) {
  Matrix y = x;
  for (std::size_t c : channels) {
    if (c >= x.cols()) throw DimensionError("plant_outliers: channel " + std::to_string(c) + " out of range");
    for (std::size_t r = 0; r < x.rows(); ++r) y(r, c) *= magnitude_ratio;
  }
  if (pivot_ratio) {
    const std::size_t stride = seq_len == 0 ? x.rows() : seq_len;
    for (std::size_t r = 0; r < x.rows(); r += stride) {
      if (channels.empty()) {
        for (double& v : y.row(r)) v *= *pivot_ratio;
      } else {
        for (std::size_t c : channels) y(r, c) *= *pivot_ratio;
      }
    }
  }
  return y;
}

namespace {

Matrix quantize_weight(const Matrix& w, const QuantMode& mode, double clip, const Matrix* calib) {
  if (!mode.weights) return w;
  QuantSpec spec = *mode.weights;
  spec.clip_ratio = std::min(1.0, spec.clip_ratio * clip);
  if (mode.use_gptq && calib != nullptr) return gptq_quantize(w, *calib, spec).dequantize();
  return fake_quant(w, spec, spec.clip_ratio);
}

Matrix quantize_act(const Matrix& x, const std::optional<QuantSpec>& spec, double clip) {
  if (!spec) return x;
  return fake_quant(x, *spec, std::min(1.0, spec->clip_ratio * clip));
}

Matrix absorb_o(const Matrix& wo, const RealizedBlockTransforms& t) {
  return kron_inverse_weights(wo, t.p_o.p_inv, t.p_v.p_inv);
}

}  // namespace

PreparedBlock prepare_block(const ModelConfig& cfg, const BlockWeights& w,
                            const RealizedBlockTransforms& t, const QuantMode& mode,
                            const Matrix* gptq_inputs) {
  PreparedBlock b;
  b.config = cfg;
  b.weights = &w;
  b.transforms = t;
  b.mode = mode;
  const Matrix wq = t.qkv.absorb(w.wq), wk = t.qkv.absorb(w.wk), wv = t.qkv.absorb(w.wv);
  const Matrix wo = absorb_o(w.wo, t);
  const Matrix wg = t.ug.absorb(w.w_gate), wu = t.ug.absorb(w.w_up);
  const Matrix wd = t.down.absorb(w.w_down);

  BlockTaps taps;
  const bool gptq = mode.weights && mode.use_gptq;
  if (gptq) {
    if (gptq_inputs == nullptr) throw DimensionError("prepare_block: GPTQ needs calibration inputs");
    PreparedBlock fp = prepare_block(cfg, w, t, QuantMode::off());
    run_block(fp, *gptq_inputs, &taps);
  }
  const auto* xa = gptq ? &taps.qkv_in : nullptr;
  const auto* xo = gptq ? &taps.o_in : nullptr;
  const auto* xu = gptq ? &taps.ug_in : nullptr;
  const auto* xd = gptq ? &taps.down_in : nullptr;
  const BlockClips& c = t.clips;
  b.wq = quantize_weight(wq, mode, c.w_q, xa);
  b.wk = quantize_weight(wk, mode, c.w_k, xa);
  b.wv = quantize_weight(wv, mode, c.w_v, xa);
  b.wo = quantize_weight(wo, mode, c.w_o, xo);
  b.w_gate = quantize_weight(wg, mode, c.w_gate, xu);
  b.w_up = quantize_weight(wu, mode, c.w_up, xu);
  b.w_down = quantize_weight(wd, mode, c.w_down, xd);
  return b;
}

Matrix run_block(const PreparedBlock& b, const Matrix& x, BlockTaps* taps) {
  const ModelConfig& cfg = b.config;
  const BlockWeights& w = *b.weights;
  const RealizedBlockTransforms& t = b.transforms;
  const QuantMode& mode = b.mode;
  const std::size_t heads = cfg.heads, d = cfg.head_dim(), seq = cfg.seq_len;
  if (x.cols() != cfg.hidden)
    throw DimensionError("block_forward: input width " + std::to_string(x.cols()) + " != hidden " +
                         std::to_string(cfg.hidden));
  if (x.rows() % seq != 0) throw DimensionError("block_forward: rows must be a multiple of seq_len");

  // Attention.
  Matrix xa = t.qkv.forward(rms_norm(x, w.attn_norm, cfg.norm_eps));
  if (taps) taps->qkv_in = xa;
  xa = quantize_act(xa, mode.activations, t.clips.act_qkv);
  Matrix q = apply_rope(matmul_nt(xa, b.wq), heads, seq, cfg.rope_base);
  Matrix k = apply_rope(matmul_nt(xa, b.wk), heads, seq, cfg.rope_base);
  Matrix v = matmul_nt(xa, b.wv);
  KvCaches kv = attach_kv_transforms(q, k, v, heads, t.p_h, t.p_v.p);
  if (mode.kv) {
    kv.keys = fake_quant(kv.keys, *mode.kv, std::min(1.0, mode.kv->clip_ratio * t.clips.k));
    kv.values = fake_quant(kv.values, *mode.kv, std::min(1.0, mode.kv->clip_ratio * t.clips.v));
  }
  if (taps) {
    taps->keys = kv.keys;
    taps->values = kv.values;
  }

  Matrix attn(x.rows(), cfg.hidden);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t s0 = 0; s0 < x.rows(); s0 += seq) {
    for (std::size_t h = 0; h < heads; ++h) {
      const Matrix qh = slice_cols(slice_rows(kv.queries, s0, seq), h * d, d);
      const Matrix kh = slice_cols(slice_rows(kv.keys, s0, seq), h * d, d);
      const Matrix vh = slice_cols(slice_rows(kv.values, s0, seq), h * d, d);
      Matrix scores = matmul_nt(qh, kh);
      for (std::size_t i = 0; i < seq; ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, scores(i, j) * inv_sqrt_d);
        double sum = 0.0;
        for (std::size_t j = 0; j < seq; ++j) {
          const double e = j <= i ? std::exp(scores(i, j) * inv_sqrt_d - mx) : 0.0;
          scores(i, j) = e;
          sum += e;
        }
        for (std::size_t j = 0; j <= i; ++j) scores(i, j) /= sum;
      }
      const Matrix oh = matmul(scores, vh);
      for (std::size_t i = 0; i < seq; ++i)
        for (std::size_t c = 0; c < d; ++c) attn(s0 + i, h * d + c) = oh(i, c);
    }
  }
  // Values already carry P_v per head; the online part of the output transform is P_o kron I.
  Matrix xo = kron_apply(attn, t.p_o.p, Matrix::identity(d));
  if (taps) taps->o_in = xo;
  xo = quantize_act(xo, mode.activations, t.clips.act_o);
  Matrix x1 = x + matmul_nt(xo, b.wo);

  // Feed-forward.
  Matrix xu = t.ug.forward(rms_norm(x1, w.ffn_norm, cfg.norm_eps));
  if (taps) taps->ug_in = xu;
  xu = quantize_act(xu, mode.activations, t.clips.act_ug);
  const Matrix gate = matmul_nt(xu, b.w_gate);
  const Matrix up = matmul_nt(xu, b.w_up);
  Matrix m = silu(gate);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] *= up.data()[i];
  Matrix xd = t.down.forward(m);
  if (taps) taps->down_in = xd;
  xd = quantize_act(xd, mode.activations, t.clips.act_down);
  return x1 + matmul_nt(xd, b.w_down);
}

Matrix block_forward(const ModelConfig& cfg, const Matrix& x, const BlockWeights& w,
                     const RealizedBlockTransforms* t, const QuantMode& mode) {
  const RealizedBlockTransforms id = RealizedBlockTransforms::identity(cfg);
  return run_block(prepare_block(cfg, w, t ? *t : id, mode), x);
}

std::vector<Matrix> model_hidden_states(const TinyModel& model, const Matrix& x,
                                        const std::vector<RealizedBlockTransforms>* t,
                                        const QuantMode& mode) {
  std::vector<Matrix> states;
  Matrix h = x;
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const RealizedBlockTransforms* tl = t ? &t->at(l) : nullptr;
    h = block_forward(model.config, h, model.blocks[l], tl, mode);
    states.push_back(h);
  }
  return states;
}

namespace {

std::vector<double> col_absmax(std::initializer_list<const Matrix*> ms) {
  std::vector<double> out((*ms.begin())->cols(), 0.0);
  for (const Matrix* m : ms)
    for (std::size_t r = 0; r < m->rows(); ++r)
      for (std::size_t c = 0; c < m->cols(); ++c) out[c] = std::max(out[c], std::abs((*m)(r, c)));
  return out;
}

}  // namespace

RealizedBlockTransforms smooth_transforms(const ModelConfig& cfg, const BlockWeights& w, const Matrix& x,
                                          const ScalingConfig& sc) {
  BlockTaps taps;
  run_block(prepare_block(cfg, w, RealizedBlockTransforms::identity(cfg), QuantMode::off()), x, &taps);
  RealizedBlockTransforms t = RealizedBlockTransforms::identity(cfg);
  t.qkv = LinearTransform::scaling(
      smooth_scale(col_absmax({&taps.qkv_in}), col_absmax({&w.wq, &w.wk, &w.wv}), sc));
  t.ug = LinearTransform::scaling(smooth_scale(col_absmax({&taps.ug_in}), col_absmax({&w.w_gate, &w.w_up}), sc));
  t.down = LinearTransform::scaling(smooth_scale(col_absmax({&taps.down_in}), col_absmax({&w.w_down}), sc));
  return t;
}

std::vector<RealizedBlockTransforms> smooth_model_transforms(const TinyModel& model, const Matrix& x,
                                                             const ScalingConfig& sc) {
  std::vector<RealizedBlockTransforms> out;
  Matrix h = x;
  for (const BlockWeights& w : model.blocks) {
    out.push_back(smooth_transforms(model.config, w, h, sc));
    h = block_forward(model.config, h, w, nullptr, QuantMode::off());
  }
  return out;
}

}  // namespace flatkit
