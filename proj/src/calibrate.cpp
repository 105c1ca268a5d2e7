#include "flatkit/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "flatkit/analysis.hpp"
#include "flatkit/error.hpp"
#include "flatkit/linalg.hpp"

namespace flatkit {

void CalibConfig::validate() const {
  if (!(lr_transforms > 0.0)) throw ConfigError("calib.lr_transforms", "must be positive");
  if (!(lr_clip > 0.0)) throw ConfigError("calib.lr_clip", "must be positive");
  if (batch == 0) throw ConfigError("calib.batch", "must be positive");
  if (samples == 0) throw ConfigError("calib.samples", "must be positive");
  if (!(init_clip_ratio > 0.0 && init_clip_ratio < 1.0))
    throw ConfigError("calib.init_clip_ratio", "must lie in (0, 1)");
  if (init_skew_stddev < 0.0) throw ConfigError("calib.init_skew_stddev", "must be non-negative");
  if (log_sigma_bound < 0.0) throw ConfigError("calib.log_sigma_bound", "must be non-negative");
  if (!(divergence_factor > 1.0)) throw ConfigError("calib.divergence_factor", "must exceed 1");
}

double block_loss(const Matrix& teacher_out, const Matrix& student_out) {
  require_same_shape(teacher_out, student_out, "block_loss");
  double s = 0.0;
  for (std::size_t i = 0; i < teacher_out.size(); ++i) {
    const double d = teacher_out.data()[i] - student_out.data()[i];
    s += d * d;
  }
  return s;
}

Matrix stack_rows(const std::vector<Matrix>& parts) {
  if (parts.empty()) return {};
  std::size_t rows = 0;
  for (const auto& p : parts) rows += p.rows();
  Matrix out(rows, parts[0].cols());
  std::size_t off = 0;
  for (const auto& p : parts) {
    set_rows(out, off, p);
    off += p.rows();
  }
  return out;
}

BlockTransformSet init_transforms(const ModelConfig& cfg, const CalibConfig& calib,
                                  const QuantMode& mode, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  BlockTransformSet set;
  const double sd = calib.init_skew_stddev;
  auto kron = [&](std::size_t n) {
    const DecompositionChoice d = choose_decomposition(n);
    return KroneckerTransform{random_invertible(d.n1, sd, 0.0, rng), random_invertible(d.n2, sd, 0.0, rng)};
  };
  if (calib.learn_transforms) {
    set.p_a = kron(cfg.hidden);
    set.p_ug = kron(cfg.hidden);
    set.p_d = kron(cfg.intermediate);
    set.p_o = random_invertible(cfg.heads, sd, 0.0, rng);
    set.p_v = random_invertible(cfg.head_dim(), sd, 0.0, rng);
    set.p_h = random_skew(cfg.head_dim(), sd, rng);
  }
  if (calib.per_channel_scaling) {
    set.log_c_a = std::vector<double>(cfg.hidden, 0.0);
    set.log_c_ug = std::vector<double>(cfg.hidden, 0.0);
    set.log_c_d = std::vector<double>(cfg.intermediate, 0.0);
  }
  if (calib.learnable_clipping && mode.any())
    set.clip_logits = std::vector<double>(BlockClips::kCount, clip_logit(calib.init_clip_ratio));
  return set;
}

namespace {

/// Clip entries that have an enabled quantizer in `mode`, in BlockClips::to_vector order.
std::vector<bool> active_clips(const QuantMode& mode) {
  std::vector<bool> on(BlockClips::kCount, false);
  for (std::size_t i = 0; i < 4; ++i) on[i] = mode.activations.has_value();
  for (std::size_t i = 4; i < 11; ++i) on[i] = mode.weights.has_value();
  on[11] = on[12] = mode.kv.has_value();
  return on;
}

const char* const kClipNames[BlockClips::kCount] = {"clip.act_qkv", "clip.act_o", "clip.act_ug",
                                                     "clip.act_down", "clip.w_q", "clip.w_k",
                                                     "clip.w_v", "clip.w_o", "clip.w_gate",
                                                     "clip.w_up", "clip.w_down", "clip.k", "clip.v"};

}  // namespace

std::vector<ParamSlot> parameter_slots(BlockTransformSet& set) {
  std::vector<ParamSlot> slots;
  auto svd = [&](const std::string& name, SvdInvertible& p) {
    const std::size_t k = SkewParam::param_count(p.dim());
    slots.push_back({name + ".u", &p.u_param.upper, 1, k, false});
    slots.push_back({name + ".v", &p.v_param.upper, 1, k, false});
    slots.push_back({name + ".log_sigma", &p.log_sigma, 1, p.dim(), false});
  };
  auto kron = [&](const std::string& name, std::optional<KroneckerTransform>& k) {
    if (!k) return;
    svd(name + ".p1", k->p1);
    svd(name + ".p2", k->p2);
  };
  kron("p_a", set.p_a);
  kron("p_ug", set.p_ug);
  kron("p_d", set.p_d);
  if (set.p_o) svd("p_o", *set.p_o);
  if (set.p_v) svd("p_v", *set.p_v);
  if (set.p_h) slots.push_back({"p_h", &set.p_h->upper, 1, set.p_h->upper.size(), false});
  auto scale = [&](const std::string& name, std::optional<std::vector<double>>& c) {
    if (c) slots.push_back({name, &*c, 1, c->size(), false});
  };
  scale("log_c_a", set.log_c_a);
  scale("log_c_ug", set.log_c_ug);
  scale("log_c_d", set.log_c_d);
  if (set.clip_logits) slots.push_back({"clip_logits", &*set.clip_logits, 1, set.clip_logits->size(), true});
  return slots;
}

namespace {

using ad::Tape;
using ad::Var;

struct RealizedVar {
  Var p;
  Var p_inv;
};

struct LinearVars {
  std::optional<RealizedVar> p1, p2;
  std::optional<Var> c, c_inv;  // row vectors
};

class StudentBuilder {
 public:
  StudentBuilder(Tape& tape, BlockTransformSet& set, const QuantMode& mode, double temperature)
      : t_(tape), mode_(mode), temperature_(temperature) {
    const auto slots = parameter_slots(set);
    for (const auto& s : slots) {
      Var v = t_.parameter(Matrix(s.rows, s.cols, *s.values), s.name);
      params_.push_back(v);
      by_name_.emplace_back(s.name, v);
    }
  }

  const std::vector<Var>& params() const { return params_; }

  std::optional<Var> find(const std::string& name) const {
    for (const auto& [n, v] : by_name_)
      if (n == name) return v;
    return std::nullopt;
  }

  RealizedVar realize_svd(const std::string& name, std::size_t n) {
    const Var u = ad::cayley(t_, *find(name + ".u"), n);
    const Var v = ad::cayley(t_, *find(name + ".v"), n);
    const Var ls = *find(name + ".log_sigma");
    const Var sigma = ad::exp(t_, ls);
    const Var sigma_inv = ad::exp(t_, ad::scale(t_, ls, -1.0));
    return {ad::matmul_nt(t_, ad::scale_cols(t_, u, sigma), v),
            ad::matmul_nt(t_, ad::scale_cols(t_, v, sigma_inv), u)};
  }

  LinearVars linear(const std::string& kname, const std::optional<KroneckerTransform>& k,
                    const std::string& cname) {
    LinearVars lv;
    if (k) {
      lv.p1 = realize_svd(kname + ".p1", k->p1.dim());
      lv.p2 = realize_svd(kname + ".p2", k->p2.dim());
    }
    if (auto c = find(cname)) {
      lv.c = ad::exp(t_, *c);
      lv.c_inv = ad::exp(t_, ad::scale(t_, *c, -1.0));
    }
    return lv;
  }

  Var forward(const LinearVars& lv, Var x) {
    if (lv.c_inv) x = ad::scale_cols(t_, x, *lv.c_inv);
    if (lv.p1) x = ad::kron_apply(t_, x, lv.p1->p, lv.p2->p);
    return x;
  }

  Var absorb(const LinearVars& lv, const Matrix& w) {
    Var v = t_.constant(w);
    if (lv.c) v = ad::scale_cols(t_, v, *lv.c);
    if (lv.p1)
      v = ad::kron_apply(t_, v, ad::transpose(t_, lv.p1->p_inv), ad::transpose(t_, lv.p2->p_inv));
    return v;
  }

  Var clip(std::size_t index) {
    if (auto logits = find("clip_logits")) {
      Matrix sel(BlockClips::kCount, 1);
      sel(index, 0) = 1.0;
      return ad::sigmoid(t_, ad::matmul(t_, *logits, t_.constant(std::move(sel))));
    }
    return t_.constant(Matrix(1, 1, 1.0));
  }

  Var quant(Var x, const std::optional<QuantSpec>& spec, std::size_t clip_index) {
    if (!spec) return x;
    ad::FakeQuantOptions o;
    o.bits = spec->bits;
    o.scheme = spec->scheme;
    o.group = spec->granularity == Granularity::PerGroup ? spec->group_size : 0;
    o.clip_ratio = spec->clip_ratio;
    o.soft_round_temperature = temperature_;
    return ad::fake_quant(t_, x, clip(clip_index), o);
  }

  Tape& tape() { return t_; }
  const QuantMode& mode() const { return mode_; }

 private:
  Tape& t_;
  const QuantMode& mode_;
  double temperature_;
  std::vector<Var> params_;
  std::vector<std::pair<std::string, Var>> by_name_;
};

}  // namespace

StudentGraph build_student(ad::Tape& tape, const ModelConfig& cfg, const BlockWeights& w,
                           BlockTransformSet& set, const QuantMode& mode, const Matrix& x,
                           double soft_round_temperature) {
  if (x.cols() != cfg.hidden || x.rows() % cfg.seq_len != 0)
    throw DimensionError("build_student: input must be a stack of seq_len x hidden sequences");
  StudentBuilder sb(tape, set, mode, soft_round_temperature);
  Tape& t = tape;
  const std::size_t heads = cfg.heads, d = cfg.head_dim(), seq = cfg.seq_len;
  const std::size_t nseq = x.rows() / seq;
  const std::optional<QuantSpec>& act = mode.activations;
  const std::optional<QuantSpec>& wq = mode.weights;
  const std::size_t kv_group = mode.kv && mode.kv->granularity == Granularity::PerGroup ? mode.kv->group_size : 0;
  if (mode.kv && kv_group != 0 && d % kv_group != 0)
    throw DimensionError("build_student: KV group size must divide head_dim");

  const LinearVars la = sb.linear("p_a", set.p_a, "log_c_a");
  const LinearVars lug = sb.linear("p_ug", set.p_ug, "log_c_ug");
  const LinearVars ld = sb.linear("p_d", set.p_d, "log_c_d");

  const Var xin = t.constant(x);
  Var xa = sb.forward(la, ad::rms_norm(t, xin, w.attn_norm, cfg.norm_eps));
  xa = sb.quant(xa, act, 0);
  const Var wq_v = sb.quant(sb.absorb(la, w.wq), wq, 4);
  const Var wk_v = sb.quant(sb.absorb(la, w.wk), wq, 5);
  const Var wv_v = sb.quant(sb.absorb(la, w.wv), wq, 6);
  const Var q = ad::rope(t, ad::matmul_nt(t, xa, wq_v), heads, seq, cfg.rope_base);
  const Var k = ad::rope(t, ad::matmul_nt(t, xa, wk_v), heads, seq, cfg.rope_base);
  const Var v = ad::matmul_nt(t, xa, wv_v);

  std::optional<Var> p_h, p_v, p_v_inv, p_o, p_o_inv;
  if (set.p_h) p_h = ad::cayley(t, *sb.find("p_h"), d);
  if (set.p_v) {
    const RealizedVar r = sb.realize_svd("p_v", d);
    p_v = r.p;
    p_v_inv = r.p_inv;
  }
  if (set.p_o) {
    const RealizedVar r = sb.realize_svd("p_o", heads);
    p_o = r.p;
    p_o_inv = r.p_inv;
  }

  const Var k_clip = sb.clip(11);
  const Var v_clip = sb.clip(12);
  auto kv_quant = [&](Var head, Var clip) {
    if (!mode.kv) return head;
    ad::FakeQuantOptions o;
    o.bits = mode.kv->bits;
    o.scheme = mode.kv->scheme;
    o.group = kv_group;
    o.clip_ratio = mode.kv->clip_ratio;
    o.soft_round_temperature = soft_round_temperature;
    return ad::fake_quant(t, head, clip, o);
  };

  std::vector<Var> head_out;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = ad::slice_cols(t, q, h * d, d);
    Var kh = ad::slice_cols(t, k, h * d, d);
    Var vh = ad::slice_cols(t, v, h * d, d);
    if (p_h) {
      qh = ad::matmul(t, qh, *p_h);
      kh = ad::matmul(t, kh, *p_h);
    }
    if (p_v) vh = ad::matmul(t, vh, *p_v);
    kh = kv_quant(kh, k_clip);
    vh = kv_quant(vh, v_clip);
    std::vector<Var> seq_out;
    for (std::size_t s = 0; s < nseq; ++s) {
      const Var qs = nseq == 1 ? qh : ad::slice_rows(t, qh, s * seq, seq);
      const Var ks = nseq == 1 ? kh : ad::slice_rows(t, kh, s * seq, seq);
      const Var vs = nseq == 1 ? vh : ad::slice_rows(t, vh, s * seq, seq);
      const Var probs = ad::causal_softmax(t, ad::matmul_nt(t, qs, ks), inv_sqrt_d);
      seq_out.push_back(ad::matmul(t, probs, vs));
    }
    head_out.push_back(nseq == 1 ? seq_out[0] : ad::concat_rows(t, seq_out));
  }
  Var xo = ad::concat_cols(t, head_out);
  const Var id_d = t.constant(Matrix::identity(d));
  if (p_o) xo = ad::kron_apply(t, xo, *p_o, id_d);
  xo = sb.quant(xo, act, 1);
  Var wo_v = t.constant(w.wo);
  if (p_o || p_v) {
    const Var po_inv_t = p_o_inv ? ad::transpose(t, *p_o_inv) : t.constant(Matrix::identity(heads));
    const Var pv_inv_t = p_v_inv ? ad::transpose(t, *p_v_inv) : id_d;
    wo_v = ad::kron_apply(t, wo_v, po_inv_t, pv_inv_t);
  }
  wo_v = sb.quant(wo_v, wq, 7);
  const Var x1 = ad::add(t, xin, ad::matmul_nt(t, xo, wo_v));

  Var xu = sb.forward(lug, ad::rms_norm(t, x1, w.ffn_norm, cfg.norm_eps));
  xu = sb.quant(xu, act, 2);
  const Var wg_v = sb.quant(sb.absorb(lug, w.w_gate), wq, 8);
  const Var wu_v = sb.quant(sb.absorb(lug, w.w_up), wq, 9);
  const Var gate = ad::matmul_nt(t, xu, wg_v);
  const Var up = ad::matmul_nt(t, xu, wu_v);
  const Var m = ad::mul(t, ad::silu(t, gate), up);
  Var xd = sb.forward(ld, m);
  xd = sb.quant(xd, act, 3);
  const Var wd_v = sb.quant(sb.absorb(ld, w.w_down), wq, 10);
  const Var out = ad::add(t, x1, ad::matmul_nt(t, xd, wd_v));
  return {out, sb.params()};
}

std::vector<std::vector<double>> block_gradients(const ModelConfig& cfg, const BlockWeights& w,
                                                 BlockTransformSet& set, const QuantMode& mode,
                                                 const Matrix& x, const Matrix& teacher,
                                                 double soft_round_temperature, double* loss_out) {
  ad::Tape tape;
  const StudentGraph g = build_student(tape, cfg, w, set, mode, x, soft_round_temperature);
  const ad::Var loss = ad::sum_squares(tape, ad::sub(tape, g.output, tape.constant(teacher)));
  if (loss_out) *loss_out = tape.value(loss)(0, 0);
  tape.backward(loss);
  std::vector<std::vector<double>> grads;
  for (ad::Var p : g.params) {
    const Matrix& gm = tape.grad(p);
    if (gm.empty()) {
      grads.emplace_back(tape.value(p).size(), 0.0);
    } else {
      grads.emplace_back(gm.data().begin(), gm.data().end());
    }
  }
  return grads;
}

double block_flatness(const ModelConfig& cfg, const BlockWeights& w, const RealizedBlockTransforms& t,
                      const Matrix& x) {
  const PreparedBlock pb = prepare_block(cfg, w, t, QuantMode::off());
  BlockTaps taps;
  run_block(pb, x, &taps);
  double total = 0.0;
  for (const Matrix* m : {&taps.qkv_in, &taps.o_in, &taps.ug_in, &taps.down_in})
    total += flatness(channel_magnitudes(*m, Axis::Columns));
  for (const Matrix* m : {&pb.wq, &pb.wk, &pb.wv, &pb.wo, &pb.w_gate, &pb.w_up, &pb.w_down})
    total += flatness(channel_magnitudes(*m, Axis::Columns));
  return total;
}

namespace {

struct AdamState {
  std::vector<double> m, v;
};

double mean_eval_loss(const ModelConfig& cfg, const BlockWeights& w, const BlockTransformSet& set,
                      const QuantMode& mode, const std::vector<Matrix>& batches_x,
                      const std::vector<Matrix>& batches_teacher) {
  const PreparedBlock pb = prepare_block(cfg, w, set.realize(cfg), mode);
  double total = 0.0;
  for (std::size_t i = 0; i < batches_x.size(); ++i)
    total += block_loss(batches_teacher[i], run_block(pb, batches_x[i]));
  return total / static_cast<double>(batches_x.size());
}

}  // namespace

BlockCalibResult calibrate_block(const ModelConfig& cfg, const BlockWeights& w,
                                 const std::vector<Matrix>& student_inputs,
                                 const std::vector<Matrix>& teacher_inputs, const QuantMode& mode,
                                 const CalibConfig& calib, std::size_t block_index) {
  calib.validate();
  if (student_inputs.empty() || student_inputs.size() != teacher_inputs.size())
    throw DimensionError("calibrate_block: student and teacher inputs must be non-empty and paired");
  const std::size_t n = student_inputs.size();
  const std::size_t batch = std::min(calib.batch, n);

  std::vector<Matrix> teacher_out(n);
  for (std::size_t i = 0; i < n; ++i)
    teacher_out[i] = block_forward(cfg, teacher_inputs[i], w, nullptr, QuantMode::off());

  // Fixed evaluation batches in sample order.
  std::vector<Matrix> eval_x, eval_t;
  for (std::size_t s = 0; s < n; s += batch) {
    const std::size_t e = std::min(n, s + batch);
    eval_x.push_back(stack_rows({student_inputs.begin() + static_cast<std::ptrdiff_t>(s),
                                 student_inputs.begin() + static_cast<std::ptrdiff_t>(e)}));
    eval_t.push_back(stack_rows({teacher_out.begin() + static_cast<std::ptrdiff_t>(s),
                                 teacher_out.begin() + static_cast<std::ptrdiff_t>(e)}));
  }

  BlockCalibResult res;
  res.transforms = init_transforms(cfg, calib, mode, calib.seed * 1000003ULL + block_index);
  // Clip logits without an enabled quantizer would be detached; keep them fixed.
  const std::vector<bool> clip_on = active_clips(mode);

  res.initial_loss = mean_eval_loss(cfg, w, res.transforms, mode, eval_x, eval_t);
  res.trace.push_back({0, block_index, res.initial_loss,
                       block_flatness(cfg, w, res.transforms.realize(cfg), eval_x.front())});
  const BlockTransformSet initial = res.transforms;

  auto slots = parameter_slots(res.transforms);
  if (calib.epochs == 0 || slots.empty() || !mode.any()) {
    res.final_loss = res.initial_loss;
    for (std::size_t e = 1; e <= calib.epochs; ++e)
      res.trace.push_back({e, block_index, res.initial_loss, res.trace.front().flatness});
    return res;
  }

  std::vector<AdamState> state(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) {
    state[i].m.assign(slots[i].values->size(), 0.0);
    state[i].v.assign(slots[i].values->size(), 0.0);
  }

  std::mt19937_64 rng(calib.seed ^ (0x9E3779B97F4A7C15ULL * (block_index + 1)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t steps_per_epoch = (n + batch - 1) / batch;
  const std::size_t total_steps = steps_per_epoch * calib.epochs;
  std::size_t step = 0;
  bool first_step = true;

  for (std::size_t epoch = 1; epoch <= calib.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      std::vector<Matrix> xs, ts;
      for (std::size_t i = b * batch; i < std::min(n, (b + 1) * batch); ++i) {
        xs.push_back(student_inputs[order[i]]);
        ts.push_back(teacher_out[order[i]]);
      }
      const Matrix x = stack_rows(xs);
      const Matrix teacher = stack_rows(ts);

      ad::Tape tape;
      const StudentGraph g = build_student(tape, cfg, w, res.transforms, mode, x);
      const ad::Var loss = ad::sum_squares(tape, ad::sub(tape, g.output, tape.constant(teacher)));
      const double loss_val = tape.value(loss)(0, 0) * static_cast<double>(batch) /
                              static_cast<double>(xs.size());
      if (!std::isfinite(loss_val) || loss_val > calib.divergence_factor * res.initial_loss) {
        std::ostringstream os;
        os << "calibration diverged in block " << block_index << " at epoch " << epoch << ", step "
           << b << ": loss " << loss_val << " vs initial " << res.initial_loss;
        throw NumericalError(os.str());
      }
      epoch_loss += loss_val;
      tape.backward(loss);
      if (first_step) {
        res.detached = tape.detached_parameters();
        first_step = false;
      }

      const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
      const double decay = 0.5 * (1.0 + std::cos(M_PI * progress));
      ++step;
      const double bc1 = 1.0 - std::pow(calib.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(calib.beta2, static_cast<double>(step));
      for (std::size_t si = 0; si < slots.size(); ++si) {
        const Matrix& gm = tape.grad(g.params[si]);
        if (gm.empty()) continue;
        const double lr = (slots[si].is_clip ? calib.lr_clip : calib.lr_transforms) * decay;
        std::vector<double>& p = *slots[si].values;
        for (std::size_t j = 0; j < p.size(); ++j) {
          if (slots[si].is_clip && !clip_on[j]) continue;
          const double gj = gm.data()[j];
          state[si].m[j] = calib.beta1 * state[si].m[j] + (1.0 - calib.beta1) * gj;
          state[si].v[j] = calib.beta2 * state[si].v[j] + (1.0 - calib.beta2) * gj * gj;
          const double mh = state[si].m[j] / bc1;
          const double vh = state[si].v[j] / bc2;
          p[j] -= lr * (mh / (std::sqrt(vh) + calib.adam_eps) + calib.weight_decay * p[j]);
          if (calib.log_sigma_bound > 0.0 && !slots[si].is_clip &&
              (slots[si].name.ends_with("log_sigma") || slots[si].name.starts_with("log_c")))
            p[j] = std::clamp(p[j], -calib.log_sigma_bound, calib.log_sigma_bound);
        }
      }
    }
    res.trace.push_back({epoch, block_index, epoch_loss / static_cast<double>(steps_per_epoch),
                         block_flatness(cfg, w, res.transforms.realize(cfg), eval_x.front())});
  }

  res.final_loss = mean_eval_loss(cfg, w, res.transforms, mode, eval_x, eval_t);
  if (res.final_loss > res.initial_loss) {
    res.transforms = initial;
    res.final_loss = res.initial_loss;
  }
  return res;
}

ModelCalibResult calibrate_model(const TinyModel& model, const std::vector<Matrix>& samples,
                                 const QuantMode& mode, const CalibConfig& calib) {
  calib.validate();
  const ModelConfig& cfg = model.config;
  ModelCalibResult out;
  std::vector<Matrix> teacher_in = samples;
  std::vector<Matrix> student_in = samples;
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const BlockWeights& w = model.blocks[l];
    double gap = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) gap = std::max(gap, max_abs_diff(student_in[i], teacher_in[i]));
    out.input_gap.push_back(gap);

    BlockCalibResult r = calibrate_block(cfg, w, calib.propagate_quantized_inputs ? student_in : teacher_in,
                                         teacher_in, mode, calib, l);
    out.trace.insert(out.trace.end(), r.trace.begin(), r.trace.end());
    out.initial_loss.push_back(r.initial_loss);
    out.final_loss.push_back(r.final_loss);

    const PreparedBlock fp = prepare_block(cfg, w, RealizedBlockTransforms::identity(cfg), QuantMode::off());
    for (auto& x : teacher_in) x = run_block(fp, x);
    if (calib.propagate_quantized_inputs) {
      const PreparedBlock q = prepare_block(cfg, w, r.transforms.realize(cfg), mode);
      for (auto& x : student_in) x = run_block(q, x);
    } else {
      student_in = teacher_in;
    }
    out.transforms.push_back(std::move(r.transforms));
  }
  return out;
}

}  // namespace flatkit
