#include "flatkit/tape.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "flatkit/error.hpp"
#include "flatkit/kernels.hpp"
#include "flatkit/linalg.hpp"

namespace flatkit::ad {

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::MatMulNT: return "matmul_nt";
    case OpKind::Transpose: return "transpose";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Exp: return "exp";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::ScaleCols: return "scale_cols";
    case OpKind::Cayley: return "cayley";
    case OpKind::KronApply: return "kron_apply";
    case OpKind::RmsNorm: return "rms_norm";
    case OpKind::Rope: return "rope";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::SliceRows: return "slice_rows";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::CausalSoftmax: return "causal_softmax";
    case OpKind::Silu: return "silu";
    case OpKind::FakeQuant: return "fake_quant";
    case OpKind::SumSquares: return "sum_squares";
  }
  return "?";
}

Var Tape::constant(Matrix value) {
  TapeNode n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {nodes_.size() - 1};
}

Var Tape::parameter(Matrix value, std::string name) {
  TapeNode n;
  n.value = std::move(value);
  n.requires_grad = true;
  n.name = std::move(name);
  nodes_.push_back(std::move(n));
  parameters_.push_back(nodes_.size() - 1);
  return {nodes_.size() - 1};
}

Var Tape::record(OpKind kind, std::vector<std::size_t> inputs, Matrix value,
                 std::function<void(Tape&, const TapeNode&)> backward) {
  TapeNode n;
  n.kind = kind;
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](std::size_t i) { return nodes_[i].requires_grad; });
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {nodes_.size() - 1};
}

void Tape::accumulate(std::size_t id, const Matrix& g) {
  TapeNode& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var loss) {
  if (nodes_[loss.id].value.rows() != 1 || nodes_[loss.id].value.cols() != 1)
    throw DimensionError("backward: loss must be 1x1");
  for (auto& n : nodes_) n.grad = Matrix();
  reached_.assign(nodes_.size(), false);
  if (!nodes_[loss.id].requires_grad) return;
  nodes_[loss.id].grad = Matrix(1, 1, 1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    TapeNode& n = nodes_[i];
    if (n.grad.empty()) continue;
    reached_[i] = true;
    if (n.backward) n.backward(*this, n);
  }
}

std::vector<std::string> Tape::detached_parameters() const {
  std::vector<std::string> out;
  for (std::size_t id : parameters_)
    if (id >= reached_.size() || !reached_[id]) out.push_back(nodes_[id].name);
  return out;
}

namespace {

const Matrix& val(const Tape& t, std::size_t id) { return t.node(Var{id}).value; }

void require_shape(const Matrix& a, const Matrix& b, const char* op) { require_same_shape(a, b, op); }

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
  return t.record(OpKind::MatMul, {a.id, b.id}, kernels::matmul(t.value(a), t.value(b)),
                  [](Tape& tp, const TapeNode& n) {
                    const std::size_t ia = n.inputs[0], ib = n.inputs[1];
                    if (tp.requires_grad(Var{ia})) tp.accumulate(ia, kernels::matmul_nt(n.grad, val(tp, ib)));
                    if (tp.requires_grad(Var{ib})) tp.accumulate(ib, kernels::matmul_tn(val(tp, ia), n.grad));
                  });
}

Var matmul_nt(Tape& t, Var a, Var b) {
  return t.record(OpKind::MatMulNT, {a.id, b.id}, kernels::matmul_nt(t.value(a), t.value(b)),
                  [](Tape& tp, const TapeNode& n) {
                    const std::size_t ia = n.inputs[0], ib = n.inputs[1];
                    if (tp.requires_grad(Var{ia})) tp.accumulate(ia, kernels::matmul(n.grad, val(tp, ib)));
                    if (tp.requires_grad(Var{ib})) tp.accumulate(ib, kernels::matmul_tn(n.grad, val(tp, ia)));
                  });
}

Var transpose(Tape& t, Var a) {
  return t.record(OpKind::Transpose, {a.id}, t.value(a).transposed(),
                  [](Tape& tp, const TapeNode& n) { tp.accumulate(n.inputs[0], n.grad.transposed()); });
}

Var add(Tape& t, Var a, Var b) {
  require_shape(t.value(a), t.value(b), "ad::add");
  return t.record(OpKind::Add, {a.id, b.id}, t.value(a) + t.value(b), [](Tape& tp, const TapeNode& n) {
    tp.accumulate(n.inputs[0], n.grad);
    tp.accumulate(n.inputs[1], n.grad);
  });
}

Var sub(Tape& t, Var a, Var b) {
  require_shape(t.value(a), t.value(b), "ad::sub");
  return t.record(OpKind::Sub, {a.id, b.id}, t.value(a) - t.value(b), [](Tape& tp, const TapeNode& n) {
    tp.accumulate(n.inputs[0], n.grad);
    tp.accumulate(n.inputs[1], n.grad * -1.0);
  });
}

Var mul(Tape& t, Var a, Var b) {
  require_shape(t.value(a), t.value(b), "ad::mul");
  Matrix y = t.value(a);
  const Matrix& bv = t.value(b);
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] *= bv.data()[i];
  return t.record(OpKind::Mul, {a.id, b.id}, std::move(y), [](Tape& tp, const TapeNode& n) {
    const std::size_t ia = n.inputs[0], ib = n.inputs[1];
    if (tp.requires_grad(Var{ia})) {
      Matrix g = n.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] *= val(tp, ib).data()[i];
      tp.accumulate(ia, g);
    }
    if (tp.requires_grad(Var{ib})) {
      Matrix g = n.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] *= val(tp, ia).data()[i];
      tp.accumulate(ib, g);
    }
  });
}

Var scale(Tape& t, Var a, double s) {
  return t.record(OpKind::Scale, {a.id}, t.value(a) * s,
                  [s](Tape& tp, const TapeNode& n) { tp.accumulate(n.inputs[0], n.grad * s); });
}

Var exp(Tape& t, Var a) {
  Matrix y = t.value(a);
  for (double& v : y.data()) v = std::exp(v);
  return t.record(OpKind::Exp, {a.id}, std::move(y), [](Tape& tp, const TapeNode& n) {
    Matrix g = n.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] *= n.value.data()[i];
    tp.accumulate(n.inputs[0], g);
  });
}

Var sigmoid(Tape& t, Var a) {
  Matrix y = t.value(a);
  for (double& v : y.data()) v = 1.0 / (1.0 + std::exp(-v));
  return t.record(OpKind::Sigmoid, {a.id}, std::move(y), [](Tape& tp, const TapeNode& n) {
    Matrix g = n.grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = n.value.data()[i];
      g.data()[i] *= s * (1.0 - s);
    }
    tp.accumulate(n.inputs[0], g);
  });
}

Var scale_cols(Tape& t, Var a, Var v) {
  const Matrix& vv = t.value(v);
  if (vv.rows() != 1) throw DimensionError("ad::scale_cols: scale must be a row vector");
  return t.record(OpKind::ScaleCols, {a.id, v.id}, flatkit::scale_cols(t.value(a), vv.data()),
                  [](Tape& tp, const TapeNode& n) {
                    const std::size_t ia = n.inputs[0], iv = n.inputs[1];
                    const Matrix& av = val(tp, ia);
                    const Matrix& sv = val(tp, iv);
                    if (tp.requires_grad(Var{ia})) tp.accumulate(ia, flatkit::scale_cols(n.grad, sv.data()));
                    if (tp.requires_grad(Var{iv})) {
                      Matrix g(1, sv.cols());
                      for (std::size_t r = 0; r < av.rows(); ++r)
                        for (std::size_t c = 0; c < av.cols(); ++c) g(0, c) += n.grad(r, c) * av(r, c);
                      tp.accumulate(iv, g);
                    }
                  });
}

Var cayley(Tape& t, Var upper, std::size_t n) {
  const Matrix& up = t.value(upper);
  if (up.rows() != 1 || up.cols() != SkewParam::param_count(n))
    throw DimensionError("ad::cayley: parameter row has wrong length");
  SkewParam p(n);
  p.upper.assign(up.data().begin(), up.data().end());
  const Matrix a = p.skew();
  const Matrix id = Matrix::identity(n);
  const Matrix b = lu_solve(id + a, id);  // (I + A)^{-1}
  Matrix q = kernels::matmul(id - a, b);
  return t.record(OpKind::Cayley, {upper.id}, std::move(q), [b, n](Tape& tp, const TapeNode& node) {
    // dQ = -(I + Q) dA (I + A)^{-1}
    Matrix ipq = node.value;
    for (std::size_t i = 0; i < n; ++i) ipq(i, i) += 1.0;
    const Matrix ga = kernels::matmul_nt(kernels::matmul_tn(ipq, node.grad), b) * -1.0;
    Matrix g(1, SkewParam::param_count(n));
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) g(0, k++) = ga(i, j) - ga(j, i);
    tp.accumulate(node.inputs[0], g);
  });
}

Var kron_apply(Tape& t, Var x, Var p1, Var p2) {
  return t.record(
      OpKind::KronApply, {x.id, p1.id, p2.id}, kernels::kron_rows(t.value(x), t.value(p1), t.value(p2)),
      [](Tape& tp, const TapeNode& n) {
        const std::size_t ix = n.inputs[0], i1 = n.inputs[1], i2 = n.inputs[2];
        const Matrix& xv = val(tp, ix);
        const Matrix& a = val(tp, i1);
        const Matrix& b = val(tp, i2);
        const std::size_t n1 = a.rows(), n2 = b.rows();
        if (tp.requires_grad(Var{ix})) tp.accumulate(ix, kernels::kron_rows(n.grad, a.transposed(), b.transposed()));
        if (tp.requires_grad(Var{i1})) {
          // sum_r V_r (G_r P2^T)^T
          const Matrix z = kernels::kron_rows(n.grad, Matrix::identity(n1), b.transposed());
          Matrix g(n1, n1);
          for (std::size_t r = 0; r < xv.rows(); ++r) {
            const double* vr = xv.data().data() + r * xv.cols();
            const double* zr = z.data().data() + r * z.cols();
            for (std::size_t i = 0; i < n1; ++i)
              for (std::size_t j = 0; j < n1; ++j) {
                double s = 0.0;
                for (std::size_t l = 0; l < n2; ++l) s += vr[i * n2 + l] * zr[j * n2 + l];
                g(i, j) += s;
              }
          }
          tp.accumulate(i1, g);
        }
        if (tp.requires_grad(Var{i2})) {
          // sum_r (P1^T V_r)^T G_r, with both viewed as (rows*n1) x n2 stacks
          const Matrix tv = kernels::kron_rows(xv, a, Matrix::identity(n2));
          const Matrix t2(xv.rows() * n1, n2, tv.storage());
          const Matrix g2(xv.rows() * n1, n2, n.grad.storage());
          tp.accumulate(i2, kernels::matmul_tn(t2, g2));
        }
      });
}

Var rms_norm(Tape& t, Var x, const std::vector<double>& gain, double eps) {
  const Matrix& xv = t.value(x);
  if (gain.size() != xv.cols()) throw DimensionError("ad::rms_norm: gain length mismatch");
  std::vector<double> inv(xv.rows());
  Matrix y(xv.rows(), xv.cols());
  const double nc = static_cast<double>(xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double ss = 0.0;
    for (double v : xv.row(r)) ss += v * v;
    inv[r] = 1.0 / std::sqrt(ss / nc + eps);
    for (std::size_t c = 0; c < xv.cols(); ++c) y(r, c) = xv(r, c) * inv[r] * gain[c];
  }
  return t.record(OpKind::RmsNorm, {x.id}, std::move(y), [inv, gain, nc](Tape& tp, const TapeNode& n) {
    const Matrix& xv2 = val(tp, n.inputs[0]);
    Matrix g(xv2.rows(), xv2.cols());
    for (std::size_t r = 0; r < xv2.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < xv2.cols(); ++c) dot += gain[c] * n.grad(r, c) * xv2(r, c);
      const double i3 = inv[r] * inv[r] * inv[r] / nc;
      for (std::size_t c = 0; c < xv2.cols(); ++c)
        g(r, c) = inv[r] * gain[c] * n.grad(r, c) - xv2(r, c) * i3 * dot;
    }
    tp.accumulate(n.inputs[0], g);
  });
}

namespace {

Matrix rope_rotate(const Matrix& x, std::size_t heads, std::size_t seq_len, double base, double sign) {
  const std::size_t d = x.cols() / heads, half = d / 2;
  Matrix y = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double pos = static_cast<double>(seq_len == 0 ? r : r % seq_len);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < half; ++i) {
        const double theta = pos * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
        const double c = std::cos(theta), s = sign * std::sin(theta);
        const double a = x(r, h * d + i), b = x(r, h * d + i + half);
        y(r, h * d + i) = a * c - b * s;
        y(r, h * d + i + half) = a * s + b * c;
      }
  }
  return y;
}

}  // namespace

Var rope(Tape& t, Var x, std::size_t heads, std::size_t seq_len, double base) {
  if (heads == 0 || t.value(x).cols() % heads != 0) throw DimensionError("ad::rope: heads do not divide width");
  return t.record(OpKind::Rope, {x.id}, rope_rotate(t.value(x), heads, seq_len, base, 1.0),
                  [heads, seq_len, base](Tape& tp, const TapeNode& n) {
                    tp.accumulate(n.inputs[0], rope_rotate(n.grad, heads, seq_len, base, -1.0));
                  });
}

Var slice_cols(Tape& t, Var a, std::size_t begin, std::size_t count) {
  return t.record(OpKind::SliceCols, {a.id}, flatkit::slice_cols(t.value(a), begin, count),
                  [begin](Tape& tp, const TapeNode& n) {
                    const Matrix& av = val(tp, n.inputs[0]);
                    Matrix g(av.rows(), av.cols());
                    set_cols(g, begin, n.grad);
                    tp.accumulate(n.inputs[0], g);
                  });
}

Var slice_rows(Tape& t, Var a, std::size_t begin, std::size_t count) {
  return t.record(OpKind::SliceRows, {a.id}, flatkit::slice_rows(t.value(a), begin, count),
                  [begin](Tape& tp, const TapeNode& n) {
                    const Matrix& av = val(tp, n.inputs[0]);
                    Matrix g(av.rows(), av.cols());
                    set_rows(g, begin, n.grad);
                    tp.accumulate(n.inputs[0], g);
                  });
}

Var concat_cols(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("ad::concat_cols: no inputs");
  std::size_t cols = 0;
  std::vector<std::size_t> ids;
  for (Var p : parts) {
    cols += t.value(p).cols();
    ids.push_back(p.id);
  }
  Matrix y(t.value(parts[0]).rows(), cols);
  std::size_t off = 0;
  for (Var p : parts) {
    set_cols(y, off, t.value(p));
    off += t.value(p).cols();
  }
  return t.record(OpKind::ConcatCols, ids, std::move(y), [](Tape& tp, const TapeNode& n) {
    std::size_t o = 0;
    for (std::size_t id : n.inputs) {
      const std::size_t w = val(tp, id).cols();
      if (tp.requires_grad(Var{id})) tp.accumulate(id, flatkit::slice_cols(n.grad, o, w));
      o += w;
    }
  });
}

Var concat_rows(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("ad::concat_rows: no inputs");
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  for (Var p : parts) {
    rows += t.value(p).rows();
    ids.push_back(p.id);
  }
  Matrix y(rows, t.value(parts[0]).cols());
  std::size_t off = 0;
  for (Var p : parts) {
    set_rows(y, off, t.value(p));
    off += t.value(p).rows();
  }
  return t.record(OpKind::ConcatRows, ids, std::move(y), [](Tape& tp, const TapeNode& n) {
    std::size_t o = 0;
    for (std::size_t id : n.inputs) {
      const std::size_t h = val(tp, id).rows();
      if (tp.requires_grad(Var{id})) tp.accumulate(id, flatkit::slice_rows(n.grad, o, h));
      o += h;
    }
  });
}

Var causal_softmax(Tape& t, Var a, double scale_factor) {
  const Matrix& av = t.value(a);
  Matrix y(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    const std::size_t last = std::min(i, av.cols() - 1);
    double mx = -INFINITY;
    for (std::size_t j = 0; j <= last; ++j) mx = std::max(mx, av(i, j) * scale_factor);
    double sum = 0.0;
    for (std::size_t j = 0; j <= last; ++j) {
      y(i, j) = std::exp(av(i, j) * scale_factor - mx);
      sum += y(i, j);
    }
    for (std::size_t j = 0; j <= last; ++j) y(i, j) /= sum;
  }
  return t.record(OpKind::CausalSoftmax, {a.id}, std::move(y), [scale_factor](Tape& tp, const TapeNode& n) {
    Matrix g(n.value.rows(), n.value.cols());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < g.cols(); ++j) dot += n.value(i, j) * n.grad(i, j);
      for (std::size_t j = 0; j < g.cols(); ++j)
        g(i, j) = scale_factor * n.value(i, j) * (n.grad(i, j) - dot);
    }
    tp.accumulate(n.inputs[0], g);
  });
}

Var silu(Tape& t, Var a) {
  Matrix y = t.value(a);
  for (double& v : y.data()) v = v / (1.0 + std::exp(-v));
  return t.record(OpKind::Silu, {a.id}, std::move(y), [](Tape& tp, const TapeNode& n) {
    const Matrix& xv = val(tp, n.inputs[0]);
    Matrix g = n.grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = xv.data()[i];
      const double s = 1.0 / (1.0 + std::exp(-x));
      g.data()[i] *= s + x * s * (1.0 - s);
    }
    tp.accumulate(n.inputs[0], g);
  });
}

Var fake_quant(Tape& t, Var x, Var clip, const FakeQuantOptions& opts) {
  const Matrix& xv = t.value(x);
  const Matrix& cv = t.value(clip);
  if (cv.rows() != 1 || cv.cols() != 1) throw DimensionError("ad::fake_quant: clip must be 1x1");
  const std::size_t width = opts.group == 0 ? xv.cols() : opts.group;
  if (width == 0 || xv.cols() % width != 0) throw DimensionError("ad::fake_quant: group does not divide width");
  const SliceQuantizer sq{opts.bits, opts.scheme, opts.soft_round_temperature};
  const double eff = opts.clip_ratio * cv(0, 0);
  Matrix y(xv.rows(), xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c0 = 0; c0 < xv.cols(); c0 += width)
      sq.forward(xv.row(r).subspan(c0, width), eff, y.row(r).subspan(c0, width));
  return t.record(OpKind::FakeQuant, {x.id, clip.id}, std::move(y),
                  [sq, width, opts](Tape& tp, const TapeNode& n) {
                    const Matrix& xin = val(tp, n.inputs[0]);
                    const double clip_val = opts.clip_ratio * val(tp, n.inputs[1])(0, 0);
                    Matrix gx(xin.rows(), xin.cols());
                    double gclip = 0.0;
                    for (std::size_t r = 0; r < xin.rows(); ++r)
                      for (std::size_t c0 = 0; c0 < xin.cols(); c0 += width)
                        gclip += sq.backward(xin.row(r).subspan(c0, width), clip_val,
                                             n.grad.row(r).subspan(c0, width), gx.row(r).subspan(c0, width));
                    tp.accumulate(n.inputs[0], gx);
                    tp.accumulate(n.inputs[1], Matrix(1, 1, gclip * opts.clip_ratio));
                  });
}

Var sum_squares(Tape& t, Var a) {
  return t.record(OpKind::SumSquares, {a.id}, Matrix(1, 1, squared_frobenius(t.value(a))),
                  [](Tape& tp, const TapeNode& n) {
                    tp.accumulate(n.inputs[0], val(tp, n.inputs[0]) * (2.0 * n.grad(0, 0)));
                  });
}

}  // namespace flatkit::ad
