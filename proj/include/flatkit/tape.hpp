#pragma once

// Reverse-mode gradient tape over a fixed set of matrix operations. Nodes are appended
// in evaluation order, so reverse iteration is a valid topological order.

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "flatkit/matrix.hpp"
#include "flatkit/quant.hpp"

namespace flatkit::ad {

enum class OpKind {
  Leaf,
  MatMul,
  MatMulNT,
  Transpose,
  Add,
  Sub,
  Mul,
  Scale,
  Exp,
  Sigmoid,
  ScaleCols,
  Cayley,
  KronApply,
  RmsNorm,
  Rope,
  SliceCols,
  SliceRows,
  ConcatCols,
  ConcatRows,
  CausalSoftmax,
  Silu,
  FakeQuant,
  SumSquares,
};

const char* op_name(OpKind k);

struct Var {
  std::size_t id = 0;
};

class Tape;

struct TapeNode {
  OpKind kind = OpKind::Leaf;
  std::vector<std::size_t> inputs;
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::string name;
  /// Propagates this node's grad into its inputs.
  std::function<void(Tape&, const TapeNode&)> backward;
};

class Tape {
 public:
  Var constant(Matrix value);
  Var parameter(Matrix value, std::string name);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  /// Gradient of the last backward() target; zero-shaped if never reached.
  const Matrix& grad(Var v) const { return nodes_[v.id].grad; }
  const TapeNode& node(Var v) const { return nodes_[v.id]; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 for a 1x1 loss and runs every backward rule in reverse.
  void backward(Var loss);
  /// Names of parameters that received no gradient path from the last backward target.
  std::vector<std::string> detached_parameters() const;

  Var record(OpKind kind, std::vector<std::size_t> inputs, Matrix value,
             std::function<void(Tape&, const TapeNode&)> backward);
  void accumulate(std::size_t id, const Matrix& g);

 private:
  std::vector<TapeNode> nodes_;
  std::vector<std::size_t> parameters_;
  std::vector<bool> reached_;
};

Var matmul(Tape& t, Var a, Var b);
/// a * b^T
Var matmul_nt(Tape& t, Var a, Var b);
Var transpose(Tape& t, Var a);
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
Var exp(Tape& t, Var a);
Var sigmoid(Tape& t, Var a);
/// a * diag(v) for a row vector v (1 x cols).
Var scale_cols(Tape& t, Var a, Var v);
/// Orthogonal (I - A)(I + A)^{-1} from a 1 x n(n-1)/2 strict-upper-triangle row.
Var cayley(Tape& t, Var upper, std::size_t n);
/// Row-wise x * (P1 kron P2).
Var kron_apply(Tape& t, Var x, Var p1, Var p2);
Var rms_norm(Tape& t, Var x, const std::vector<double>& gain, double eps);
Var rope(Tape& t, Var x, std::size_t heads, std::size_t seq_len, double base);
Var slice_cols(Tape& t, Var a, std::size_t begin, std::size_t count);
Var slice_rows(Tape& t, Var a, std::size_t begin, std::size_t count);
Var concat_cols(Tape& t, const std::vector<Var>& parts);
Var concat_rows(Tape& t, const std::vector<Var>& parts);
/// Row softmax of a * scale with a causal mask (entry (i, j) kept only for j <= i).
Var causal_softmax(Tape& t, Var a, double scale);
Var silu(Tape& t, Var a);

struct FakeQuantOptions {
  int bits = 4;
  Scheme scheme = Scheme::Symmetric;
  /// Contiguous slice width per row; 0 means the whole row.
  std::size_t group = 0;
  double clip_ratio = 1.0;
  double soft_round_temperature = 0.0;
};
/// Fake quantization per row (or per group) with learnable clip `clip` (1 x 1, a ratio in
/// (0, 1]); the effective ratio is options.clip_ratio * clip.
Var fake_quant(Tape& t, Var x, Var clip, const FakeQuantOptions& opts);
/// Sum of squared entries; 1 x 1.
Var sum_squares(Tape& t, Var a);

}  // namespace flatkit::ad
