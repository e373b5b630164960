#pragma once

#include "icl/matrix.hpp"

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

// Tape-based reverse-mode differentiation over whole matrices.
//
// Every node on the tape holds a dense value. Differentiable programs are
// written with the free functions below; there is no way to put an
// operation on the tape other than through them, so a loss built from
// anything else simply does not compile. A forward value that is not
// finite raises NumericError naming the offending operation.
namespace icl::ad {

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var variable(Matrix value);

  /// Appends an operation node. `backward` receives the gradient of the
  /// node and must push contributions into its inputs via accumulate().
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward,
             const char* op);
  Var record(Matrix value, std::span<const Var> inputs, Backward backward, const char* op);

  /// Backpropagates from a 1x1 node with seed 1.
  void backward(const Var& output);
  /// Backpropagates an arbitrary seed of the output's shape. Gradients from
  /// any previous pass are cleared first.
  void backward(const Var& output, const Matrix& seed);

  const Matrix& value(const Var& v) const { return nodes_[v.id()].value; }
  /// Gradient of the last backward pass; zeros if nothing reached `v`.
  Matrix grad(const Var& v) const;
  bool needs_grad(const Var& v) const { return nodes_[v.id()].needs_grad; }
  void accumulate(const Var& v, const Matrix& g);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    bool has_grad = false;
    Backward backward;
    const char* op = "";
  };
  std::vector<Node> nodes_;
};

// --- registered operations -------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
/// s (1x1) times every entry of a.
Var scalar_mul(const Var& s, const Var& a);
Var hadamard(const Var& a, const Var& b);
Var transpose(const Var& a);
/// Adds the column vector v (rows x 1) to every column of a.
Var add_col(const Var& a, const Var& v);
/// Multiplies row r of a by v(r).
Var mul_col(const Var& a, const Var& v);
/// Multiplies column c of a by the constant w(c).
Var scale_cols(const Var& a, const Vector& w);
Var sum(const Var& a);
Var mean(const Var& a);
Var square(const Var& a);
Var slice_rows(const Var& a, Index start, Index count);
Var gather_cols(const Var& a, const std::vector<Index>& cols);
Var concat_rows(const std::vector<Var>& parts);
/// Per-block product. a and b are split into `blocks` equal column blocks;
/// block k of the result is op(a_k) * op(b_k) with op = transpose when the
/// corresponding flag is set. Results are laid side by side.
Var block_matmul(const Var& a, const Var& b, Index blocks, bool transpose_a = false,
                 bool transpose_b = false);
/// Column-wise softmax. Rows with row_mask[r] == 0 receive weight exactly 0;
/// an empty mask means no masking.
Var softmax_cols(const Var& s, const std::vector<char>& row_mask = {});
/// tanh-approximated GELU.
Var gelu(const Var& a);
/// Zero-mean, unit-variance normalization of every column (no affine part).
Var layer_norm_cols(const Var& a, double eps);
Var clip(const Var& a, double lo, double hi);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return matmul(a, b); }

// --- gradient drivers ------------------------------------------------------

using LossFn = std::function<Var(Tape&, std::span<const Var>)>;

struct ValueAndGrad {
  double loss = 0.0;
  ParamList grads;
};

/// Exact reverse-mode gradient of a scalar loss.
ValueAndGrad value_and_grad(const LossFn& loss_fn, const ParamList& params);
/// Forward evaluation only.
double evaluate(const LossFn& loss_fn, const ParamList& params);
/// Central differences (f(p+h) - f(p-h)) / 2h, one coordinate at a time.
ParamList finite_diff_grad(const LossFn& loss_fn, const ParamList& params, double step);

double gelu_value(double x);

}  // namespace icl::ad
