#include "icl/autodiff.hpp"

#include "icl/errors.hpp"

#include <cmath>
#ifdef __GLIBC__
#include <malloc.h>
#endif
#include <limits>
#include <memory>
#include <string>

namespace icl::ad {

const Matrix& Var::value() const { return tape_->value(*this); }

// --- tape --------------------------------------------------------------------

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), false, false, nullptr, "constant"});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), true, false, nullptr, "variable"});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, Backward backward,
                 const char* op) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward), op);
}

Var Tape::record(Matrix value, std::span<const Var> inputs, Backward backward, const char* op) {
  if (!value.allFinite()) throw NumericError(std::string("non-finite value produced by ") + op);
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape_ != this) throw Error(std::string("operand of ") + op + " belongs to another tape");
    needs = needs || nodes_[in.id()].needs_grad;
  }
  nodes_.push_back(
      Node{std::move(value), Matrix(), needs, false, needs ? std::move(backward) : nullptr, op});
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(const Var& output) {
  if (value(output).rows() != 1 || value(output).cols() != 1)
    throw ShapeError("backward() without a seed needs a 1x1 output");
  backward(output, Matrix::Ones(1, 1));
}

void Tape::backward(const Var& output, const Matrix& seed) {
  const Matrix& out = value(output);
  if (seed.rows() != out.rows() || seed.cols() != out.cols())
    throw ShapeError("backward seed shape mismatch");
  for (auto& n : nodes_) n.has_grad = false;
  accumulate(output, seed);
  for (std::size_t i = output.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    const Matrix g = n.grad;
    n.backward(*this, g);
  }
}

Matrix Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id()];
  if (!n.has_grad) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(const Var& v, const Matrix& g) {
  Node& n = nodes_[v.id()];
  if (!n.needs_grad) return;
  if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
    throw ShapeError(std::string("gradient shape mismatch at ") + n.op);
  if (n.has_grad) {
    n.grad += g;
  } else {
    n.grad = g;
    n.has_grad = true;
  }
}

// --- helpers -------------------------------------------------------------------

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

// --- operations ------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                     std::to_string(b.rows()));
  Matrix v(a.rows(), b.cols());
  v.noalias() = a.value() * b.value();
  return a.tape().record(
      std::move(v), {a, b},
      [a, b](Tape& t, const Matrix& g) {
        if (t.needs_grad(a)) t.accumulate(a, g * t.value(b).transpose());
        if (t.needs_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
      },
      "matmul");
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return a.tape().record(
      a.value() + b.value(), {a, b},
      [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
      },
      "add");
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return a.tape().record(
      a.value() - b.value(), {a, b},
      [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        if (t.needs_grad(b)) t.accumulate(b, -g);
      },
      "sub");
}

Var neg(const Var& a) {
  return a.tape().record(
      -a.value(), {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a, -g); }, "neg");
}

Var scale(const Var& a, double s) {
  return a.tape().record(
      s * a.value(), {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate(a, s * g); }, "scale");
}

Var scalar_mul(const Var& s, const Var& a) {
  if (s.rows() != 1 || s.cols() != 1) throw ShapeError("scalar_mul: scale must be 1x1");
  return a.tape().record(
      s.value()(0, 0) * a.value(), {s, a},
      [s, a](Tape& t, const Matrix& g) {
        if (t.needs_grad(s))
          t.accumulate(s, Matrix::Constant(1, 1, g.cwiseProduct(t.value(a)).sum()));
        if (t.needs_grad(a)) t.accumulate(a, t.value(s)(0, 0) * g);
      },
      "scalar_mul");
}

Var hadamard(const Var& a, const Var& b) {
  require_same_shape(a, b, "hadamard");
  return a.tape().record(
      a.value().cwiseProduct(b.value()), {a, b},
      [a, b](Tape& t, const Matrix& g) {
        if (t.needs_grad(a)) t.accumulate(a, g.cwiseProduct(t.value(b)));
        if (t.needs_grad(b)) t.accumulate(b, g.cwiseProduct(t.value(a)));
      },
      "hadamard");
}

Var transpose(const Var& a) {
  return a.tape().record(
      a.value().transpose(), {a},
      [a](Tape& t, const Matrix& g) { t.accumulate(a, g.transpose()); }, "transpose");
}

Var add_col(const Var& a, const Var& v) {
  if (v.cols() != 1 || v.rows() != a.rows()) throw ShapeError("add_col: bad column vector");
  Matrix out = a.value();
  out.colwise() += v.value().col(0);
  return a.tape().record(
      std::move(out), {a, v},
      [a, v](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        if (t.needs_grad(v)) t.accumulate(v, g.rowwise().sum());
      },
      "add_col");
}

Var mul_col(const Var& a, const Var& v) {
  if (v.cols() != 1 || v.rows() != a.rows()) throw ShapeError("mul_col: bad column vector");
  Matrix out = v.value().col(0).asDiagonal() * a.value();
  return a.tape().record(
      std::move(out), {a, v},
      [a, v](Tape& t, const Matrix& g) {
        if (t.needs_grad(a)) t.accumulate(a, t.value(v).col(0).asDiagonal() * g);
        if (t.needs_grad(v)) t.accumulate(v, g.cwiseProduct(t.value(a)).rowwise().sum());
      },
      "mul_col");
}

Var scale_cols(const Var& a, const Vector& w) {
  if (w.size() != a.cols()) throw ShapeError("scale_cols: weight length mismatch");
  Matrix out = a.value() * w.asDiagonal();
  return a.tape().record(
      std::move(out), {a},
      [a, w](Tape& t, const Matrix& g) { t.accumulate(a, g * w.asDiagonal()); }, "scale_cols");
}

Var sum(const Var& a) {
  return a.tape().record(
      Matrix::Constant(1, 1, a.value().sum()), {a},
      [a](Tape& t, const Matrix& g) {
        t.accumulate(a, Matrix::Constant(t.value(a).rows(), t.value(a).cols(), g(0, 0)));
      },
      "sum");
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean of empty matrix");
  return a.tape().record(
      Matrix::Constant(1, 1, a.value().sum() / n), {a},
      [a, n](Tape& t, const Matrix& g) {
        t.accumulate(a, Matrix::Constant(t.value(a).rows(), t.value(a).cols(), g(0, 0) / n));
      },
      "mean");
}

Var square(const Var& a) {
  return a.tape().record(
      a.value().array().square().matrix(), {a},
      [a](Tape& t, const Matrix& g) { t.accumulate(a, 2.0 * g.cwiseProduct(t.value(a))); },
      "square");
}

Var slice_rows(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: out of range");
  return a.tape().record(
      a.value().middleRows(start, count), {a},
      [a, start, count](Tape& t, const Matrix& g) {
        Matrix full = Matrix::Zero(t.value(a).rows(), t.value(a).cols());
        full.middleRows(start, count) = g;
        t.accumulate(a, full);
      },
      "slice_rows");
}

Var gather_cols(const Var& a, const std::vector<Index>& cols) {
  Matrix out(a.rows(), static_cast<Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) {
    if (cols[k] < 0 || cols[k] >= a.cols()) throw ShapeError("gather_cols: out of range");
    out.col(static_cast<Index>(k)) = a.value().col(cols[k]);
  }
  return a.tape().record(
      std::move(out), {a},
      [a, cols](Tape& t, const Matrix& g) {
        Matrix full = Matrix::Zero(t.value(a).rows(), t.value(a).cols());
        for (std::size_t k = 0; k < cols.size(); ++k) full.col(cols[k]) += g.col(static_cast<Index>(k));
        t.accumulate(a, full);
      },
      "gather_cols");
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  Index rows = 0;
  const Index cols = parts.front().cols();
  for (const Var& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var> inputs = parts;
  return parts.front().tape().record(
      std::move(out), std::span<const Var>(inputs),
      [inputs](Tape& t, const Matrix& g) {
        Index off = 0;
        for (const Var& p : inputs) {
          const Index n = t.value(p).rows();
          if (t.needs_grad(p)) t.accumulate(p, g.middleRows(off, n));
          off += n;
        }
      },
      "concat_rows");
}

namespace {

// out block k = op(a_k) op(b_k), written into `out` (preallocated).
void block_product(const Matrix& a, const Matrix& b, Index blocks, bool ta, bool tb, Matrix& out) {
  const Index ca = a.cols() / blocks;
  const Index cb = b.cols() / blocks;
  const Index out_rows = ta ? ca : a.rows();
  const Index out_cols = tb ? b.rows() : cb;
  out.resize(out_rows, out_cols * blocks);
  for (Index k = 0; k < blocks; ++k) {
    auto ak = a.middleCols(k * ca, ca);
    auto bk = b.middleCols(k * cb, cb);
    auto ok = out.middleCols(k * out_cols, out_cols);
    // Blocks are small; lazy products skip the GEMM setup cost.
    if (!ta && !tb) ok.noalias() = ak.lazyProduct(bk);
    else if (ta && !tb) ok.noalias() = ak.transpose().lazyProduct(bk);
    else if (!ta && tb) ok.noalias() = ak.lazyProduct(bk.transpose());
    else ok.noalias() = ak.transpose().lazyProduct(bk.transpose());
  }
}

#ifdef __GLIBC__
// Tapes allocate and free many multi-megabyte buffers per step. Keeping them
// on the heap instead of fresh mmap regions avoids repeated page faults.
const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
#endif

}  // namespace

Var block_matmul(const Var& a, const Var& b, Index blocks, bool transpose_a, bool transpose_b) {
  if (blocks <= 0 || a.cols() % blocks != 0 || b.cols() % blocks != 0)
    throw ShapeError("block_matmul: column counts not divisible by block count");
  const Index ca = a.cols() / blocks;
  const Index cb = b.cols() / blocks;
  const Index inner_a = transpose_a ? a.rows() : ca;
  const Index inner_b = transpose_b ? cb : b.rows();
  if (inner_a != inner_b)
    throw ShapeError("block_matmul: inner dimensions " + std::to_string(inner_a) + " and " +
                     std::to_string(inner_b));
  Matrix out;
  block_product(a.value(), b.value(), blocks, transpose_a, transpose_b, out);
  return a.tape().record(
      std::move(out), {a, b},
      [a, b, blocks, transpose_a, transpose_b](Tape& t, const Matrix& g) {
        const Matrix& av = t.value(a);
        const Matrix& bv = t.value(b);
        Matrix ga, gb;
        // C = op(A) op(B); the four cases of d/dA and d/dB per block.
        if (!transpose_a && !transpose_b) {
          if (t.needs_grad(a)) block_product(g, bv, blocks, false, true, ga);
          if (t.needs_grad(b)) block_product(av, g, blocks, true, false, gb);
        } else if (transpose_a && !transpose_b) {
          if (t.needs_grad(a)) block_product(bv, g, blocks, false, true, ga);
          if (t.needs_grad(b)) block_product(av, g, blocks, false, false, gb);
        } else if (!transpose_a && transpose_b) {
          if (t.needs_grad(a)) block_product(g, bv, blocks, false, false, ga);
          if (t.needs_grad(b)) block_product(g, av, blocks, true, false, gb);
        } else {
          if (t.needs_grad(a)) block_product(bv, g, blocks, true, true, ga);
          if (t.needs_grad(b)) block_product(g, av, blocks, true, true, gb);
        }
        if (t.needs_grad(a)) t.accumulate(a, ga);
        if (t.needs_grad(b)) t.accumulate(b, gb);
      },
      "block_matmul");
}

Var softmax_cols(const Var& s, const std::vector<char>& row_mask) {
  const Index rows = s.rows();
  if (!row_mask.empty() && static_cast<Index>(row_mask.size()) != rows)
    throw ShapeError("softmax_cols: mask length mismatch");
  const bool masked = !row_mask.empty();
  if (masked) {
    bool any = false;
    for (char m : row_mask) any = any || m;
    if (!any) throw ShapeError("softmax_cols: every row masked");
  }
  const Matrix& sv = s.value();
  auto out = std::make_shared<Matrix>(Matrix::Zero(rows, sv.cols()));
  Matrix& o = *out;
  for (Index c = 0; c < sv.cols(); ++c) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index r = 0; r < rows; ++r)
      if (!masked || row_mask[r]) mx = std::max(mx, sv(r, c));
    double total = 0.0;
    for (Index r = 0; r < rows; ++r) {
      if (masked && !row_mask[r]) continue;
      o(r, c) = std::exp(sv(r, c) - mx);
      total += o(r, c);
    }
    o.col(c) /= total;
  }
  return s.tape().record(
      o, {s},
      [s, out](Tape& t, const Matrix& g) {
        const Matrix& a = *out;
        const Eigen::RowVectorXd dots = a.cwiseProduct(g).colwise().sum();
        Matrix gs = a.cwiseProduct(g - Matrix::Ones(a.rows(), 1) * dots);
        t.accumulate(s, gs);
      },
      "softmax_cols");
}

Var gelu(const Var& a) {
  const Eigen::ArrayXXd x = a.value().array();
  const Eigen::ArrayXXd u = kGeluC * (x + kGeluA * x.cube());
  // tanh through the vectorized exponential; saturates correctly at +-inf.
  auto th = std::make_shared<Eigen::ArrayXXd>(1.0 - 2.0 / ((2.0 * u).exp() + 1.0));
  Matrix out = (0.5 * x * (1.0 + *th)).matrix();
  return a.tape().record(
      std::move(out), {a},
      [a, th](Tape& t, const Matrix& g) {
        const Eigen::ArrayXXd x = t.value(a).array();
        const Eigen::ArrayXXd d =
            0.5 * (1.0 + *th) + 0.5 * x * (1.0 - th->square()) * kGeluC * (1.0 + 3.0 * kGeluA * x.square());
        t.accumulate(a, (g.array() * d).matrix());
      },
      "gelu");
}

Var layer_norm_cols(const Var& a, double eps) {
  const Matrix& x = a.value();
  const Index d = x.rows();
  if (d < 2) throw ShapeError("layer_norm_cols: token dimension must be >= 2");
  auto normed = std::make_shared<Matrix>(x.rows(), x.cols());
  auto inv_sigma = std::make_shared<Vector>(x.cols());
  for (Index c = 0; c < x.cols(); ++c) {
    const double mu = x.col(c).mean();
    const double var = (x.col(c).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)(c) = is;
    normed->col(c) = (x.col(c).array() - mu) * is;
  }
  return a.tape().record(
      *normed, {a},
      [a, normed, inv_sigma](Tape& t, const Matrix& g) {
        const Matrix& y = *normed;
        const double dn = static_cast<double>(y.rows());
        Matrix gx(y.rows(), y.cols());
        for (Index c = 0; c < y.cols(); ++c) {
          const double gm = g.col(c).sum() / dn;
          const double gy = g.col(c).dot(y.col(c)) / dn;
          gx.col(c) = (*inv_sigma)(c) * (g.col(c).array() - gm - y.col(c).array() * gy);
        }
        t.accumulate(a, gx);
      },
      "layer_norm_cols");
}

Var clip(const Var& a, double lo, double hi) {
  if (!(lo < hi)) throw ConfigError("clip: lo must be below hi");
  Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  return a.tape().record(
      std::move(out), {a},
      [a, lo, hi](Tape& t, const Matrix& g) {
        const Matrix& x = t.value(a);
        Matrix gx = g;
        for (Index i = 0; i < gx.size(); ++i)
          if (x.data()[i] < lo || x.data()[i] > hi) gx.data()[i] = 0.0;
        t.accumulate(a, gx);
      },
      "clip");
}

// --- drivers ---------------------------------------------------------------------

namespace {

Var checked_loss(const LossFn& loss_fn, Tape& tape, std::span<const Var> vars) {
  Var loss = loss_fn(tape, vars);
  if (!loss.valid() || loss.rows() != 1 || loss.cols() != 1)
    throw ShapeError("loss function must return a 1x1 value");
  return loss;
}

}  // namespace

ValueAndGrad value_and_grad(const LossFn& loss_fn, const ParamList& params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Matrix& p : params) vars.push_back(tape.variable(p));
  Var loss = checked_loss(loss_fn, tape, vars);
  tape.backward(loss);
  ValueAndGrad out;
  out.loss = loss.value()(0, 0);
  out.grads.reserve(vars.size());
  for (const Var& v : vars) out.grads.push_back(tape.grad(v));
  return out;
}

double evaluate(const LossFn& loss_fn, const ParamList& params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Matrix& p : params) vars.push_back(tape.constant(p));
  return checked_loss(loss_fn, tape, vars).value()(0, 0);
}

ParamList finite_diff_grad(const LossFn& loss_fn, const ParamList& params, double step) {
  if (!(step > 0.0)) throw ConfigError("finite_diff_grad: step must be positive");
  ParamList work = params;
  ParamList grads;
  grads.reserve(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix g(params[k].rows(), params[k].cols());
    for (Index i = 0; i < params[k].size(); ++i) {
      const double orig = work[k].data()[i];
      work[k].data()[i] = orig + step;
      const double up = evaluate(loss_fn, work);
      work[k].data()[i] = orig - step;
      const double down = evaluate(loss_fn, work);
      work[k].data()[i] = orig;
      g.data()[i] = (up - down) / (2.0 * step);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace icl::ad
