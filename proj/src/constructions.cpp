#include "icl/constructions.hpp"

#include "icl/errors.hpp"

namespace icl {

Matrix ConstructionSpec::initial_weights() const { return w0 ? *w0 : Matrix::Zero(ny, nx); }

void ConstructionSpec::validate() const {
  if (n < 1) throw ConfigError("construction needs N >= 1");
  if (nx < 1 || ny < 1) throw ConfigError("construction needs nx, ny >= 1");
  if (w0 && (w0->rows() != ny || w0->cols() != nx)) throw ShapeError("W_0 must be ny x nx");
  if (kind == ConstructionKind::gd && gamma != 0.0) throw ConfigError("gamma must be 0 for plain GD");
}

namespace {

HeadWeights gd_like(const ConstructionSpec& spec, bool transform_inputs) {
  spec.validate();
  const Index nx = spec.nx, ny = spec.ny, d = nx + ny;
  HeadWeights h;
  h.key = Matrix::Zero(d, d);
  h.key.topLeftCorner(nx, nx).setIdentity();
  h.query = h.key;
  h.value = Matrix::Zero(d, d);
  h.value.bottomLeftCorner(ny, nx) = spec.initial_weights();
  h.value.bottomRightCorner(ny, ny) = -Matrix::Identity(ny, ny);
  const double step = spec.eta / static_cast<double>(spec.n);
  h.proj = step * Matrix::Identity(d, d);
  if (transform_inputs) {
    h.value.topLeftCorner(nx, nx).setIdentity();
    h.proj.topLeftCorner(nx, nx) = -spec.gamma * Matrix::Identity(nx, nx);
  }
  return h;
}

void check_copy_geometry(Index n, Index nx, Index ny, Index pos_dim) {
  if (n < 1 || nx < 1 || ny < 1) throw ConfigError("copy construction needs N, nx, ny >= 1");
  if (pos_dim < 2 * n + 1)
    throw ConfigError("copy construction needs unit positional encodings of width >= 2N+1");
}

}  // namespace

HeadWeights make_gd_weights(const ConstructionSpec& spec) { return gd_like(spec, false); }

HeadWeights make_gdpp_weights(const ConstructionSpec& spec) { return gd_like(spec, true); }

HeadWeights make_copy_weights(Index n, Index nx, Index ny, Index pos_dim, double softmax_scale) {
  check_copy_geometry(n, nx, ny, pos_dim);
  const Index c = nx + ny, d = c + pos_dim, length = 2 * n + 1;
  HeadWeights h;
  h.key = Matrix::Zero(d, d);
  h.key.bottomRightCorner(pos_dim, pos_dim).setIdentity();
  // shift(t + 1, t) = 1 for positions inside the sequence; the query has no
  // successor and looks at itself, whose value has empty content slots.
  Matrix shift = Matrix::Zero(pos_dim, pos_dim);
  for (Index t = 0; t + 1 < length; ++t) shift(t + 1, t) = 1.0;
  Matrix look = shift;
  look(length - 1, length - 1) = 1.0;
  h.query = Matrix::Zero(d, d);
  h.query.bottomRightCorner(pos_dim, pos_dim) = softmax_scale * look;
  h.value = Matrix::Zero(d, d);
  h.value.block(nx, nx, ny, ny).setIdentity();
  h.value.bottomRightCorner(pos_dim, pos_dim) = -shift.transpose();
  h.proj = Matrix::Identity(d, d);
  return h;
}

HeadWeights make_zeroing_head(Index n, Index nx, Index ny, Index pos_dim) {
  check_copy_geometry(n, nx, ny, pos_dim);
  const Index c = nx + ny, d = c + pos_dim, length = 2 * n + 1;
  HeadWeights h;
  h.key = Matrix::Zero(d, d);
  h.key.bottomRightCorner(pos_dim, pos_dim).setIdentity();
  h.query = Matrix::Zero(d, d);
  for (Index t = 1; t < length; t += 2) h.query(c + t, c + t) = 1.0;
  h.value = Matrix::Zero(d, d);
  h.value.topLeftCorner(c, c) = -Matrix::Identity(c, c);
  h.proj = Matrix::Identity(d, d);
  return h;
}

HeadWeights pad_head(const HeadWeights& head, Index dim) {
  const Index d = head.key.rows();
  if (dim < d) throw ShapeError("pad_head: target width smaller than head");
  auto pad = [&](const Matrix& m) {
    Matrix out = Matrix::Zero(dim, dim);
    out.topLeftCorner(d, d) = m;
    return out;
  };
  return {pad(head.key), pad(head.query), pad(head.value), pad(head.proj)};
}

LayerWeights single_head_layer(HeadWeights head, AttnKind attn, bool full_self_attn) {
  LayerWeights layer;
  layer.heads.push_back(std::move(head));
  layer.attn = attn;
  layer.full_self_attn = full_self_attn;
  return layer;
}

TokenSeq prime_query(const TokenSeq& seq, const Matrix& w0) {
  if (w0.rows() != seq.ny || w0.cols() != seq.nx) throw ShapeError("W_0 must be ny x nx");
  TokenSeq out = seq;
  const Vector xq = seq.tokens.col(seq.query_index).head(seq.nx);
  out.tokens.col(seq.query_index).segment(seq.nx, seq.ny) = -w0 * xq;
  return out;
}

namespace {

ModelConfig plain_config(Index depth, Index nx, Index ny, Index input_dim) {
  ModelConfig cfg;
  cfg.depth = depth;
  cfg.nx = nx;
  cfg.ny = ny;
  cfg.input_dim = input_dim;
  cfg.token_dim = input_dim;
  cfg.full_self_attn = false;
  return cfg;
}

}  // namespace

Model stacked_gd_model(const std::vector<double>& etas, const std::vector<double>& gammas, Index n,
                       Index nx, Index ny) {
  if (etas.empty()) throw ConfigError("stacked model needs at least one step");
  if (!gammas.empty() && gammas.size() != etas.size()) throw ConfigError("etas and gammas differ in length");
  Model m{plain_config(static_cast<Index>(etas.size()), nx, ny, nx + ny), {}};
  for (std::size_t k = 0; k < etas.size(); ++k) {
    ConstructionSpec spec;
    spec.eta = etas[k];
    spec.gamma = gammas.empty() ? 0.0 : gammas[k];
    spec.n = n;
    spec.nx = nx;
    spec.ny = ny;
    spec.kind = spec.gamma == 0.0 ? ConstructionKind::gd : ConstructionKind::gdpp;
    HeadWeights head = spec.gamma == 0.0 ? make_gd_weights(spec) : make_gdpp_weights(spec);
    m.params.layers.push_back(single_head_layer(std::move(head)));
  }
  return m;
}

Model copy_then_gd_model(Index n, Index nx, Index ny, Index pos_dim, double eta, AttnKind copy_attn,
                         double softmax_scale, bool zeroing_head) {
  const Index d = nx + ny + pos_dim;
  Model m{plain_config(2, nx, ny, d), {}};
  m.config.full_self_attn = true;
  m.config.first_layer_attn = copy_attn;
  LayerWeights copy = single_head_layer(make_copy_weights(n, nx, ny, pos_dim, softmax_scale), copy_attn, true);
  if (zeroing_head) copy.heads.push_back(make_zeroing_head(n, nx, ny, pos_dim));
  m.params.layers.push_back(std::move(copy));
  ConstructionSpec spec;
  spec.eta = eta;
  spec.n = n;
  spec.nx = nx;
  spec.ny = ny;
  m.params.layers.push_back(single_head_layer(pad_head(make_gd_weights(spec), d), AttnKind::linear, true));
  return m;
}

Model assemble_kernel_block(const MlpWeights& mlp, const ConstructionSpec& spec) {
  spec.validate();
  if (spec.kind != ConstructionKind::kernel_block) throw ConfigError("spec kind must be kernel_block");
  if (spec.w0 && !spec.w0->isZero(0.0)) throw ConfigError("kernel block starts from W_0 = 0");
  const Index nx = spec.nx, ny = spec.ny, d = nx + ny;
  if (mlp.w1.cols() != d || mlp.w2.rows() != d || mlp.b2.rows() != d || mlp.b1.rows() != mlp.w1.rows() ||
      mlp.w2.cols() != mlp.w1.rows())
    throw ShapeError("kernel block MLP must act on tokens of width nx + ny");
  if (!mlp.w1.rightCols(ny).isZero(0.0)) throw ConfigError("kernel block MLP reads the target slots");
  if (!mlp.w2.bottomRows(ny).isZero(0.0) || !mlp.b2.bottomRows(ny).isZero(0.0))
    throw ConfigError("kernel block MLP writes the target slots");

  Model m{plain_config(1, nx, ny, d), {}};
  m.config.input_mlp = true;
  m.config.widening = std::max<Index>(1, mlp.w1.rows() / nx);
  m.params.input_mlp = MlpWeights{mlp.w1.leftCols(nx), mlp.b1, mlp.w2.topRows(nx), mlp.b2.topRows(nx)};
  ConstructionSpec gd = spec;
  gd.kind = ConstructionKind::gd;
  gd.gamma = 0.0;
  m.params.layers.push_back(single_head_layer(make_gd_weights(gd)));
  return m;
}

std::string to_string(ConstructionKind kind) {
  switch (kind) {
    case ConstructionKind::gd: return "gd";
    case ConstructionKind::gdpp: return "gdpp";
    case ConstructionKind::copy: return "copy";
    case ConstructionKind::kernel_block: return "kernel";
  }
  return "gd";
}

ConstructionKind construction_kind_from_string(const std::string& s) {
  if (s == "gd") return ConstructionKind::gd;
  if (s == "gdpp") return ConstructionKind::gdpp;
  if (s == "copy") return ConstructionKind::copy;
  if (s == "kernel" || s == "kernel_block") return ConstructionKind::kernel_block;
  throw ConfigError("unknown construction kind '" + s + "'");
}

}  // namespace icl
