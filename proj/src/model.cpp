#include "icl/model.hpp"

#include "icl/errors.hpp"

#include <cmath>

namespace icl {

using ad::Var;

Index ModelConfig::readout_row() const { return embed == EmbedMode::none ? nx : token_dim - ny; }

Index ModelConfig::input_mlp_dim() const {
  return embed == EmbedMode::full ? token_dim : token_dim - ny;
}

AttnKind ModelConfig::attn_for(Index layer) const {
  if (layer == 0 && first_layer_attn) return *first_layer_attn;
  return attn;
}

void ModelConfig::validate() const {
  if (depth < 1) throw ConfigError("depth must be >= 1");
  if (heads < 1) throw ConfigError("heads must be >= 1");
  if (nx < 1 || ny < 1) throw ConfigError("nx and ny must be >= 1");
  if (input_dim < nx + ny) throw ConfigError("input_dim smaller than nx + ny");
  if (embed == EmbedMode::none && token_dim != input_dim)
    throw ConfigError("token_dim must equal input_dim without an embedding");
  if (embed == EmbedMode::inputs_only && input_dim != nx + ny)
    throw ConfigError("inputs_only embedding needs concatenated tokens");
  if (input_mlp && embed == EmbedMode::none && input_dim != nx + ny)
    throw ConfigError("input MLP without embedding needs concatenated tokens");
  if (token_dim <= ny) throw ConfigError("token_dim must exceed ny");
  if (widening < 1) throw ConfigError("widening must be >= 1");
  if (layernorm != NormMode::none && token_dim < 2) throw ConfigError("LayerNorm needs token_dim >= 2");
  if (clip_tokens && !(clip_tokens->first < clip_tokens->second))
    throw ConfigError("clip range needs lo < hi");
  if (!(init_std_scale >= 0.0)) throw ConfigError("init_std_scale must be non-negative");
}

std::optional<std::pair<double, double>> default_clip(Index depth) {
  if (depth > 2) return std::make_pair(-10.0, 10.0);
  return std::nullopt;
}

// --- parameter bookkeeping -----------------------------------------------------

std::vector<std::string> param_names(const ModelParams& params) {
  std::vector<std::string> names;
  for_each_param(params, [&](const std::string& n, const Matrix&) { names.push_back(n); });
  return names;
}

ParamList flatten(const ModelParams& params) {
  ParamList out;
  for_each_param(params, [&](const std::string&, const Matrix& m) { out.push_back(m); });
  return out;
}

void unflatten(ModelParams& params, const ParamList& values) {
  std::size_t i = 0;
  for_each_param(params, [&](const std::string& name, Matrix& m) {
    if (i >= values.size()) throw ShapeError("unflatten: too few tensors");
    const Matrix& v = values[i++];
    if (v.rows() != m.rows() || v.cols() != m.cols()) throw ShapeError("unflatten: shape of " + name);
    m = v;
  });
  if (i != values.size()) throw ShapeError("unflatten: too many tensors");
}

VarParams bind_constants(ad::Tape& tape, const ModelParams& params) {
  return map_params<Var>(params, [&](const std::string&, const Matrix& m) { return tape.constant(m); });
}

VarParams bind_from(const ModelParams& shape, std::span<const Var> vars) {
  std::size_t i = 0;
  VarParams out = map_params<Var>(shape, [&](const std::string& name, const Matrix& m) {
    if (i >= vars.size()) throw ShapeError("bind_from: too few variables");
    const Var& v = vars[i++];
    if (v.rows() != m.rows() || v.cols() != m.cols()) throw ShapeError("bind_from: shape of " + name);
    return v;
  });
  if (i != vars.size()) throw ShapeError("bind_from: too many variables");
  return out;
}

namespace {

Matrix truncated(SeedStream& s, Index rows, Index cols, double std) {
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = std * s.truncated_normal(2.0);
  return m;
}

MlpWeights init_mlp(SeedStream& s, Index dim, Index hidden) {
  MlpWeights m;
  m.w1 = truncated(s, hidden, dim, 1.0 / std::sqrt(static_cast<double>(dim)));
  m.b1 = Matrix::Zero(hidden, 1);
  m.w2 = truncated(s, dim, hidden, 1.0 / std::sqrt(static_cast<double>(hidden)));
  m.b2 = Matrix::Zero(dim, 1);
  return m;
}

NormWeights unit_norm(Index dim) { return {Matrix::Ones(dim, 1), Matrix::Zero(dim, 1)}; }

bool layer_has_norm(const ModelConfig& cfg, Index l) {
  return cfg.layernorm == NormMode::all || (cfg.layernorm == NormMode::skip_first && l > 0);
}

void expect_shape(const Matrix& m, Index rows, Index cols, const std::string& name) {
  if (m.rows() != rows || m.cols() != cols)
    throw ShapeError(name + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) +
                     ", got " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
}

void check_mlp(const MlpWeights& m, Index dim, Index hidden, const std::string& name) {
  expect_shape(m.w1, hidden, dim, name + ".w1");
  expect_shape(m.b1, hidden, 1, name + ".b1");
  expect_shape(m.w2, dim, hidden, name + ".w2");
  expect_shape(m.b2, dim, 1, name + ".b2");
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, Seed seed) {
  cfg.validate();
  SeedStream s(seed);
  const Index d = cfg.token_dim;
  const double attn_std = cfg.init_std_scale / static_cast<double>(cfg.depth);
  ModelParams p;
  if (cfg.embed == EmbedMode::full) {
    p.embedding = truncated(s, d, cfg.input_dim, 1.0 / std::sqrt(static_cast<double>(cfg.input_dim)));
  } else if (cfg.embed == EmbedMode::inputs_only) {
    p.embedding = truncated(s, d - cfg.ny, cfg.nx, 1.0 / std::sqrt(static_cast<double>(cfg.nx)));
  }
  if (cfg.input_mlp) {
    const Index m = cfg.input_mlp_dim();
    p.input_mlp = init_mlp(s, m, cfg.widening * m);
  }
  for (Index l = 0; l < cfg.layer_count(); ++l) {
    LayerWeights layer;
    layer.attn = cfg.attn_for(l);
    layer.full_self_attn = cfg.full_self_attn;
    if (layer_has_norm(cfg, l)) layer.norm = unit_norm(d);
    for (Index h = 0; h < cfg.heads; ++h) {
      HeadWeights head;
      head.key = truncated(s, d, d, attn_std);
      head.query = truncated(s, d, d, attn_std);
      head.value = truncated(s, d, d, attn_std);
      head.proj = truncated(s, d, d, attn_std);
      layer.heads.push_back(std::move(head));
    }
    if (cfg.mlp) {
      if (layer_has_norm(cfg, l)) layer.mlp_norm = unit_norm(d);
      layer.mlp = init_mlp(s, d, cfg.widening * d);
    }
    p.layers.push_back(std::move(layer));
  }
  return p;
}

void check_params(const ModelConfig& cfg, const ModelParams& params) {
  cfg.validate();
  const Index d = cfg.token_dim;
  if (static_cast<Index>(params.layers.size()) != cfg.layer_count())
    throw ShapeError("expected " + std::to_string(cfg.layer_count()) + " layers, got " +
                     std::to_string(params.layers.size()));
  if ((cfg.embed != EmbedMode::none) != params.embedding.has_value())
    throw ShapeError("embedding presence disagrees with config");
  if (cfg.embed == EmbedMode::full) expect_shape(*params.embedding, d, cfg.input_dim, "embedding");
  if (cfg.embed == EmbedMode::inputs_only) expect_shape(*params.embedding, d - cfg.ny, cfg.nx, "embedding");
  if (cfg.input_mlp != params.input_mlp.has_value())
    throw ShapeError("input MLP presence disagrees with config");
  if (params.input_mlp) {
    const Index m = cfg.input_mlp_dim();
    check_mlp(*params.input_mlp, m, params.input_mlp->w1.rows(), "input_mlp");
  }
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const LayerWeights& layer = params.layers[l];
    const std::string name = "layer" + std::to_string(l);
    if (layer.heads.empty()) throw ShapeError(name + " has no heads");
    for (const HeadWeights& h : layer.heads) {
      expect_shape(h.key, d, d, name + ".key");
      expect_shape(h.query, d, d, name + ".query");
      expect_shape(h.value, d, d, name + ".value");
      expect_shape(h.proj, d, d, name + ".proj");
    }
    if (layer.norm) {
      expect_shape(layer.norm->gain, d, 1, name + ".norm.gain");
      expect_shape(layer.norm->bias, d, 1, name + ".norm.bias");
    }
    if (layer.mlp) check_mlp(*layer.mlp, d, layer.mlp->w1.rows(), name + ".mlp");
  }
}

// --- forward -------------------------------------------------------------------

namespace {

Var mlp_update(const MlpT<Var>& mlp, const Var& x) {
  Var h = ad::gelu(ad::add_col(ad::matmul(mlp.w1, x), mlp.b1));
  return ad::add_col(ad::matmul(mlp.w2, h), mlp.b2);
}

Vector key_mask(const BatchShape& shape) {
  Vector mask = Vector::Ones(shape.batch * shape.length);
  for (Index b = 0; b < shape.batch; ++b) mask(b * shape.length + shape.query_index) = 0.0;
  return mask;
}

Var residual(const Var& tokens, const Var& update, double scale) {
  return scale == 1.0 ? ad::add(tokens, update) : ad::add(tokens, ad::scale(update, scale));
}

}  // namespace

Var mlp_residual(const MlpT<Var>& mlp, const Var& tokens) { return ad::add(tokens, mlp_update(mlp, tokens)); }

Var affine_layer_norm(const NormT<Var>& norm, const Var& tokens, double eps) {
  return ad::add_col(ad::mul_col(ad::layer_norm_cols(tokens, eps), norm.gain), norm.bias);
}

Var attention_layer(const LayerT<Var>& layer, const Var& tokens, const BatchShape& shape,
                    double norm_eps, double update_scale) {
  if (tokens.cols() != shape.batch * shape.length) throw ShapeError("token count does not match batch shape");
  const Var x = layer.norm ? affine_layer_norm(*layer.norm, tokens, norm_eps) : tokens;
  const Index blocks = shape.batch;
  std::vector<char> row_mask;
  Vector mask;
  if (!layer.full_self_attn) {
    row_mask.assign(static_cast<std::size_t>(shape.length), 1);
    row_mask[static_cast<std::size_t>(shape.query_index)] = 0;
    mask = key_mask(shape);
  }
  Var update;
  for (const HeadT<Var>& head : layer.heads) {
    if (head.key.cols() != x.rows()) throw ShapeError("head width does not match token dimension");
    Var k = ad::matmul(head.key, x);
    Var q = ad::matmul(head.query, x);
    Var v = ad::matmul(head.value, x);
    Var out;
    if (layer.attn == AttnKind::linear) {
      if (!layer.full_self_attn) k = ad::scale_cols(k, mask);
      // sum_i v_i k_i^T per sequence, then applied to every query.
      Var vk = ad::block_matmul(v, k, blocks, false, true);
      out = ad::block_matmul(vk, q, blocks);
    } else {
      Var scores = ad::block_matmul(k, q, blocks, true, false);
      Var weights = ad::softmax_cols(scores, row_mask);
      out = ad::block_matmul(v, weights, blocks);
    }
    Var h = ad::matmul(head.proj, out);
    update = update.valid() ? ad::add(update, h) : h;
  }
  Var e = residual(tokens, update, update_scale);
  if (layer.mlp) {
    const Var y = layer.mlp_norm ? affine_layer_norm(*layer.mlp_norm, e, norm_eps) : e;
    e = residual(e, mlp_update(*layer.mlp, y), update_scale);
  }
  return e;
}

Var embed_tokens(const ModelConfig& cfg, const VarParams& params, const Var& tokens) {
  if (tokens.rows() != cfg.input_dim)
    throw ShapeError("token dimension " + std::to_string(tokens.rows()) + " does not match model input " +
                     std::to_string(cfg.input_dim));
  Var e = tokens;
  if (cfg.embed == EmbedMode::full) {
    e = ad::matmul(*params.embedding, tokens);
  } else if (cfg.embed == EmbedMode::inputs_only) {
    Var x = ad::slice_rows(tokens, 0, cfg.nx);
    Var rest = ad::slice_rows(tokens, cfg.nx, cfg.input_dim - cfg.nx);
    e = ad::concat_rows({ad::matmul(*params.embedding, x), rest});
  }
  if (params.input_mlp) {
    if (cfg.embed == EmbedMode::full) {
      e = mlp_residual(*params.input_mlp, e);
    } else {
      const Index m = cfg.input_mlp_dim();
      Var x = ad::slice_rows(e, 0, m);
      Var rest = ad::slice_rows(e, m, e.rows() - m);
      e = ad::concat_rows({mlp_residual(*params.input_mlp, x), rest});
    }
  }
  return e;
}

Var forward_tokens(const ModelConfig& cfg, const VarParams& params, const Var& tokens,
                   const BatchShape& shape, const ForwardOptions& opts) {
  const Index steps = opts.steps < 0 ? cfg.depth : opts.steps;
  const Index layers = static_cast<Index>(params.layers.size());
  Var e = embed_tokens(cfg, params, tokens);
  for (Index k = 0; k < steps; ++k) {
    const Index l = (cfg.recurrent || layers == 1) ? 0 : k;
    if (l >= layers) throw ShapeError("model has only " + std::to_string(layers) + " layers");
    try {
      const LayerT<Var>& layer = params.layers[static_cast<std::size_t>(l)];
      if (opts.mask_query_after_first && k > 0 && layer.full_self_attn) {
        LayerT<Var> masked = layer;
        masked.full_self_attn = false;
        e = attention_layer(masked, e, shape, cfg.norm_eps, opts.update_scale);
      } else {
        e = attention_layer(layer, e, shape, cfg.norm_eps, opts.update_scale);
      }
      if (cfg.clip_tokens && k + 1 < steps) e = ad::clip(e, cfg.clip_tokens->first, cfg.clip_tokens->second);
    } catch (const NumericError& err) {
      throw NumericError("divergence in layer application " + std::to_string(k) + ": " + err.what());
    }
    if (opts.trace) opts.trace->push_back(e);
  }
  return e;
}

Var readout(const ModelConfig& cfg, const Var& tokens, const BatchShape& shape) {
  std::vector<Index> cols(static_cast<std::size_t>(shape.batch));
  for (Index b = 0; b < shape.batch; ++b) cols[static_cast<std::size_t>(b)] = b * shape.length + shape.query_index;
  return ad::neg(ad::slice_rows(ad::gather_cols(tokens, cols), cfg.readout_row(), cfg.ny));
}

Var batch_loss(const Var& prediction, const Matrix& targets) {
  if (prediction.rows() != targets.rows() || prediction.cols() != targets.cols())
    throw ShapeError("prediction and target shapes differ");
  Var diff = ad::sub(prediction, prediction.tape().constant(targets));
  return ad::scale(ad::sum(ad::square(diff)), 1.0 / static_cast<double>(targets.cols()));
}

// --- plain evaluation -------------------------------------------------------------

namespace {

BatchShape single(const TokenSeq& seq) { return {1, seq.length(), seq.query_index}; }

TokenSeq with_tokens(const TokenSeq& seq, Matrix tokens) {
  TokenSeq out = seq;
  out.tokens = std::move(tokens);
  return out;
}

TokenSeq attention_only(const LayerWeights& layer, const TokenSeq& seq, AttnKind kind) {
  if (layer.attn != kind) throw ConfigError("layer attention kind mismatch");
  ad::Tape tape;
  LayerWeights bare;
  bare.heads = layer.heads;
  bare.attn = layer.attn;
  bare.full_self_attn = layer.full_self_attn;
  ModelParams holder;
  holder.layers.push_back(std::move(bare));
  VarParams vp = bind_constants(tape, holder);
  Var out = attention_layer(vp.layers[0], tape.constant(seq.tokens), single(seq), 1e-6);
  return with_tokens(seq, out.value());
}

}  // namespace

TokenSeq lsa_forward(const LayerWeights& layer, const TokenSeq& seq) {
  return attention_only(layer, seq, AttnKind::linear);
}

TokenSeq softmax_sa_forward(const LayerWeights& layer, const TokenSeq& seq) {
  return attention_only(layer, seq, AttnKind::softmax);
}

TokenSeq mlp_forward(const MlpWeights& mlp, const TokenSeq& seq) {
  ad::Tape tape;
  MlpT<Var> m{tape.constant(mlp.w1), tape.constant(mlp.b1), tape.constant(mlp.w2), tape.constant(mlp.b2)};
  return with_tokens(seq, mlp_residual(m, tape.constant(seq.tokens)).value());
}

TokenSeq layer_norm(const NormWeights& norm, const TokenSeq& seq, double eps) {
  ad::Tape tape;
  NormT<Var> n{tape.constant(norm.gain), tape.constant(norm.bias)};
  return with_tokens(seq, affine_layer_norm(n, tape.constant(seq.tokens), eps).value());
}

ForwardResult transformer_forward(const ModelConfig& cfg, const ModelParams& params, const TokenSeq& seq,
                                  const ForwardOptions& opts) {
  ad::Tape tape;
  VarParams vp = bind_constants(tape, params);
  const BatchShape shape = single(seq);
  ForwardOptions o = opts;
  o.trace = nullptr;
  Var out = forward_tokens(cfg, vp, tape.constant(seq.tokens), shape, o);
  ForwardResult r;
  r.prediction = readout(cfg, out, shape).value().col(0);
  r.final_seq = with_tokens(seq, out.value());
  return r;
}

Matrix predict_batch(const ModelConfig& cfg, const ModelParams& params, const TokenBatch& batch,
                     const ForwardOptions& opts) {
  ad::Tape tape;
  VarParams vp = bind_constants(tape, params);
  ForwardOptions o = opts;
  o.trace = nullptr;
  const BatchShape shape = shape_of(batch);
  Var out = forward_tokens(cfg, vp, tape.constant(batch.tokens), shape, o);
  return readout(cfg, out, shape).value();
}

// --- names -------------------------------------------------------------------------

std::string to_string(AttnKind kind) { return kind == AttnKind::linear ? "linear" : "softmax"; }

AttnKind attn_kind_from_string(const std::string& s) {
  if (s == "linear") return AttnKind::linear;
  if (s == "softmax") return AttnKind::softmax;
  throw ConfigError("unknown attention kind '" + s + "'");
}

std::string to_string(NormMode mode) {
  switch (mode) {
    case NormMode::none: return "none";
    case NormMode::all: return "all";
    case NormMode::skip_first: return "skip_first";
  }
  return "none";
}

NormMode norm_mode_from_string(const std::string& s) {
  if (s == "none") return NormMode::none;
  if (s == "all") return NormMode::all;
  if (s == "skip_first") return NormMode::skip_first;
  throw ConfigError("unknown layernorm mode '" + s + "'");
}

std::string to_string(EmbedMode mode) {
  switch (mode) {
    case EmbedMode::none: return "none";
    case EmbedMode::full: return "full";
    case EmbedMode::inputs_only: return "inputs_only";
  }
  return "none";
}

EmbedMode embed_mode_from_string(const std::string& s) {
  if (s == "none") return EmbedMode::none;
  if (s == "full") return EmbedMode::full;
  if (s == "inputs_only") return EmbedMode::inputs_only;
  throw ConfigError("unknown embedding mode '" + s + "'");
}

}  // namespace icl
