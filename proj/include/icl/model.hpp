#pragma once

#include "icl/autodiff.hpp"
#include "icl/matrix.hpp"
#include "icl/rng.hpp"
#include "icl/taskgen.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace icl {

enum class AttnKind { linear, softmax };
enum class NormMode { none, all, skip_first };

/// How raw tokens enter the model. `full` multiplies the whole token by a
/// learned matrix; `inputs_only` embeds the input slots and keeps the target
/// slots untouched as the last N_y rows.
enum class EmbedMode { none, full, inputs_only };

// Parameter containers are templated on the storage type so that the same
// structure holds plain matrices and their tape variables.
template <class T>
struct HeadT {
  T key, query, value, proj;
};

template <class T>
struct MlpT {
  T w1, b1, w2, b2;
};

template <class T>
struct NormT {
  T gain, bias;
};

template <class T>
struct LayerT {
  std::vector<HeadT<T>> heads;
  AttnKind attn = AttnKind::linear;
  bool full_self_attn = true;
  std::optional<NormT<T>> norm;
  std::optional<MlpT<T>> mlp;
  std::optional<NormT<T>> mlp_norm;
};

template <class T>
struct ParamsT {
  std::vector<LayerT<T>> layers;
  std::optional<T> embedding;
  std::optional<MlpT<T>> input_mlp;
};

using HeadWeights = HeadT<Matrix>;
using MlpWeights = MlpT<Matrix>;
using NormWeights = NormT<Matrix>;
using LayerWeights = LayerT<Matrix>;
using ModelParams = ParamsT<Matrix>;
using VarParams = ParamsT<ad::Var>;

struct ModelConfig {
  Index depth = 1;
  bool recurrent = false;
  Index input_dim = 11;
  Index token_dim = 11;
  Index nx = 10;
  Index ny = 1;
  Index heads = 1;
  AttnKind attn = AttnKind::linear;
  std::optional<AttnKind> first_layer_attn;
  bool full_self_attn = true;
  bool mlp = false;
  Index widening = 4;
  NormMode layernorm = NormMode::none;
  EmbedMode embed = EmbedMode::none;
  bool input_mlp = false;
  std::optional<std::pair<double, double>> clip_tokens;
  double init_std_scale = 0.002;
  double norm_eps = 1e-6;

  /// First row of the target slots inside the model's token space.
  Index readout_row() const;
  /// Width of the input MLP (input slots only unless embed == full).
  Index input_mlp_dim() const;
  Index layer_count() const { return recurrent ? 1 : depth; }
  AttnKind attn_for(Index layer) const;
  void validate() const;
};

/// A configuration together with parameters of matching shape.
struct Model {
  ModelConfig config;
  ModelParams params;
};

/// Clip range used by default: [-10, 10] for depth > 2, none otherwise.
std::optional<std::pair<double, double>> default_clip(Index depth);

// --- parameter traversal -----------------------------------------------------

template <class T, class F>
void for_each_param(ParamsT<T>& p, F&& f) {
  auto mlp = [&](MlpT<T>& m, const std::string& prefix) {
    f(prefix + "w1", m.w1);
    f(prefix + "b1", m.b1);
    f(prefix + "w2", m.w2);
    f(prefix + "b2", m.b2);
  };
  auto norm = [&](NormT<T>& n, const std::string& prefix) {
    f(prefix + "gain", n.gain);
    f(prefix + "bias", n.bias);
  };
  if (p.embedding) f("embedding", *p.embedding);
  if (p.input_mlp) mlp(*p.input_mlp, "input_mlp.");
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string lp = "layer" + std::to_string(l) + ".";
    LayerT<T>& layer = p.layers[l];
    if (layer.norm) norm(*layer.norm, lp + "norm.");
    for (std::size_t h = 0; h < layer.heads.size(); ++h) {
      const std::string hp = lp + "head" + std::to_string(h) + ".";
      f(hp + "key", layer.heads[h].key);
      f(hp + "query", layer.heads[h].query);
      f(hp + "value", layer.heads[h].value);
      f(hp + "proj", layer.heads[h].proj);
    }
    if (layer.mlp_norm) norm(*layer.mlp_norm, lp + "mlp_norm.");
    if (layer.mlp) mlp(*layer.mlp, lp + "mlp.");
  }
}

template <class T, class F>
void for_each_param(const ParamsT<T>& p, F&& f) {
  for_each_param(const_cast<ParamsT<T>&>(p),
                 [&](const std::string& name, T& v) { f(name, static_cast<const T&>(v)); });
}

/// Same structure, every tensor replaced by f(name, tensor).
template <class U, class T, class F>
ParamsT<U> map_params(const ParamsT<T>& p, F&& f) {
  auto mlp = [&](const MlpT<T>& m, const std::string& prefix) {
    return MlpT<U>{f(prefix + "w1", m.w1), f(prefix + "b1", m.b1), f(prefix + "w2", m.w2),
                   f(prefix + "b2", m.b2)};
  };
  auto norm = [&](const NormT<T>& n, const std::string& prefix) {
    return NormT<U>{f(prefix + "gain", n.gain), f(prefix + "bias", n.bias)};
  };
  ParamsT<U> out;
  if (p.embedding) out.embedding = f("embedding", *p.embedding);
  if (p.input_mlp) out.input_mlp = mlp(*p.input_mlp, "input_mlp.");
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string lp = "layer" + std::to_string(l) + ".";
    const LayerT<T>& layer = p.layers[l];
    LayerT<U> nl;
    nl.attn = layer.attn;
    nl.full_self_attn = layer.full_self_attn;
    if (layer.norm) nl.norm = norm(*layer.norm, lp + "norm.");
    for (std::size_t h = 0; h < layer.heads.size(); ++h) {
      const std::string hp = lp + "head" + std::to_string(h) + ".";
      const HeadT<T>& head = layer.heads[h];
      nl.heads.push_back(HeadT<U>{f(hp + "key", head.key), f(hp + "query", head.query),
                                  f(hp + "value", head.value), f(hp + "proj", head.proj)});
    }
    if (layer.mlp_norm) nl.mlp_norm = norm(*layer.mlp_norm, lp + "mlp_norm.");
    if (layer.mlp) nl.mlp = mlp(*layer.mlp, lp + "mlp.");
    out.layers.push_back(std::move(nl));
  }
  return out;
}

std::vector<std::string> param_names(const ModelParams& params);
ParamList flatten(const ModelParams& params);
/// Writes `values` back in flatten() order; shapes must agree.
void unflatten(ModelParams& params, const ParamList& values);

/// Binds every tensor as a tape variable, or as a constant when
/// `is_frozen(name)` holds.
template <class Pred>
VarParams bind_params(ad::Tape& tape, const ModelParams& params, Pred&& is_frozen) {
  return map_params<ad::Var>(params, [&](const std::string& name, const Matrix& m) {
    return is_frozen(name) ? tape.constant(m) : tape.variable(m);
  });
}
VarParams bind_constants(ad::Tape& tape, const ModelParams& params);
/// Binds from an ordered list of already-created variables (flatten order).
VarParams bind_from(const ModelParams& shape, std::span<const ad::Var> vars);

ModelParams init_params(const ModelConfig& cfg, Seed seed);
/// Validates that `params` has the shapes `cfg` implies.
void check_params(const ModelConfig& cfg, const ModelParams& params);

// --- differentiable forward pass --------------------------------------------

struct BatchShape {
  Index batch = 1;
  Index length = 1;
  Index query_index = 0;
};

inline BatchShape shape_of(const TokenBatch& b) { return {b.batch, b.length, b.query_index}; }

struct ForwardOptions {
  /// Multiplies every residual update (dampened rollout uses lambda < 1).
  double update_scale = 1.0;
  /// Number of layer applications; -1 means cfg.depth.
  Index steps = -1;
  /// Keys and values skip the query token from the second application on.
  bool mask_query_after_first = false;
  /// When set, receives the token matrix after every layer application.
  std::vector<ad::Var>* trace = nullptr;
};

ad::Var attention_layer(const LayerT<ad::Var>& layer, const ad::Var& tokens, const BatchShape& shape,
                        double norm_eps, double update_scale = 1.0);
ad::Var mlp_residual(const MlpT<ad::Var>& mlp, const ad::Var& tokens);
ad::Var affine_layer_norm(const NormT<ad::Var>& norm, const ad::Var& tokens, double eps);
/// Raw tokens -> model token space (embedding and input MLP).
ad::Var embed_tokens(const ModelConfig& cfg, const VarParams& params, const ad::Var& tokens);
/// Embedding followed by all layer applications.
ad::Var forward_tokens(const ModelConfig& cfg, const VarParams& params, const ad::Var& tokens,
                       const BatchShape& shape, const ForwardOptions& opts = {});
/// -1 times the target slots of every query token: N_y x batch.
ad::Var readout(const ModelConfig& cfg, const ad::Var& tokens, const BatchShape& shape);
/// Mean over the batch of the squared prediction error.
ad::Var batch_loss(const ad::Var& prediction, const Matrix& targets);

// --- plain evaluation ---------------------------------------------------------

/// Per-sequence operations on a single TokenSeq (no tape bookkeeping exposed).
TokenSeq lsa_forward(const LayerWeights& layer, const TokenSeq& seq);
TokenSeq softmax_sa_forward(const LayerWeights& layer, const TokenSeq& seq);
TokenSeq mlp_forward(const MlpWeights& mlp, const TokenSeq& seq);
TokenSeq layer_norm(const NormWeights& norm, const TokenSeq& seq, double eps = 1e-6);

struct ForwardResult {
  Vector prediction;
  TokenSeq final_seq;
};

ForwardResult transformer_forward(const ModelConfig& cfg, const ModelParams& params,
                                  const TokenSeq& seq, const ForwardOptions& opts = {});
/// Predictions for a whole batch, N_y x batch.
Matrix predict_batch(const ModelConfig& cfg, const ModelParams& params, const TokenBatch& batch,
                     const ForwardOptions& opts = {});

std::string to_string(AttnKind kind);
AttnKind attn_kind_from_string(const std::string& s);
std::string to_string(NormMode mode);
NormMode norm_mode_from_string(const std::string& s);
std::string to_string(EmbedMode mode);
EmbedMode embed_mode_from_string(const std::string& s);

}  // namespace icl
