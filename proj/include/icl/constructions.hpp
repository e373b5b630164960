#pragma once

#include "icl/model.hpp"

#include <optional>

namespace icl {

enum class ConstructionKind { gd, gdpp, copy, kernel_block };

struct ConstructionSpec {
  double eta = 1.0;
  double gamma = 0.0;
  /// N_y x N_x initial model; zero when empty.
  std::optional<Matrix> w0;
  Index n = 10;
  Index nx = 10;
  Index ny = 1;
  ConstructionKind kind = ConstructionKind::gd;

  Matrix initial_weights() const;
  void validate() const;
};

/// W_K = W_Q = [[I_x, 0], [0, 0]], W_V = [[0, 0], [W_0, -I_y]], P = (eta / N) I.
HeadWeights make_gd_weights(const ConstructionSpec& spec);

/// W_K = W_Q = [[I_x, 0], [0, 0]], W_V = [[I_x, 0], [W_0, -I_y]],
/// P = [[-gamma I_x, 0], [0, (eta / N) I_y]].
HeadWeights make_gdpp_weights(const ConstructionSpec& spec);

/// Copy head for alternating tokens with unit positional encodings: the key
/// reads p_i, the query maps p_j to p_{j+1} and the value carries the target
/// slots plus -p_j. Input token 2j becomes (x_j, y_j, 0); target tokens
/// become (0, y_j, 0); the query keeps its content slots and attends to
/// itself so that softmax weights stay concentrated. For softmax
/// attention the query matrix is multiplied by `softmax_scale`, and the
/// result is exact only as the scale grows.
HeadWeights make_copy_weights(Index n, Index nx, Index ny, Index pos_dim, double softmax_scale = 1.0);

/// Optional second head removing the content slots of target tokens, so that
/// they end as all-zero tokens.
HeadWeights make_zeroing_head(Index n, Index nx, Index ny, Index pos_dim);

/// Embeds a head into a wider token space; new rows and columns are zero.
HeadWeights pad_head(const HeadWeights& head, Index dim);

LayerWeights single_head_layer(HeadWeights head, AttnKind attn = AttnKind::linear,
                               bool full_self_attn = false);

/// Puts -W_0 x_query into the query's target slots, the start point the
/// gradient-descent construction expects when W_0 != 0.
TokenSeq prime_query(const TokenSeq& seq, const Matrix& w0);

/// One GD (gamma = 0) or GD++ layer per step, stacked without weight tying.
/// Queries are excluded from keys and values so that the K-layer forward
/// pass equals K explicit steps.
Model stacked_gd_model(const std::vector<double>& etas, const std::vector<double>& gammas, Index n,
                       Index nx, Index ny);

/// Copy layer followed by a gradient-descent layer, on alternating tokens
/// with unit positional encodings of width pos_dim >= 2N + 1.
Model copy_then_gd_model(Index n, Index nx, Index ny, Index pos_dim, double eta,
                         AttnKind copy_attn = AttnKind::linear, double softmax_scale = 1.0,
                         bool zeroing_head = false);

/// Input MLP m followed by a GD layer: the prediction is one descent step on
/// (1 / 2N) sum ||W m(x_i) - y_i||^2 from W_0 = 0. `mlp` acts on full
/// concatenated tokens and must neither read nor write the target slots.
Model assemble_kernel_block(const MlpWeights& mlp, const ConstructionSpec& spec);

std::string to_string(ConstructionKind kind);
ConstructionKind construction_kind_from_string(const std::string& s);

}  // namespace icl
