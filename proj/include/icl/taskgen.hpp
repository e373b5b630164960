#pragma once

#include "icl/matrix.hpp"
#include "icl/rng.hpp"

#include <optional>
#include <string>
#include <vector>

namespace icl {

enum class TaskKind { linear, sine };

/// One in-context regression problem. Context pairs are columns of
/// inputs (N_x x N) and targets (N_y x N).
struct Task {
  Matrix inputs;
  Matrix targets;
  Vector query_input;
  Vector query_target;
  std::optional<Matrix> teacher;
  TaskKind kind = TaskKind::linear;

  Index n() const { return inputs.cols(); }
  Index nx() const { return inputs.rows(); }
  Index ny() const { return targets.rows(); }
};

enum class OodMode { input_range, teacher_scale, alt_dist_scale };

struct OodSpec {
  double alpha = 1.0;
  OodMode mode = OodMode::input_range;
  /// Used by alt_dist_scale; when empty each task picks normal,
  /// exponential or Laplace with probability 1/3.
  std::optional<DistKind> alt_dist;
};

Task sample_linear_task(SeedStream& stream, Index n, Index nx, Index ny, const OodSpec& ood = {});

/// Amplitude a ~ U(0.1, 5), phase ~ U(0, pi), x ~ U(-5, 5) for context and query.
Task sample_sine_task(SeedStream& stream, Index n);

/// Deterministic sine task y = amplitude * sin(phase + x).
Task make_sine_task(double amplitude, double phase, const Vector& xs, double query_x);

struct TaskSpec {
  Index n = 10;
  Index nx = 10;
  Index ny = 1;
  TaskKind kind = TaskKind::linear;
  OodSpec ood;
};

/// Draws `count` tasks; task k uses the child stream stream.split(k).
std::vector<Task> sample_tasks(const SeedStream& stream, const TaskSpec& spec, Index count);

// --- token layouts -----------------------------------------------------------

enum class Layout { concat, alternating };
enum class PosEncoding { none, sinusoidal, unit };

/// Tokens are the columns of `tokens`. Input slots are rows [0, nx), target
/// slots rows [nx, nx + ny), positional slots follow.
struct TokenSeq {
  Matrix tokens;
  Index query_index = 0;
  Layout layout = Layout::concat;
  Index pos_enc_dim = 0;
  Index nx = 0;
  Index ny = 0;

  Index dim() const { return tokens.rows(); }
  Index length() const { return tokens.cols(); }
};

/// e_j = (x_j, y_j) for the context, e_{N+1} = (x_query, 0).
TokenSeq build_tokens_concat(const Task& task);

/// Even positions carry (x_j, 0), odd positions (0, y_j), the last token is
/// (x_query, 0); positional encodings are appended to every token. With
/// PosEncoding::unit, token t carries the unit vector e_t, which needs
/// pos_enc_dim >= 2N + 1.
TokenSeq build_tokens_alternating(const Task& task, Index pos_enc_dim,
                                  PosEncoding encoding = PosEncoding::sinusoidal);

/// Standard sin/cos encoding of `length` positions, dim x length.
Matrix sinusoidal_encoding(Index dim, Index length);

/// Inverse of both builders: context inputs/targets and the query input.
/// The returned task has an empty query target and no teacher.
Task strip_tokens(const TokenSeq& seq);

std::string to_string(Layout layout);
Layout layout_from_string(const std::string& s);
std::string to_string(PosEncoding pe);
PosEncoding pos_encoding_from_string(const std::string& s);
std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& s);
std::string to_string(OodMode mode);
OodMode ood_mode_from_string(const std::string& s);

struct LayoutSpec {
  Layout layout = Layout::concat;
  Index pos_enc_dim = 0;
  PosEncoding encoding = PosEncoding::none;
};

TokenSeq build_tokens(const Task& task, const LayoutSpec& spec);

/// Sequences of equal length stacked side by side: sequence b occupies
/// columns [b * length, (b + 1) * length).
struct TokenBatch {
  Matrix tokens;
  Matrix targets;  // N_y x batch, query targets
  Index batch = 0;
  Index length = 0;
  Index query_index = 0;
  Index nx = 0;
  Index ny = 0;
};

TokenBatch build_batch(const std::vector<Task>& tasks, const LayoutSpec& spec);
TokenBatch build_batch(const std::vector<TokenSeq>& seqs);

/// CSV with header x_1..x_nx,y_1..y_ny,role; the query row carries its
/// target when known.
void export_task_csv(const std::string& path, const Task& task);

}  // namespace icl
