#pragma once

#include "icl/baselines.hpp"
#include "icl/errors.hpp"
#include "icl/model.hpp"
#include "icl/taskgen.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace icl {

struct TrainConfig {
  ModelConfig model;
  TaskSpec task;
  LayoutSpec layout;
  Index batch_size = 2048;
  Index steps = 50000;
  double lr = 1e-3;
  double grad_clip = 10.0;
  /// Cycle over this many stored tasks instead of drawing fresh ones.
  std::optional<Index> fixed_pool;
  Seed seed{0};
  Index eval_every = 1000;
  Index eval_tasks = 10000;
  Seed eval_seed{20221};
  /// Tune GD / GD++ baselines with this many steps (0 disables them).
  Index baseline_steps = 0;
  bool baseline_gdpp = false;
  Index baseline_tasks = 10000;
  /// Record first-layer neighbor sensitivities at every evaluation.
  bool probe_copy = false;
  Index probe_tasks = 32;
  /// Tensors whose name starts with one of these prefixes are not trained.
  std::vector<std::string> frozen;
  /// Starting point; init_params(model, seed) when empty.
  std::optional<ModelParams> init;
  /// Write a checkpoint at every evaluation when set.
  std::optional<std::filesystem::path> checkpoint_dir;
  /// Print one progress line per evaluation to stderr.
  bool verbose = false;

  void validate() const;
};

/// 1e-3 for depth < 3, 5e-4 otherwise.
double default_lr(Index depth);

struct TraceRow {
  Index step = 0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  std::optional<double> baseline_gd;
  std::optional<double> baseline_gdpp;
  double grad_norm = 0.0;
  std::optional<double> probe_neighbor;
  std::optional<double> probe_other;
};

struct TrainTrace {
  std::vector<TraceRow> rows;
  /// Tuned baselines used for the baseline columns.
  std::optional<GdHyper> gd_hyper;
  std::optional<GdHyper> gdpp_hyper;

  void write_csv(const std::filesystem::path& path) const;
};

class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, TrainTrace trace, Index step)
      : NumericError(what), trace_(std::move(trace)), step_(step) {}
  const TrainTrace& trace() const { return trace_; }
  Index step() const { return step_; }

 private:
  TrainTrace trace_;
  Index step_;
};

struct TrainResult {
  ModelParams params;
  TrainTrace trace;
};

TrainResult meta_train(const TrainConfig& cfg);

/// Alternating tokens, two layers, softmax first layer, neighbor probes on.
TrainResult train_copy_experiment(TrainConfig cfg);

/// Mean squared query error, evaluated in chunks.
double eval_loss(const ModelParams& params, const ModelConfig& model, const TokenBatch& batch);
double eval_loss(const ModelParams& params, const ModelConfig& model, const std::vector<Task>& tasks,
                 const LayoutSpec& layout);

/// The held-out evaluation tasks of a config (fixed eval seed).
std::vector<Task> eval_tasks(const TrainConfig& cfg);

struct CopyProbe {
  double neighbor = 0.0;
  double other = 0.0;
};

/// Mean Frobenius norm of d(first-layer output of input token 2j) / d(token 2j+1)
/// and of the same Jacobian with respect to every other token (excluding 2j itself).
CopyProbe copy_probe(const ModelConfig& model, const ModelParams& params, const TokenBatch& batch);

}  // namespace icl
