#pragma once

#include "icl/baselines.hpp"
#include "icl/model.hpp"
#include "icl/taskgen.hpp"

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace icl {

/// Anything that maps an in-context task to a query prediction.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::string name() const = 0;
  /// N_y x tasks.
  virtual Matrix predict(const std::vector<Task>& tasks) const = 0;
  /// d prediction / d x_query for every task at its own query (N_y x N_x each).
  virtual std::vector<Matrix> sensitivities(const std::vector<Task>& tasks) const = 0;
  /// Predictions after 1..steps applications of the dampened update. Stops
  /// early (fewer entries) when the computation overflows.
  virtual std::vector<Matrix> rollout_predictions(const std::vector<Task>& tasks, double lambda,
                                                  Index steps) const = 0;
};

class TransformerPredictor : public Predictor {
 public:
  TransformerPredictor(Model model, LayoutSpec layout, std::string name = "transformer");
  std::string name() const override { return name_; }
  Matrix predict(const std::vector<Task>& tasks) const override;
  std::vector<Matrix> sensitivities(const std::vector<Task>& tasks) const override;
  std::vector<Matrix> rollout_predictions(const std::vector<Task>& tasks, double lambda,
                                          Index steps) const override;
  const Model& model() const { return model_; }

 private:
  Model model_;
  LayoutSpec layout_;
  std::string name_;
};

class GdPredictor : public Predictor {
 public:
  explicit GdPredictor(GdHyper hyper, std::string name = "gd");
  std::string name() const override { return name_; }
  Matrix predict(const std::vector<Task>& tasks) const override;
  std::vector<Matrix> sensitivities(const std::vector<Task>& tasks) const override;
  std::vector<Matrix> rollout_predictions(const std::vector<Task>& tasks, double lambda,
                                          Index steps) const override;
  const GdHyper& hyper() const { return hyper_; }

 private:
  GdHyper hyper_;
  std::string name_;
};

double mean_squared_error(const Matrix& predictions, const std::vector<Task>& tasks);

/// Jacobian of the prediction with respect to the query input, with the
/// context of `task` fixed and its query replaced by `query`.
Matrix sensitivity(const Predictor& model, const Task& task, const Vector& query);

struct AlignmentReport {
  Index tasks = 0;
  double pred_l2 = 0.0;
  /// Cosine of the two stacked prediction vectors over all tasks.
  double pred_cos = 0.0;
  double model_cos = 0.0;
  double model_l2 = 0.0;
  double loss_a = 0.0;
  double loss_b = 0.0;
  /// Tasks skipped in model_cos because a sensitivity had zero norm.
  Index excluded = 0;
};

AlignmentReport alignment_metrics(const Predictor& a, const Predictor& b, const std::vector<Task>& tasks);

struct InterpolationResult {
  /// One scale per layer.
  std::vector<double> beta;
  Model rescaled;
  Model interpolated;
  double loss_tf = 0.0;
  double loss_ref = 0.0;
  double loss_interp = 0.0;
  /// Deep untied models are interpolated best-effort only.
  bool best_effort = false;
};

/// W_KQ = W_K^T W_Q and W_PV = P W_V of one head.
Matrix kq_product(const HeadWeights& h);
Matrix pv_product(const HeadWeights& h);
/// Head with W_K = I, W_Q = kq, W_V = pv, P = I.
HeadWeights head_from_products(const Matrix& kq, const Matrix& pv);

/// beta = mean of the input-slot diagonal of the trained W_KQ divided by the
/// same mean for the reference; the trained products are mapped to
/// (W_KQ / beta, W_PV * beta) and averaged with the reference products.
InterpolationResult rescale_and_interpolate(const Model& tf, const Model& ref, const std::vector<Task>& tasks,
                                            const LayoutSpec& layout);

struct OodRow {
  double alpha = 1.0;
  std::vector<double> losses;  // one per model
};

struct OodTable {
  OodMode mode = OodMode::input_range;
  std::vector<std::string> models;
  std::vector<OodRow> rows;

  void write_csv(const std::filesystem::path& path) const;
};

/// Mean loss of every model for every alpha; tasks are drawn with the same
/// seed for each alpha.
OodTable ood_sweep(const std::vector<const Predictor*>& models, const std::vector<double>& alphas, OodMode mode,
                   const TaskSpec& base, Index count, Seed seed);

struct RolloutResult {
  /// losses[0] is the zero-prediction loss, losses[k] the loss after k steps.
  std::vector<double> losses;
  bool diverged = false;
};

RolloutResult rollout(const Predictor& model, double lambda, Index steps, const std::vector<Task>& tasks);

struct NamedMatrix {
  std::string name;
  Matrix value;
};

/// layer<l>.head<h>.W_KQ and .W_PV for every head.
std::vector<NamedMatrix> export_weight_products(const ModelParams& params);

/// Last diagonal entry of P_h W_V for every head of `layer`.
std::vector<double> head_etas(const LayerWeights& layer);

struct SoftmaxCorrection {
  Matrix weighted_kq;  // sum_h eta_h W_KQ_h
  double diag_rms = 0.0;
  double offdiag_rms = 0.0;
  /// Same ratio over the input-slot block only.
  double input_diag_rms = 0.0;
  double input_offdiag_rms = 0.0;
};

SoftmaxCorrection softmax_correction(const LayerWeights& layer, Index nx);

/// CSV dumps of all products plus etas.json.
void write_weight_products(const std::filesystem::path& dir, const ModelParams& params);

}  // namespace icl
