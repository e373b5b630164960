#pragma once

#include "icl/matrix.hpp"
#include "icl/model.hpp"
#include "icl/rng.hpp"
#include "icl/taskgen.hpp"

#include <functional>
#include <optional>
#include <utility>
#include <vector>

namespace icl {

/// Hyperparameters of explicit K-step gradient descent. Empty gammas mean
/// plain GD; W_0 defaults to zero.
struct GdHyper {
  std::vector<double> etas;
  std::vector<double> gammas;
  double lambda_damp = 1.0;
  std::optional<Matrix> w0;
  /// Token-value clipping between steps, mirroring deep models.
  std::optional<std::pair<double, double>> clip;

  Index steps() const { return static_cast<Index>(etas.size()); }
  double gamma(Index k) const { return gammas.empty() ? 0.0 : gammas[static_cast<std::size_t>(k)]; }
  void validate() const;
};

GdHyper plain_gd(double eta, Index steps = 1);

/// In-context squared loss (1 / 2N) sum ||W x_i - y_i||^2.
double context_loss(const Matrix& w, const Matrix& inputs, const Matrix& targets);

/// W - (eta / N) sum (W x_i - y_i) x_i^T over the context only.
Matrix gd_step(const Matrix& w, const Task& task, double eta);

struct GdppStep {
  Matrix weights;
  Matrix inputs;
  Vector query_input;
};

/// Gradient step on (X, Y) plus the input transformation X <- (I - gamma X X^T) X,
/// applied with the pre-update X to the inputs and to `query`.
GdppStep gdpp_step(const Matrix& w, const Matrix& inputs, const Matrix& targets, double eta, double gamma,
                   const Vector& query = Vector());

struct MultiStepResult {
  Vector prediction;
  /// The linear map x_query -> prediction (the sensitivity).
  Matrix effective_weights;
};

/// K steps in the form realized by stacked attention layers: the target
/// slots carry residuals y_i - sum_k dW_k x_i^(k), inputs and query are
/// transformed by H(X) after every step, and the prediction accumulates
/// dW_k x_query^(k).
MultiStepResult multi_step_gd_detail(const GdHyper& hyper, const Task& task);
Vector multi_step_gd(const GdHyper& hyper, const Task& task);
/// Prediction after each of the K steps.
std::vector<Vector> multi_step_gd_trace(const GdHyper& hyper, const Task& task);

/// Mean squared query error of multi_step_gd over `tasks`.
double gd_loss(const GdHyper& hyper, const std::vector<Task>& tasks);
/// Per-task predictions, N_y x tasks.
Matrix gd_predictions(const GdHyper& hyper, const std::vector<Task>& tasks);

enum class TuneMode { line_search_eta, meta_train };

struct TuneOptions {
  TuneMode mode = TuneMode::line_search_eta;
  Index steps = 1;
  /// Share one (eta, gamma) pair across steps.
  bool recurrent = true;
  bool tune_gamma = false;
  Index adam_steps = 2000;
  double lr = 1e-2;
  double lr_final = 1e-3;
  Index batch_size = 2048;
  Seed seed{7};
  std::optional<std::pair<double, double>> clip;
};

struct TuneResult {
  GdHyper hyper;
  double loss = 0.0;
  /// Grid points or optimizer steps whose loss was not finite.
  Index non_finite = 0;
};

TuneResult tune_gd_hyperparams(const std::vector<Task>& tasks, const TuneOptions& opts);

/// Golden-section search of a 1-D function on [lo, hi] down to relative
/// bracket width `tol`. Non-finite values count as +infinity.
double golden_section(const std::function<double(double)>& f, double lo, double hi, double tol);

/// Residual MLP acting on input slots: m(x) = x + W2 gelu(W1 x + b1) + b2.
/// A wider MLP sees x padded with zeros and only its first |x| outputs count.
Vector apply_feature_map(const MlpWeights& mlp, const Vector& x);

/// sum_i y_i (eta / N) m(x_i) . m(x_query), m = identity without an MLP.
Vector kernel_smoother_predict(const Task& task, const std::optional<MlpWeights>& mlp, double eta);

// --- GD++ curvature -------------------------------------------------------------

/// f(lambda, gamma) = lambda (1 - gamma lambda)^2.
double gdpp_eigen_map(double lambda, double gamma);

struct SpectrumReport {
  double gamma = 0.0;
  std::vector<double> eigenvalues_before;
  std::vector<double> eigenvalues_after;
  double condition_before = 1.0;
  /// Using lambda_1++ = f(1/(3 gamma)) when inside the range and
  /// lambda_n++ = min(f(lambda_1), f(lambda_n)).
  double condition_after_formula = 1.0;
  /// max/min over the actually transformed spectrum.
  double condition_after_true = 1.0;
  double f_local_max = 0.0;
  bool local_max_inside = false;
};

/// Eigenvalues below this floor are raised to it before forming ratios.
inline constexpr double kEigenFloor = 1e-10;

SpectrumReport gdpp_spectrum(double gamma, const std::vector<double>& eigenvalues);

/// Ascending eigenvalues of X X^T.
std::vector<double> hessian_eigenvalues(const Matrix& inputs);

struct SpectrumEnsemble {
  double gamma = 0.0;
  Index tasks = 0;
  double min_eigenvalue = 0.0;
  double max_eigenvalue = 0.0;
  double mean_min_eigenvalue = 0.0;
  double mean_max_eigenvalue = 0.0;
  double median_condition_before = 0.0;
  double median_condition_after_formula = 0.0;
  double median_condition_after_true = 0.0;
};

SpectrumEnsemble gdpp_spectrum_ensemble(const std::vector<Task>& tasks, double gamma);

std::string to_string(TuneMode mode);
TuneMode tune_mode_from_string(const std::string& s);

}  // namespace icl
