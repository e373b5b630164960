#include "icl/baselines.hpp"

#include "icl/autodiff.hpp"
#include "icl/errors.hpp"
#include "icl/optim.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>

namespace icl {

void GdHyper::validate() const {
  if (etas.empty()) throw ConfigError("GD needs at least one step");
  if (!gammas.empty() && gammas.size() != etas.size())
    throw ConfigError("etas and gammas must have the same length");
  if (!(lambda_damp > 0.0 && lambda_damp <= 1.0)) throw ConfigError("lambda_damp must lie in (0, 1]");
  if (clip && !(clip->first < clip->second)) throw ConfigError("clip range needs lo < hi");
}

GdHyper plain_gd(double eta, Index steps) {
  GdHyper h;
  h.etas.assign(static_cast<std::size_t>(steps), eta);
  return h;
}

double context_loss(const Matrix& w, const Matrix& inputs, const Matrix& targets) {
  return (w * inputs - targets).squaredNorm() / (2.0 * static_cast<double>(inputs.cols()));
}

Matrix gd_step(const Matrix& w, const Task& task, double eta) {
  if (w.rows() != task.ny() || w.cols() != task.nx()) throw ShapeError("gd_step: W must be ny x nx");
  const double scale = eta / static_cast<double>(task.n());
  return w - scale * (w * task.inputs - task.targets) * task.inputs.transpose();
}

GdppStep gdpp_step(const Matrix& w, const Matrix& inputs, const Matrix& targets, double eta, double gamma,
                   const Vector& query) {
  if (w.rows() != targets.rows() || w.cols() != inputs.rows() || inputs.cols() != targets.cols())
    throw ShapeError("gdpp_step: inconsistent shapes");
  if (query.size() != 0 && query.size() != inputs.rows()) throw ShapeError("gdpp_step: query width");
  const double scale = eta / static_cast<double>(inputs.cols());
  const Matrix gram = inputs * inputs.transpose();
  GdppStep out;
  out.weights = w - scale * (w * inputs - targets) * inputs.transpose();
  out.inputs = inputs - gamma * gram * inputs;
  if (query.size() != 0) out.query_input = query - gamma * gram * query;
  return out;
}

namespace {

void clip_in_place(Matrix& m, const std::pair<double, double>& range) {
  m = m.cwiseMax(range.first).cwiseMin(range.second);
}

void clip_in_place(Vector& v, const std::pair<double, double>& range) {
  v = v.cwiseMax(range.first).cwiseMin(range.second);
}

}  // namespace

namespace {

MultiStepResult run_steps(const GdHyper& hyper, const Task& task, std::vector<Vector>* trace) {
  hyper.validate();
  const Index nx = task.nx(), ny = task.ny();
  const double n = static_cast<double>(task.n());
  const Matrix w0 = hyper.w0 ? *hyper.w0 : Matrix::Zero(ny, nx);
  if (w0.rows() != ny || w0.cols() != nx) throw ShapeError("W_0 must be ny x nx");

  Matrix x = task.inputs;
  Matrix residual = task.targets - w0 * x;
  Vector xq = task.query_input;
  Vector pred = w0 * xq;
  Matrix weff = w0;
  Matrix transform = Matrix::Identity(nx, nx);
  const double lambda = hyper.lambda_damp;
  for (Index k = 0; k < hyper.steps(); ++k) {
    const Matrix dw = (lambda * hyper.etas[static_cast<std::size_t>(k)] / n) * residual * x.transpose();
    residual.noalias() -= dw * x;
    pred.noalias() += dw * xq;
    weff.noalias() += dw * transform;
    const double gamma = lambda * hyper.gamma(k);
    if (gamma != 0.0) {
      const Matrix h = Matrix::Identity(nx, nx) - gamma * x * x.transpose();
      x = h * x;
      xq = h * xq;
      transform = h * transform;
    }
    if (hyper.clip && k + 1 < hyper.steps()) {
      clip_in_place(x, *hyper.clip);
      clip_in_place(residual, *hyper.clip);
      clip_in_place(xq, *hyper.clip);
      clip_in_place(pred, *hyper.clip);
    }
    if (trace) trace->push_back(pred);
  }
  return {pred, weff};
}

}  // namespace

MultiStepResult multi_step_gd_detail(const GdHyper& hyper, const Task& task) {
  return run_steps(hyper, task, nullptr);
}

std::vector<Vector> multi_step_gd_trace(const GdHyper& hyper, const Task& task) {
  std::vector<Vector> trace;
  run_steps(hyper, task, &trace);
  return trace;
}

Vector multi_step_gd(const GdHyper& hyper, const Task& task) { return multi_step_gd_detail(hyper, task).prediction; }

Matrix gd_predictions(const GdHyper& hyper, const std::vector<Task>& tasks) {
  if (tasks.empty()) return Matrix();
  Matrix out(tasks.front().ny(), static_cast<Index>(tasks.size()));
  for (std::size_t i = 0; i < tasks.size(); ++i) out.col(static_cast<Index>(i)) = multi_step_gd(hyper, tasks[i]);
  return out;
}

double gd_loss(const GdHyper& hyper, const std::vector<Task>& tasks) {
  if (tasks.empty()) throw ConfigError("gd_loss needs at least one task");
  double total = 0.0;
  for (const Task& t : tasks) total += (multi_step_gd(hyper, t) - t.query_target).squaredNorm();
  return total / static_cast<double>(tasks.size());
}

double golden_section(const std::function<double(double)>& f, double lo, double hi, double tol) {
  auto eval = [&](double v) {
    const double r = f(v);
    return std::isfinite(r) ? r : std::numeric_limits<double>::infinity();
  };
  const double ratio = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - ratio * (b - a), d = a + ratio * (b - a);
  double fc = eval(c), fd = eval(d);
  while ((b - a) > tol * 0.5 * (std::abs(a) + std::abs(b))) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - ratio * (b - a);
      fc = eval(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + ratio * (b - a);
      fd = eval(d);
    }
  }
  return fc <= fd ? c : d;
}

namespace {

struct GdBatch {
  Matrix inputs;     // nx x (B * N)
  Matrix targets;    // ny x (B * N)
  Matrix queries;    // nx x B
  Matrix query_targets;  // ny x B
  Index batch = 0;
  Index n = 0;
};

GdBatch stack_tasks(const std::vector<Task>& tasks, const std::vector<std::size_t>& idx) {
  GdBatch b;
  b.batch = static_cast<Index>(idx.size());
  const Task& first = tasks[idx.front()];
  b.n = first.n();
  b.inputs.resize(first.nx(), b.batch * b.n);
  b.targets.resize(first.ny(), b.batch * b.n);
  b.queries.resize(first.nx(), b.batch);
  b.query_targets.resize(first.ny(), b.batch);
  for (Index i = 0; i < b.batch; ++i) {
    const Task& t = tasks[idx[static_cast<std::size_t>(i)]];
    if (t.n() != b.n) throw ShapeError("tasks in a tuning batch must share N");
    b.inputs.middleCols(i * b.n, b.n) = t.inputs;
    b.targets.middleCols(i * b.n, b.n) = t.targets;
    b.queries.col(i) = t.query_input;
    b.query_targets.col(i) = t.query_target;
  }
  return b;
}

// Unrolled K-step GD/GD++ on a stacked batch; params are 1x1 etas followed by 1x1 gammas.
ad::Var unrolled_loss(ad::Tape& tape, std::span<const ad::Var> params, const GdBatch& b, const TuneOptions& o) {
  const Index shared = o.recurrent ? 1 : o.steps;
  const double inv_n = 1.0 / static_cast<double>(b.n);
  ad::Var x = tape.constant(b.inputs);
  ad::Var r = tape.constant(b.targets);
  ad::Var xq = tape.constant(b.queries);
  ad::Var pred;
  for (Index k = 0; k < o.steps; ++k) {
    const Index slot = o.recurrent ? 0 : k;
    ad::Var dw = ad::scalar_mul(params[static_cast<std::size_t>(slot)],
                                ad::scale(ad::block_matmul(r, x, b.batch, false, true), inv_n));
    r = ad::sub(r, ad::block_matmul(dw, x, b.batch));
    ad::Var step_pred = ad::block_matmul(dw, xq, b.batch);
    pred = pred.valid() ? ad::add(pred, step_pred) : step_pred;
    if (o.tune_gamma) {
      const ad::Var& gamma = params[static_cast<std::size_t>(shared + slot)];
      ad::Var gram = ad::block_matmul(x, x, b.batch, false, true);
      ad::Var new_x = ad::sub(x, ad::scalar_mul(gamma, ad::block_matmul(gram, x, b.batch)));
      xq = ad::sub(xq, ad::scalar_mul(gamma, ad::block_matmul(gram, xq, b.batch)));
      x = new_x;
    }
    if (o.clip && k + 1 < o.steps) {
      x = ad::clip(x, o.clip->first, o.clip->second);
      r = ad::clip(r, o.clip->first, o.clip->second);
      xq = ad::clip(xq, o.clip->first, o.clip->second);
      pred = ad::clip(pred, o.clip->first, o.clip->second);
    }
  }
  ad::Var diff = ad::sub(pred, tape.constant(b.query_targets));
  return ad::scale(ad::sum(ad::square(diff)), 1.0 / static_cast<double>(b.batch));
}

TuneResult line_search(const std::vector<Task>& tasks, const TuneOptions& opts) {
  TuneResult result;
  auto hyper_for = [&](double eta) {
    GdHyper h = plain_gd(eta, opts.steps);
    h.clip = opts.clip;
    return h;
  };
  auto objective = [&](double eta) {
    const double l = gd_loss(hyper_for(eta), tasks);
    if (!std::isfinite(l)) ++result.non_finite;
    return l;
  };
  constexpr int points = 41;
  std::vector<double> grid(points), values(points);
  for (int i = 0; i < points; ++i) {
    grid[i] = std::pow(10.0, -3.0 + 4.0 * i / (points - 1));
    values[i] = objective(grid[i]);
    if (!std::isfinite(values[i])) values[i] = std::numeric_limits<double>::infinity();
  }
  const int best = static_cast<int>(std::min_element(values.begin(), values.end()) - values.begin());
  if (!std::isfinite(values[best])) throw NumericError("line search: loss not finite anywhere on the grid");
  const double lo = grid[std::max(best - 1, 0)];
  const double hi = grid[std::min(best + 1, points - 1)];
  double eta = golden_section(objective, lo, hi, 1e-4);
  double loss = objective(eta);
  if (!(loss <= values[best])) {
    eta = grid[best];
    loss = values[best];
  }
  result.hyper = hyper_for(eta);
  result.loss = loss;
  return result;
}

}  // namespace

TuneResult tune_gd_hyperparams(const std::vector<Task>& tasks, const TuneOptions& opts) {
  if (tasks.empty()) throw ConfigError("tuning needs at least one task");
  if (opts.steps < 1) throw ConfigError("tuning needs at least one step");
  if (opts.mode == TuneMode::line_search_eta) {
    if (opts.tune_gamma) throw ConfigError("line search tunes eta only; use meta_train for gamma");
    return line_search(tasks, opts);
  }

  // Start from the line-search optimum on a subsample.
  std::vector<Task> subset(tasks.begin(),
                           tasks.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(tasks.size(), 2048)));
  TuneOptions ls = opts;
  ls.mode = TuneMode::line_search_eta;
  ls.tune_gamma = false;
  const double eta0 = line_search(subset, ls).hyper.etas.front();

  const Index shared = opts.recurrent ? 1 : opts.steps;
  ParamList params;
  for (Index i = 0; i < shared; ++i) params.push_back(Matrix::Constant(1, 1, eta0));
  if (opts.tune_gamma)
    for (Index i = 0; i < shared; ++i) params.push_back(Matrix::Zero(1, 1));

  AdamState adam = make_adam(params, opts.lr);
  SeedStream stream(opts.seed);
  const std::size_t pool = tasks.size();
  const bool full = static_cast<Index>(pool) <= opts.batch_size;
  std::vector<std::size_t> all(pool);
  for (std::size_t i = 0; i < pool; ++i) all[i] = i;
  const GdBatch full_batch = full ? stack_tasks(tasks, all) : GdBatch{};
  TuneResult result;
  const Index switch_at = (opts.adam_steps * 3) / 4;
  for (Index step = 0; step < opts.adam_steps; ++step) {
    if (step == switch_at) adam.lr = opts.lr_final;
    GdBatch sampled;
    if (!full) {
      SeedStream s = stream.split(static_cast<std::uint64_t>(step));
      std::vector<std::size_t> idx(static_cast<std::size_t>(opts.batch_size));
      for (auto& i : idx) i = static_cast<std::size_t>(s.next_u64() % pool);
      sampled = stack_tasks(tasks, idx);
    }
    const GdBatch& b = full ? full_batch : sampled;
    try {
      ad::ValueAndGrad vg = ad::value_and_grad(
          [&](ad::Tape& t, std::span<const ad::Var> p) { return unrolled_loss(t, p, b, opts); }, params);
      vg.grads = clip_global_norm(std::move(vg.grads), 10.0);
      adam_step(adam, params, vg.grads);
    } catch (const NumericError&) {
      ++result.non_finite;
    }
  }

  GdHyper h;
  for (Index k = 0; k < opts.steps; ++k) {
    const Index slot = opts.recurrent ? 0 : k;
    h.etas.push_back(params[static_cast<std::size_t>(slot)](0, 0));
    if (opts.tune_gamma) h.gammas.push_back(params[static_cast<std::size_t>(shared + slot)](0, 0));
  }
  h.clip = opts.clip;
  result.hyper = h;
  result.loss = gd_loss(h, tasks);
  return result;
}

Vector apply_feature_map(const MlpWeights& mlp, const Vector& x) {
  const Index width = mlp.w1.cols();
  if (width < x.size()) throw ShapeError("feature map narrower than its input");
  Vector full = Vector::Zero(width);
  full.head(x.size()) = x;
  Vector hidden = mlp.w1 * full + mlp.b1;
  for (Index i = 0; i < hidden.size(); ++i) hidden(i) = ad::gelu_value(hidden(i));
  return (full + mlp.w2 * hidden + mlp.b2).head(x.size());
}

Vector kernel_smoother_predict(const Task& task, const std::optional<MlpWeights>& mlp, double eta) {
  auto feature = [&](const Vector& x) { return mlp ? apply_feature_map(*mlp, x) : x; };
  const Vector fq = feature(task.query_input);
  Vector out = Vector::Zero(task.ny());
  const double scale = eta / static_cast<double>(task.n());
  for (Index i = 0; i < task.n(); ++i) {
    const double k = feature(task.inputs.col(i)).dot(fq);
    out += scale * k * task.targets.col(i);
  }
  return out;
}

double gdpp_eigen_map(double lambda, double gamma) {
  const double t = 1.0 - gamma * lambda;
  return lambda * t * t;
}

SpectrumReport gdpp_spectrum(double gamma, const std::vector<double>& eigenvalues) {
  if (gamma < 0.0) throw ConfigError("gamma must be non-negative");
  if (eigenvalues.empty()) throw ConfigError("spectrum needs at least one eigenvalue");
  SpectrumReport r;
  r.gamma = gamma;
  const double top = *std::max_element(eigenvalues.begin(), eigenvalues.end());
  for (double l : eigenvalues) {
    if (l < -1e-8 * std::max(1.0, std::abs(top))) throw ConfigError("eigenvalues must be non-negative");
    r.eigenvalues_before.push_back(std::max(l, 0.0));
  }
  for (double l : r.eigenvalues_before) r.eigenvalues_after.push_back(gdpp_eigen_map(l, gamma));

  auto floored = [](double v) { return std::max(v, kEigenFloor); };
  const auto [mn, mx] = std::minmax_element(r.eigenvalues_before.begin(), r.eigenvalues_before.end());
  const double l1 = *mx, ln = *mn;
  r.condition_before = floored(l1) / floored(ln);

  const double f1 = gdpp_eigen_map(l1, gamma), fn = gdpp_eigen_map(ln, gamma);
  double top_after = std::max(f1, fn);
  if (gamma > 0.0) {
    const double peak = 1.0 / (3.0 * gamma);
    r.f_local_max = gdpp_eigen_map(peak, gamma);
    r.local_max_inside = peak >= ln && peak <= l1;
    if (r.local_max_inside) top_after = r.f_local_max;
  } else {
    r.f_local_max = std::numeric_limits<double>::infinity();
  }
  r.condition_after_formula = floored(top_after) / floored(std::min(f1, fn));
  const auto [amn, amx] = std::minmax_element(r.eigenvalues_after.begin(), r.eigenvalues_after.end());
  r.condition_after_true = floored(*amx) / floored(*amn);
  return r;
}

std::vector<double> hessian_eigenvalues(const Matrix& inputs) {
  Eigen::SelfAdjointEigenSolver<Matrix> solver(inputs * inputs.transpose(), Eigen::EigenvaluesOnly);
  const Vector& ev = solver.eigenvalues();
  return {ev.data(), ev.data() + ev.size()};
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace

SpectrumEnsemble gdpp_spectrum_ensemble(const std::vector<Task>& tasks, double gamma) {
  if (tasks.empty()) throw ConfigError("spectrum ensemble needs tasks");
  SpectrumEnsemble e;
  e.gamma = gamma;
  e.tasks = static_cast<Index>(tasks.size());
  e.min_eigenvalue = std::numeric_limits<double>::infinity();
  e.max_eigenvalue = -std::numeric_limits<double>::infinity();
  std::vector<double> before, formula, truth;
  for (const Task& t : tasks) {
    const SpectrumReport r = gdpp_spectrum(gamma, hessian_eigenvalues(t.inputs));
    const double lo = r.eigenvalues_before.front(), hi = r.eigenvalues_before.back();
    e.min_eigenvalue = std::min(e.min_eigenvalue, lo);
    e.max_eigenvalue = std::max(e.max_eigenvalue, hi);
    e.mean_min_eigenvalue += lo;
    e.mean_max_eigenvalue += hi;
    before.push_back(r.condition_before);
    formula.push_back(r.condition_after_formula);
    truth.push_back(r.condition_after_true);
  }
  e.mean_min_eigenvalue /= static_cast<double>(tasks.size());
  e.mean_max_eigenvalue /= static_cast<double>(tasks.size());
  e.median_condition_before = median(before);
  e.median_condition_after_formula = median(formula);
  e.median_condition_after_true = median(truth);
  return e;
}

std::string to_string(TuneMode mode) { return mode == TuneMode::line_search_eta ? "line_search_eta" : "meta_train"; }

TuneMode tune_mode_from_string(const std::string& s) {
  if (s == "line_search_eta" || s == "line_search") return TuneMode::line_search_eta;
  if (s == "meta_train") return TuneMode::meta_train;
  throw ConfigError("unknown tuning mode '" + s + "'");
}

}  // namespace icl
