#include "icl/analysis.hpp"

#include "icl/errors.hpp"
#include "icl/serialize.hpp"

#include <cmath>
#include <fstream>

namespace icl {

using ad::Var;

namespace {

constexpr Index kChunk = 1024;
constexpr Index kRolloutChunk = 256;

template <class F>
void for_chunks(const std::vector<Task>& tasks, Index chunk, F&& f) {
  for (std::size_t start = 0; start < tasks.size(); start += static_cast<std::size_t>(chunk)) {
    const std::size_t end = std::min(tasks.size(), start + static_cast<std::size_t>(chunk));
    std::vector<Task> part(tasks.begin() + static_cast<std::ptrdiff_t>(start),
                           tasks.begin() + static_cast<std::ptrdiff_t>(end));
    f(start, part);
  }
}

}  // namespace

// --- predictors ------------------------------------------------------------------

TransformerPredictor::TransformerPredictor(Model model, LayoutSpec layout, std::string name)
    : model_(std::move(model)), layout_(layout), name_(std::move(name)) {
  check_params(model_.config, model_.params);
}

Matrix TransformerPredictor::predict(const std::vector<Task>& tasks) const {
  if (tasks.empty()) return Matrix();
  Matrix out(model_.config.ny, static_cast<Index>(tasks.size()));
  for_chunks(tasks, kChunk, [&](std::size_t start, const std::vector<Task>& part) {
    const TokenBatch batch = build_batch(part, layout_);
    out.middleCols(static_cast<Index>(start), batch.batch) = predict_batch(model_.config, model_.params, batch);
  });
  return out;
}

std::vector<Matrix> TransformerPredictor::sensitivities(const std::vector<Task>& tasks) const {
  std::vector<Matrix> out;
  const ModelConfig& cfg = model_.config;
  for_chunks(tasks, kChunk, [&](std::size_t, const std::vector<Task>& part) {
    const TokenBatch batch = build_batch(part, layout_);
    const BatchShape shape = shape_of(batch);
    ad::Tape tape;
    VarParams vp = bind_constants(tape, model_.params);
    Var tokens = tape.variable(batch.tokens);
    Var pred = readout(cfg, forward_tokens(cfg, vp, tokens, shape), shape);
    std::vector<Matrix> jac(static_cast<std::size_t>(batch.batch), Matrix(cfg.ny, cfg.nx));
    for (Index r = 0; r < cfg.ny; ++r) {
      Matrix seed = Matrix::Zero(cfg.ny, batch.batch);
      seed.row(r).setOnes();
      tape.backward(pred, seed);
      const Matrix g = tape.grad(tokens);
      for (Index b = 0; b < batch.batch; ++b)
        jac[static_cast<std::size_t>(b)].row(r) = g.col(b * batch.length + batch.query_index).head(cfg.nx).transpose();
    }
    for (Matrix& j : jac) out.push_back(std::move(j));
  });
  return out;
}

std::vector<Matrix> TransformerPredictor::rollout_predictions(const std::vector<Task>& tasks, double lambda,
                                                              Index steps) const {
  if (!(lambda > 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in (0, 1]");
  const ModelConfig& cfg = model_.config;
  std::vector<Matrix> out;
  Index reached = steps;
  for_chunks(tasks, kRolloutChunk, [&](std::size_t start, const std::vector<Task>& part) {
    const TokenBatch batch = build_batch(part, layout_);
    const BatchShape shape = shape_of(batch);
    ad::Tape tape;
    VarParams vp = bind_constants(tape, model_.params);
    std::vector<Var> trace;
    ForwardOptions opts;
    opts.update_scale = lambda;
    opts.steps = steps;
    opts.mask_query_after_first = true;
    opts.trace = &trace;
    try {
      forward_tokens(cfg, vp, tape.constant(batch.tokens), shape, opts);
    } catch (const NumericError&) {
    }
    reached = std::min(reached, static_cast<Index>(trace.size()));
    if (out.size() < trace.size()) out.resize(trace.size(), Matrix::Zero(cfg.ny, static_cast<Index>(tasks.size())));
    for (std::size_t k = 0; k < trace.size(); ++k) {
      Matrix p;
      try {
        p = readout(cfg, trace[k], shape).value();
      } catch (const NumericError&) {
        reached = std::min(reached, static_cast<Index>(k));
        break;
      }
      out[k].middleCols(static_cast<Index>(start), batch.batch) = p;
    }
  });
  out.resize(static_cast<std::size_t>(reached));
  return out;
}

GdPredictor::GdPredictor(GdHyper hyper, std::string name) : hyper_(std::move(hyper)), name_(std::move(name)) {
  hyper_.validate();
}

Matrix GdPredictor::predict(const std::vector<Task>& tasks) const { return gd_predictions(hyper_, tasks); }

std::vector<Matrix> GdPredictor::sensitivities(const std::vector<Task>& tasks) const {
  std::vector<Matrix> out;
  out.reserve(tasks.size());
  for (const Task& t : tasks) out.push_back(multi_step_gd_detail(hyper_, t).effective_weights);
  return out;
}

std::vector<Matrix> GdPredictor::rollout_predictions(const std::vector<Task>& tasks, double lambda,
                                                     Index steps) const {
  GdHyper h = hyper_;
  h.lambda_damp = lambda;
  h.etas.assign(static_cast<std::size_t>(steps), hyper_.etas.front());
  if (!hyper_.gammas.empty()) h.gammas.assign(static_cast<std::size_t>(steps), hyper_.gammas.front());
  h.validate();
  if (tasks.empty()) return {};
  std::vector<Matrix> out(static_cast<std::size_t>(steps), Matrix(tasks.front().ny(), static_cast<Index>(tasks.size())));
  Index reached = steps;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const std::vector<Vector> trace = multi_step_gd_trace(h, tasks[i]);
    for (std::size_t k = 0; k < trace.size(); ++k) {
      if (!trace[k].allFinite()) {
        reached = std::min(reached, static_cast<Index>(k));
        break;
      }
      out[k].col(static_cast<Index>(i)) = trace[k];
    }
  }
  out.resize(static_cast<std::size_t>(reached));
  return out;
}

// --- metrics ---------------------------------------------------------------------

double mean_squared_error(const Matrix& predictions, const std::vector<Task>& tasks) {
  if (tasks.empty()) throw ConfigError("no tasks");
  if (predictions.cols() != static_cast<Index>(tasks.size())) throw ShapeError("prediction count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < tasks.size(); ++i)
    total += (predictions.col(static_cast<Index>(i)) - tasks[i].query_target).squaredNorm();
  return total / static_cast<double>(tasks.size());
}

Matrix sensitivity(const Predictor& model, const Task& task, const Vector& query) {
  Task t = task;
  if (query.size() != t.nx()) throw ShapeError("query width mismatch");
  t.query_input = query;
  if (t.teacher) t.query_target = *t.teacher * query;
  else if (t.query_target.size() != t.ny()) t.query_target = Vector::Zero(t.ny());
  return model.sensitivities({t}).front();
}

AlignmentReport alignment_metrics(const Predictor& a, const Predictor& b, const std::vector<Task>& tasks) {
  if (tasks.empty()) throw ConfigError("alignment needs at least one task");
  AlignmentReport r;
  r.tasks = static_cast<Index>(tasks.size());
  const Matrix pa = a.predict(tasks), pb = b.predict(tasks);
  r.loss_a = mean_squared_error(pa, tasks);
  r.loss_b = mean_squared_error(pb, tasks);
  for (Index i = 0; i < pa.cols(); ++i) r.pred_l2 += (pa.col(i) - pb.col(i)).norm();
  r.pred_l2 /= static_cast<double>(tasks.size());
  const double na = pa.norm(), nb = pb.norm();
  r.pred_cos = (na > 0.0 && nb > 0.0) ? pa.cwiseProduct(pb).sum() / (na * nb) : 0.0;

  const std::vector<Matrix> sa = a.sensitivities(tasks), sb = b.sensitivities(tasks);
  double cos_total = 0.0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    r.model_l2 += (sa[i] - sb[i]).norm();
    const double ma = sa[i].norm(), mb = sb[i].norm();
    if (ma == 0.0 || mb == 0.0 || !std::isfinite(ma) || !std::isfinite(mb)) {
      ++r.excluded;
      continue;
    }
    cos_total += std::clamp(sa[i].cwiseProduct(sb[i]).sum() / (ma * mb), -1.0, 1.0);
  }
  r.model_l2 /= static_cast<double>(tasks.size());
  const Index used = r.tasks - r.excluded;
  r.model_cos = used > 0 ? cos_total / static_cast<double>(used) : 0.0;
  return r;
}

// --- rescale and interpolate ------------------------------------------------------

Matrix kq_product(const HeadWeights& h) { return h.key.transpose() * h.query; }
Matrix pv_product(const HeadWeights& h) { return h.proj * h.value; }

HeadWeights head_from_products(const Matrix& kq, const Matrix& pv) {
  const Index d = kq.rows();
  return {Matrix::Identity(d, d), kq, pv, Matrix::Identity(d, d)};
}

InterpolationResult rescale_and_interpolate(const Model& tf, const Model& ref, const std::vector<Task>& tasks,
                                            const LayoutSpec& layout) {
  const auto& lt = tf.params.layers;
  const auto& lr = ref.params.layers;
  if (lt.size() != lr.size()) throw ShapeError("interpolation needs the same number of layers");
  if (tf.config.embed != EmbedMode::none || tf.config.input_mlp)
    throw ConfigError("interpolation supports attention-only models");
  InterpolationResult res;
  res.rescaled = tf;
  res.interpolated = tf;
  res.best_effort = !tf.config.recurrent && lt.size() > 1;
  const Index nx = tf.config.nx;
  for (std::size_t l = 0; l < lt.size(); ++l) {
    if (lt[l].heads.size() != 1 || lr[l].heads.size() != 1)
      throw ConfigError("interpolation needs single-head layers");
    if (lt[l].attn != AttnKind::linear || lr[l].attn != AttnKind::linear)
      throw ConfigError("interpolation needs linear attention");
    const Matrix kt = kq_product(lt[l].heads[0]), pt = pv_product(lt[l].heads[0]);
    const Matrix kr = kq_product(lr[l].heads[0]), pr = pv_product(lr[l].heads[0]);
    if (kt.rows() != kr.rows()) throw ShapeError("interpolation needs equal token widths");
    const double ref_mean = kr.diagonal().head(nx).mean();
    if (std::abs(ref_mean) < 1e-8) throw ConfigError("reference W_KQ has a vanishing input diagonal");
    const double beta = kt.diagonal().head(nx).mean() / ref_mean;
    if (std::abs(beta) < 1e-8) throw NumericError("degenerate trained weights: |beta| < 1e-8");
    res.beta.push_back(beta);
    const Matrix ks = kt / beta, ps = pt * beta;
    LayerWeights& rl = res.rescaled.params.layers[l];
    rl.heads = {head_from_products(ks, ps)};
    LayerWeights& il = res.interpolated.params.layers[l];
    il.heads = {head_from_products(0.5 * (kr + ks), 0.5 * (pr + ps))};
  }
  res.loss_tf = mean_squared_error(TransformerPredictor(tf, layout).predict(tasks), tasks);
  res.loss_ref = mean_squared_error(TransformerPredictor(ref, layout).predict(tasks), tasks);
  res.loss_interp = mean_squared_error(TransformerPredictor(res.interpolated, layout).predict(tasks), tasks);
  return res;
}

// --- OOD -------------------------------------------------------------------------------

void OodTable::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "alpha";
  for (const std::string& m : models) out << ',' << m;
  out << '\n';
  for (const OodRow& r : rows) {
    out << format_double(r.alpha);
    for (double l : r.losses) out << ',' << format_double(l);
    out << '\n';
  }
}

OodTable ood_sweep(const std::vector<const Predictor*>& models, const std::vector<double>& alphas, OodMode mode,
                   const TaskSpec& base, Index count, Seed seed) {
  OodTable table;
  table.mode = mode;
  for (const Predictor* m : models) table.models.push_back(m->name());
  for (double alpha : alphas) {
    TaskSpec spec = base;
    spec.ood.alpha = alpha;
    spec.ood.mode = mode;
    const std::vector<Task> tasks = sample_tasks(SeedStream(seed), spec, count);
    OodRow row;
    row.alpha = alpha;
    for (const Predictor* m : models) row.losses.push_back(mean_squared_error(m->predict(tasks), tasks));
    table.rows.push_back(std::move(row));
  }
  return table;
}

// --- rollout ------------------------------------------------------------------------------

RolloutResult rollout(const Predictor& model, double lambda, Index steps, const std::vector<Task>& tasks) {
  if (steps < 1) throw ConfigError("rollout needs at least one step");
  RolloutResult r;
  r.losses.push_back(mean_squared_error(Matrix::Zero(tasks.front().ny(), static_cast<Index>(tasks.size())), tasks));
  const std::vector<Matrix> preds = model.rollout_predictions(tasks, lambda, steps);
  for (const Matrix& p : preds) {
    const double l = mean_squared_error(p, tasks);
    if (!std::isfinite(l)) break;
    r.losses.push_back(l);
  }
  r.diverged = static_cast<Index>(r.losses.size()) < steps + 1;
  return r;
}

// --- weight products -------------------------------------------------------------------------

std::vector<NamedMatrix> export_weight_products(const ModelParams& params) {
  std::vector<NamedMatrix> out;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    for (std::size_t h = 0; h < params.layers[l].heads.size(); ++h) {
      const std::string p = "layer" + std::to_string(l) + ".head" + std::to_string(h) + ".";
      out.push_back({p + "W_KQ", kq_product(params.layers[l].heads[h])});
      out.push_back({p + "W_PV", pv_product(params.layers[l].heads[h])});
    }
  }
  return out;
}

std::vector<double> head_etas(const LayerWeights& layer) {
  std::vector<double> etas;
  for (const HeadWeights& h : layer.heads) {
    const Matrix pv = pv_product(h);
    etas.push_back(pv(pv.rows() - 1, pv.cols() - 1));
  }
  return etas;
}

namespace {

void diag_offdiag_rms(const Matrix& m, double& diag, double& off) {
  double d = 0.0, o = 0.0;
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) (i == j ? d : o) += m(i, j) * m(i, j);
  const double n = static_cast<double>(std::min(m.rows(), m.cols()));
  const double total = static_cast<double>(m.size());
  diag = std::sqrt(d / n);
  off = total > n ? std::sqrt(o / (total - n)) : 0.0;
}

}  // namespace

SoftmaxCorrection softmax_correction(const LayerWeights& layer, Index nx) {
  const std::vector<double> etas = head_etas(layer);
  SoftmaxCorrection c;
  for (std::size_t h = 0; h < layer.heads.size(); ++h) {
    const Matrix kq = etas[h] * kq_product(layer.heads[h]);
    c.weighted_kq = h == 0 ? kq : Matrix(c.weighted_kq + kq);
  }
  diag_offdiag_rms(c.weighted_kq, c.diag_rms, c.offdiag_rms);
  diag_offdiag_rms(c.weighted_kq.topLeftCorner(nx, nx), c.input_diag_rms, c.input_offdiag_rms);
  return c;
}

void write_weight_products(const std::filesystem::path& dir, const ModelParams& params) {
  std::filesystem::create_directories(dir);
  for (const NamedMatrix& m : export_weight_products(params)) dump_matrix(dir / (m.name + ".csv"), m.value, m.name);
  Json etas = Json::object();
  for (std::size_t l = 0; l < params.layers.size(); ++l) etas["layer" + std::to_string(l)] = head_etas(params.layers[l]);
  std::ofstream out(dir / "etas.json");
  out << etas.dump(2) << '\n';
}

}  // namespace icl
