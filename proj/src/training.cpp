#include "icl/training.hpp"

#include "icl/checkpoint.hpp"
#include "icl/optim.hpp"

#include <cmath>
#include <fstream>
#include <iostream>

namespace icl {

using ad::Var;

double default_lr(Index depth) { return depth < 3 ? 1e-3 : 5e-4; }

void TrainConfig::validate() const {
  model.validate();
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
  if (fixed_pool && *fixed_pool < 1) throw ConfigError("fixed_pool must be >= 1");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (eval_tasks < 1) throw ConfigError("eval_tasks must be >= 1");
  if (baseline_steps < 0) throw ConfigError("baseline_steps must be >= 0");
  const Index raw = layout.layout == Layout::concat ? task.nx + task.ny : task.nx + task.ny + layout.pos_enc_dim;
  if (raw != model.input_dim)
    throw ConfigError("model input_dim " + std::to_string(model.input_dim) + " does not match token width " +
                      std::to_string(raw));
  if (task.nx != model.nx || task.ny != model.ny) throw ConfigError("task and model disagree on nx/ny");
}

void TrainTrace::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  out << "step,train_loss,eval_loss,baseline_gd,baseline_gdpp,grad_norm,probe_neighbor,probe_other\n";
  for (const TraceRow& r : rows) {
    out << r.step << ',' << format_double(r.train_loss) << ',' << format_double(r.eval_loss) << ','
        << opt(r.baseline_gd) << ',' << opt(r.baseline_gdpp) << ',' << format_double(r.grad_norm) << ','
        << opt(r.probe_neighbor) << ',' << opt(r.probe_other) << '\n';
  }
}

double eval_loss(const ModelParams& params, const ModelConfig& model, const TokenBatch& batch) {
  constexpr Index chunk = 2048;
  double total = 0.0;
  for (Index start = 0; start < batch.batch; start += chunk) {
    const Index count = std::min(chunk, batch.batch - start);
    TokenBatch part = batch;
    part.batch = count;
    part.tokens = batch.tokens.middleCols(start * batch.length, count * batch.length);
    part.targets = batch.targets.middleCols(start, count);
    total += (predict_batch(model, params, part) - part.targets).squaredNorm();
  }
  return total / static_cast<double>(batch.batch);
}

double eval_loss(const ModelParams& params, const ModelConfig& model, const std::vector<Task>& tasks,
                 const LayoutSpec& layout) {
  return eval_loss(params, model, build_batch(tasks, layout));
}

std::vector<Task> eval_tasks(const TrainConfig& cfg) {
  return sample_tasks(SeedStream(cfg.eval_seed), cfg.task, cfg.eval_tasks);
}

CopyProbe copy_probe(const ModelConfig& model, const ModelParams& params, const TokenBatch& batch) {
  if ((batch.length - 1) % 2 != 0) throw ShapeError("copy probe needs alternating tokens");
  ad::Tape tape;
  VarParams vp = bind_constants(tape, params);
  Var tokens = tape.variable(batch.tokens);
  ForwardOptions opts;
  opts.steps = 1;
  const BatchShape shape = shape_of(batch);
  Var out = forward_tokens(model, vp, tokens, shape, opts);
  const Index n = (batch.length - 1) / 2, d = out.rows(), len = batch.length;
  double neighbor = 0.0, other = 0.0;
  Index neighbor_count = 0, other_count = 0;
  Matrix seed = Matrix::Zero(out.rows(), out.cols());
  for (Index j = 0; j < 2 * n; j += 2) {
    // sq(b, i): squared Frobenius norm of d out_j / d in_i for sequence b.
    Matrix sq = Matrix::Zero(batch.batch, len);
    for (Index r = 0; r < d; ++r) {
      for (Index b = 0; b < batch.batch; ++b) seed(r, b * len + j) = 1.0;
      tape.backward(out, seed);
      const Matrix g = tape.grad(tokens);
      for (Index b = 0; b < batch.batch; ++b)
        for (Index i = 0; i < len; ++i) sq(b, i) += g.col(b * len + i).squaredNorm();
      for (Index b = 0; b < batch.batch; ++b) seed(r, b * len + j) = 0.0;
    }
    for (Index b = 0; b < batch.batch; ++b) {
      for (Index i = 0; i < len; ++i) {
        if (i == j) continue;
        if (i == j + 1) {
          neighbor += std::sqrt(sq(b, i));
          ++neighbor_count;
        } else {
          other += std::sqrt(sq(b, i));
          ++other_count;
        }
      }
    }
  }
  return {neighbor / static_cast<double>(std::max<Index>(neighbor_count, 1)),
          other / static_cast<double>(std::max<Index>(other_count, 1))};
}

namespace {

bool is_frozen(const std::vector<std::string>& prefixes, const std::string& name) {
  for (const std::string& p : prefixes)
    if (name.rfind(p, 0) == 0) return true;
  return false;
}

struct Baselines {
  std::optional<double> gd;
  std::optional<double> gdpp;
  std::optional<GdHyper> gd_hyper;
  std::optional<GdHyper> gdpp_hyper;
};

Baselines tune_baselines(const TrainConfig& cfg, const std::vector<Task>& eval) {
  Baselines b;
  if (cfg.baseline_steps < 1) return b;
  TaskSpec spec = cfg.task;
  spec.ood = OodSpec{};
  const std::vector<Task> train = sample_tasks(SeedStream(Seed{cfg.eval_seed.value + 1}), spec, cfg.baseline_tasks);
  TuneOptions opts;
  opts.steps = cfg.baseline_steps;
  opts.recurrent = true;
  opts.clip = default_clip(cfg.baseline_steps);
  const TuneResult gd = tune_gd_hyperparams(train, opts);
  b.gd_hyper = gd.hyper;
  b.gd = gd_loss(gd.hyper, eval);
  if (cfg.baseline_gdpp) {
    opts.mode = TuneMode::meta_train;
    opts.tune_gamma = true;
    opts.recurrent = cfg.model.recurrent || cfg.baseline_steps == 1;
    const TuneResult pp = tune_gd_hyperparams(train, opts);
    b.gdpp_hyper = pp.hyper;
    b.gdpp = gd_loss(pp.hyper, eval);
  }
  return b;
}

}  // namespace

TrainResult meta_train(const TrainConfig& cfg) {
  cfg.validate();
  TrainResult result;
  ModelParams& params = result.params;
  params = cfg.init ? *cfg.init : init_params(cfg.model, cfg.seed);
  check_params(cfg.model, params);

  std::vector<char> trainable;
  ParamList weights;
  for_each_param(params, [&](const std::string& name, const Matrix& m) {
    const bool t = !is_frozen(cfg.frozen, name);
    trainable.push_back(t);
    if (t) weights.push_back(m);
  });
  auto write_back = [&] {
    std::size_t i = 0, w = 0;
    for_each_param(params, [&](const std::string&, Matrix& m) {
      if (trainable[i++]) m = weights[w++];
    });
  };

  const std::vector<Task> eval = eval_tasks(cfg);
  const TokenBatch eval_batch = build_batch(eval, cfg.layout);
  std::optional<TokenBatch> probe_batch;
  if (cfg.probe_copy) {
    std::vector<Task> probe(eval.begin(), eval.begin() + std::min<std::ptrdiff_t>(cfg.probe_tasks, eval.size()));
    probe_batch = build_batch(probe, cfg.layout);
  }
  const Baselines base = tune_baselines(cfg, eval);
  result.trace.gd_hyper = base.gd_hyper;
  result.trace.gdpp_hyper = base.gdpp_hyper;

  std::vector<Task> pool;
  if (cfg.fixed_pool) pool = sample_tasks(SeedStream(cfg.seed).split(0x706f6f6cULL), cfg.task, *cfg.fixed_pool);

  AdamState adam = make_adam(weights, cfg.lr);
  const SeedStream stream(cfg.seed);
  double last_loss = 0.0, last_norm = 0.0;

  auto record = [&](Index step) {
    TraceRow row;
    row.step = step;
    row.train_loss = last_loss;
    row.grad_norm = last_norm;
    try {
      row.eval_loss = eval_loss(params, cfg.model, eval_batch);
    } catch (const NumericError& e) {
      throw DivergenceError(e.what(), result.trace, step);
    }
    row.baseline_gd = base.gd;
    row.baseline_gdpp = base.gdpp;
    if (probe_batch) {
      const CopyProbe p = copy_probe(cfg.model, params, *probe_batch);
      row.probe_neighbor = p.neighbor;
      row.probe_other = p.other;
    }
    result.trace.rows.push_back(row);
    if (cfg.verbose)
      std::cerr << "step " << step << " train " << row.train_loss << " eval " << row.eval_loss << '\n';
    if (cfg.checkpoint_dir) save_checkpoint(*cfg.checkpoint_dir, Model{cfg.model, params});
  };

  for (Index step = 0; step < cfg.steps; ++step) {
    std::vector<Task> tasks;
    if (cfg.fixed_pool) {
      tasks.reserve(static_cast<std::size_t>(cfg.batch_size));
      const std::size_t p = pool.size();
      const std::size_t offset = static_cast<std::size_t>(step * cfg.batch_size) % p;
      for (Index k = 0; k < std::min<Index>(cfg.batch_size, static_cast<Index>(p)); ++k)
        tasks.push_back(pool[(offset + static_cast<std::size_t>(k)) % p]);
    } else {
      tasks = sample_tasks(stream.split(static_cast<std::uint64_t>(step)), cfg.task, cfg.batch_size);
    }
    const TokenBatch batch = build_batch(tasks, cfg.layout);
    const BatchShape shape = shape_of(batch);
    ad::LossFn loss_fn = [&](ad::Tape& tape, std::span<const Var> vars) {
      std::size_t i = 0, w = 0;
      VarParams vp = map_params<Var>(params, [&](const std::string&, const Matrix& m) {
        return trainable[i++] ? vars[w++] : tape.constant(m);
      });
      Var out = forward_tokens(cfg.model, vp, tape.constant(batch.tokens), shape);
      return batch_loss(readout(cfg.model, out, shape), batch.targets);
    };
    ad::ValueAndGrad vg;
    try {
      vg = ad::value_and_grad(loss_fn, weights);
    } catch (const NumericError& e) {
      throw DivergenceError(std::string("step ") + std::to_string(step) + ": " + e.what(), result.trace, step);
    }
    last_loss = vg.loss;
    vg.grads = clip_global_norm(std::move(vg.grads), cfg.grad_clip);
    last_norm = global_norm(vg.grads);
    if (step % cfg.eval_every == 0) record(step);
    adam_step(adam, weights, vg.grads);
    write_back();
  }
  record(cfg.steps);
  return result;
}

TrainResult train_copy_experiment(TrainConfig cfg) {
  if (cfg.layout.layout != Layout::alternating || cfg.layout.pos_enc_dim < 1)
    throw ConfigError("copy experiment needs alternating tokens with positional encodings");
  if (cfg.model.depth != 2 || cfg.model.recurrent) throw ConfigError("copy experiment needs two untied layers");
  if (cfg.model.attn_for(0) != AttnKind::softmax) throw ConfigError("copy experiment needs a softmax first layer");
  cfg.probe_copy = true;
  return meta_train(cfg);
}

}  // namespace icl
