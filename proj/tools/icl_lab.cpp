// icl_lab: train, construct and analyze in-context regression models.
//
// Exit codes: 0 success, 2 configuration or shape error, 3 numeric divergence.

#include "icl/analysis.hpp"
#include "icl/checkpoint.hpp"
#include "icl/constructions.hpp"
#include "icl/experiment.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace icl;

namespace {

constexpr int kConfigExit = 2;
constexpr int kDivergenceExit = 3;

fs::path run_directory(const std::string& out, const std::string& label) {
  if (!out.empty()) {
    fs::create_directories(out);
    return out;
  }
  const char* root = std::getenv("ICL_OUTPUT_ROOT");
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream name;
  name << std::put_time(&tm, "%Y%m%d-%H%M%S") << '-' << label;
  fs::path dir = fs::path(root ? root : "runs") / name.str();
  for (int k = 1; fs::exists(dir); ++k) dir = fs::path(root ? root : "runs") / (name.str() + "-" + std::to_string(k));
  fs::create_directories(dir);
  return dir;
}

void write_json(const fs::path& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// key=value pairs; values are parsed as JSON and fall back to strings.
Json parse_overrides(const std::vector<std::string>& sets) {
  Json j = Json::object();
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("expected key=value, got '" + s + "'");
    const std::string key = s.substr(0, eq), value = s.substr(eq + 1);
    try {
      j[key] = Json::parse(value);
    } catch (const nlohmann::json::exception&) {
      j[key] = value;
    }
  }
  return j;
}

// --- train ---------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string preset;
  std::vector<std::string> sets;
  std::string out;
  bool list = false;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  const Json cookbook = load_cookbook();
  if (a.list) {
    for (const std::string& n : preset_names(cookbook)) {
      const ExperimentConfig c = preset_config(n, cookbook);
      std::cout << std::left << std::setw(22) << n << ' ' << c.description << '\n';
    }
    return 0;
  }
  Json raw = Json::object();
  if (!a.config.empty()) raw = read_json_file(a.config);
  if (!a.preset.empty()) raw["preset"] = a.preset;
  const Json overrides = parse_overrides(a.sets);
  for (auto& [k, v] : overrides.items()) raw[k] = v;
  if (raw.empty()) throw ConfigError("train needs --config, --preset or --set");
  ExperimentConfig cfg = experiment_from_json(raw, cookbook);
  cfg.train.verbose = !a.quiet;
  const fs::path dir = run_directory(a.out, cfg.preset.empty() ? "train" : cfg.preset);
  write_json(dir / "resolved-config.json", to_json(cfg));
  std::cerr << "run directory: " << dir.string() << '\n';

  Json meta;
  meta["experiment"] = to_json(cfg);
  meta["task"] = to_json(cfg.train.task);
  meta["layout"] = to_json(cfg.train.layout);
  meta["eval_seed"] = cfg.train.eval_seed.value;
  meta["eval_tasks"] = cfg.train.eval_tasks;
  try {
    TrainConfig& t = cfg.train;
    t.checkpoint_dir = dir / "checkpoint";
    ExperimentConfig run = cfg;
    TrainResult r = run_experiment(run);
    r.trace.write_csv(dir / "trace.csv");
    if (r.trace.gd_hyper) meta["gd_hyper"] = to_json(*r.trace.gd_hyper);
    if (r.trace.gdpp_hyper) meta["gdpp_hyper"] = to_json(*r.trace.gdpp_hyper);
    save_checkpoint(dir / "checkpoint", Model{cfg.train.model, r.params}, meta);
    const TraceRow& last = r.trace.rows.back();
    Json summary{{"final_eval_loss", last.eval_loss}, {"steps", last.step}};
    if (last.baseline_gd) summary["baseline_gd"] = *last.baseline_gd;
    if (last.baseline_gdpp) summary["baseline_gdpp"] = *last.baseline_gdpp;
    write_json(dir / "summary.json", summary);
    std::cout << summary.dump() << '\n';
  } catch (const DivergenceError& e) {
    e.trace().write_csv(dir / "trace.csv");
    std::cerr << "diverged: " << e.what() << '\n';
    return kDivergenceExit;
  }
  return 0;
}

// --- construct -------------------------------------------------------------------

struct ConstructArgs {
  std::string kind;
  double eta = 1.0;
  double gamma = 0.0;
  Index n = 10;
  Index nx = 10;
  Index ny = 1;
  Index pos_dim = 0;
  Index hidden = 40;
  double softmax_scale = 1.0;
  bool softmax = false;
  bool zeroing = false;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_construct(const ConstructArgs& a) {
  const ConstructionKind kind = construction_kind_from_string(a.kind);
  ConstructionSpec spec;
  spec.eta = a.eta;
  spec.gamma = a.gamma;
  spec.n = a.n;
  spec.nx = a.nx;
  spec.ny = a.ny;
  spec.kind = kind;
  Model model;
  LayoutSpec layout;
  switch (kind) {
    case ConstructionKind::gd:
    case ConstructionKind::gdpp:
      if (kind == ConstructionKind::gd && a.gamma != 0.0) throw ConfigError("construct gd takes no --gamma");
      model = stacked_gd_model({a.eta}, {a.gamma}, a.n, a.nx, a.ny);
      break;
    case ConstructionKind::copy: {
      const Index pos = a.pos_dim > 0 ? a.pos_dim : 2 * a.n + 1;
      model = copy_then_gd_model(a.n, a.nx, a.ny, pos, a.eta, a.softmax ? AttnKind::softmax : AttnKind::linear,
                                 a.softmax_scale, a.zeroing);
      layout = {Layout::alternating, pos, PosEncoding::unit};
      break;
    }
    case ConstructionKind::kernel_block: {
      // Random feature map on the input slots, zero couplings to the targets.
      SeedStream s(Seed{a.seed});
      const Index d = a.nx + a.ny;
      MlpWeights mlp{Matrix::Zero(a.hidden, d), Matrix::Zero(a.hidden, 1), Matrix::Zero(d, a.hidden),
                     Matrix::Zero(d, 1)};
      mlp.w1.leftCols(a.nx) = sample(s, Distribution::standard_normal(), a.hidden, a.nx) / std::sqrt(double(a.nx));
      mlp.w2.topRows(a.nx) = sample(s, Distribution::standard_normal(), a.nx, a.hidden) / std::sqrt(double(a.hidden));
      model = assemble_kernel_block(mlp, spec);
      break;
    }
  }
  TaskSpec task;
  task.n = a.n;
  task.nx = a.nx;
  task.ny = a.ny;
  Json meta{{"construction", to_string(kind)}, {"task", to_json(task)}, {"layout", to_json(layout)}};
  if (kind != ConstructionKind::copy) {
    GdHyper h = plain_gd(a.eta, 1);
    if (kind == ConstructionKind::gdpp) h.gammas = {a.gamma};
    meta["gd_hyper"] = to_json(h);
  }
  const fs::path dir = run_directory(a.out, "construct-" + a.kind);
  save_checkpoint(dir, model, meta);
  std::cout << dir.string() << '\n';
  return 0;
}

// --- analyze ---------------------------------------------------------------------

struct AnalyzeArgs {
  std::string kind;
  std::string checkpoint;
  std::string baseline = "gd";
  std::vector<double> alphas{0.5, 1.0, 2.0};
  std::string mode = "input_range";
  double lambda = 0.75;
  Index rollout_steps = 50;
  double gamma = 0.099;
  bool tune_gamma = false;
  Index n = 25;
  Index nx = 10;
  Index tasks = 10000;
  std::uint64_t seed = 20221;
  std::string out;
};

struct Loaded {
  Checkpoint ck;
  TaskSpec task;
  LayoutSpec layout;
};

Loaded load(const AnalyzeArgs& a) {
  if (a.checkpoint.empty()) throw ConfigError("--checkpoint is required for analyze " + a.kind);
  Loaded l{load_checkpoint(a.checkpoint), {}, {}};
  if (l.ck.meta.contains("task")) l.task = task_spec_from_json(l.ck.meta["task"]);
  else {
    l.task.nx = l.ck.model.config.nx;
    l.task.ny = l.ck.model.config.ny;
  }
  if (l.ck.meta.contains("layout")) l.layout = layout_spec_from_json(l.ck.meta["layout"]);
  if (l.task.nx != l.ck.model.config.nx || l.task.ny != l.ck.model.config.ny)
    throw ShapeError("checkpoint task and model disagree on nx/ny");
  return l;
}

std::vector<Task> analysis_tasks(const TaskSpec& spec, const AnalyzeArgs& a) {
  return sample_tasks(SeedStream(Seed{a.seed}), spec, a.tasks);
}

/// Baseline from the checkpoint metadata, or tuned on a separate sample.
GdHyper baseline_for(const Loaded& l, const AnalyzeArgs& a) {
  const bool pp = a.baseline == "gdpp";
  if (!pp && a.baseline != "gd") throw ConfigError("--baseline must be gd or gdpp");
  const char* key = pp ? "gdpp_hyper" : "gd_hyper";
  if (l.ck.meta.contains(key)) return gd_hyper_from_json(l.ck.meta[key]);
  TaskSpec spec = l.task;
  spec.ood = OodSpec{};
  const std::vector<Task> train = sample_tasks(SeedStream(Seed{a.seed + 1}), spec, 10000);
  TuneOptions o;
  o.steps = l.ck.model.config.depth;
  o.recurrent = l.ck.model.config.recurrent || o.steps == 1;
  o.clip = default_clip(o.steps);
  if (pp) {
    o.mode = TuneMode::meta_train;
    o.tune_gamma = true;
  }
  return tune_gd_hyperparams(train, o).hyper;
}

int cmd_analyze(const AnalyzeArgs& a) {
  const fs::path dir = run_directory(a.out, "analyze-" + a.kind);
  Json report;
  if (a.kind == "spectrum") {
    TaskSpec spec;
    spec.n = a.n;
    spec.nx = a.nx;
    const std::vector<Task> tasks = analysis_tasks(spec, a);
    double gamma = a.gamma;
    if (a.tune_gamma) {
      TuneOptions o;
      o.mode = TuneMode::meta_train;
      o.steps = 2;
      o.tune_gamma = true;
      const TuneResult t = tune_gd_hyperparams(tasks, o);
      gamma = t.hyper.gammas.front();
      report["tuned"] = to_json(t.hyper);
      report["tuned_loss"] = t.loss;
    }
    report["ensemble"] = to_json(gdpp_spectrum_ensemble(tasks, gamma));
    report["first_task"] = to_json(gdpp_spectrum(gamma, hessian_eigenvalues(tasks.front().inputs)));
  } else if (a.kind == "weights") {
    const Loaded l = load(a);
    write_weight_products(dir / "products", l.ck.model.params);
    Json layers = Json::array();
    for (const LayerWeights& layer : l.ck.model.params.layers) {
      const SoftmaxCorrection c = softmax_correction(layer, l.ck.model.config.nx);
      layers.push_back({{"etas", head_etas(layer)},
                        {"diag_rms", c.diag_rms},
                        {"offdiag_rms", c.offdiag_rms},
                        {"input_diag_rms", c.input_diag_rms},
                        {"input_offdiag_rms", c.input_offdiag_rms}});
    }
    report["layers"] = layers;
  } else {
    const Loaded l = load(a);
    const TransformerPredictor tf(l.ck.model, l.layout, "transformer");
    const std::vector<Task> tasks = analysis_tasks(l.task, a);
    if (a.kind == "eval") {
      report["loss"] = mean_squared_error(tf.predict(tasks), tasks);
    } else if (a.kind == "align") {
      const GdPredictor gd(baseline_for(l, a), a.baseline);
      const AlignmentReport r = alignment_metrics(tf, gd, tasks);
      report = {{"baseline", a.baseline},   {"tasks", r.tasks},       {"pred_l2", r.pred_l2},
                {"pred_cos", r.pred_cos},   {"model_cos", r.model_cos}, {"model_l2", r.model_l2},
                {"loss_model", r.loss_a},   {"loss_baseline", r.loss_b}, {"excluded", r.excluded}};
    } else if (a.kind == "interpolate") {
      const GdHyper h = baseline_for(l, a);
      const Index depth = l.ck.model.config.depth;
      Model ref = stacked_gd_model(std::vector<double>(static_cast<std::size_t>(depth), h.etas.front()), {},
                                   l.task.n, l.task.nx, l.task.ny);
      if (l.ck.model.config.recurrent) {
        ref.params.layers.resize(1);
        ref.config.recurrent = true;
      }
      ref.config.full_self_attn = l.ck.model.config.full_self_attn;
      for (LayerWeights& layer : ref.params.layers) layer.full_self_attn = l.ck.model.config.full_self_attn;
      ref.config.clip_tokens = l.ck.model.config.clip_tokens;
      const InterpolationResult r = rescale_and_interpolate(l.ck.model, ref, tasks, l.layout);
      report = {{"beta", r.beta},         {"loss_model", r.loss_tf},      {"loss_construction", r.loss_ref},
                {"loss_interpolated", r.loss_interp}, {"best_effort", r.best_effort}};
      save_checkpoint(dir / "interpolated", r.interpolated, l.ck.meta);
    } else if (a.kind == "ood") {
      const GdPredictor gd(baseline_for(l, a), a.baseline);
      const OodTable t = ood_sweep({&tf, &gd}, a.alphas, ood_mode_from_string(a.mode), l.task, a.tasks, Seed{a.seed});
      t.write_csv(dir / "ood.csv");
      for (const OodRow& r : t.rows) report["rows"].push_back({{"alpha", r.alpha}, {"losses", r.losses}});
      report["models"] = t.models;
    } else if (a.kind == "rollout") {
      const GdPredictor gd(baseline_for(l, a), a.baseline);
      const RolloutResult rt = rollout(tf, a.lambda, a.rollout_steps, tasks);
      const RolloutResult rg = rollout(gd, a.lambda, a.rollout_steps, tasks);
      std::ofstream csv(dir / "rollout.csv");
      csv << "step,transformer,gd\n";
      const std::size_t rows = std::max(rt.losses.size(), rg.losses.size());
      for (std::size_t k = 0; k < rows; ++k)
        csv << k << ',' << (k < rt.losses.size() ? format_double(rt.losses[k]) : "") << ','
            << (k < rg.losses.size() ? format_double(rg.losses[k]) : "") << '\n';
      report = {{"lambda", a.lambda},
                {"transformer", {{"losses", rt.losses}, {"diverged", rt.diverged}}},
                {"gd", {{"losses", rg.losses}, {"diverged", rg.diverged}}}};
    } else if (a.kind == "copy-probe") {
      if (l.layout.layout != Layout::alternating) throw ShapeError("copy-probe needs an alternating-token checkpoint");
      std::vector<Task> probe(tasks.begin(), tasks.begin() + std::min<std::ptrdiff_t>(32, tasks.size()));
      const CopyProbe p = copy_probe(l.ck.model.config, l.ck.model.params, build_batch(probe, l.layout));
      report = {{"neighbor", p.neighbor}, {"other", p.other}};
    } else {
      throw ConfigError("unknown analysis '" + a.kind + "'");
    }
  }
  write_json(dir / (a.kind + ".json"), report);
  std::cout << report.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Linear self-attention and gradient descent laboratory"};
  app.require_subcommand(1);

  TrainArgs ta;
  CLI::App* train = app.add_subcommand("train", "Meta-train a model from a config file or preset");
  train->add_option("--config", ta.config, "JSON config file");
  train->add_option("--preset", ta.preset, "Preset name from the cookbook");
  train->add_option("--set", ta.sets, "Override a config key (key=value), repeatable");
  train->add_option("--out", ta.out, "Output directory (default: timestamped run directory)");
  train->add_flag("--list", ta.list, "List presets and exit");
  train->add_flag("--quiet", ta.quiet, "No progress lines");

  ConstructArgs ca;
  CLI::App* construct = app.add_subcommand("construct", "Write a checkpoint of an explicit weight construction");
  construct->add_option("kind", ca.kind, "gd, gdpp, copy or kernel")->required();
  construct->add_option("--eta", ca.eta, "Learning rate");
  construct->add_option("--gamma", ca.gamma, "Input transformation strength (gdpp)");
  construct->add_option("--n", ca.n, "Context size N");
  construct->add_option("--nx", ca.nx, "Input dimension");
  construct->add_option("--ny", ca.ny, "Output dimension");
  construct->add_option("--pos-dim", ca.pos_dim, "Positional encoding width (copy; default 2N+1)");
  construct->add_option("--hidden", ca.hidden, "Hidden width of the kernel feature map");
  construct->add_flag("--softmax", ca.softmax, "Softmax copy layer");
  construct->add_option("--softmax-scale", ca.softmax_scale, "Score scale of the softmax copy layer");
  construct->add_flag("--zeroing", ca.zeroing, "Add the head that zeroes target tokens");
  construct->add_option("--seed", ca.seed, "Seed of the kernel feature map");
  construct->add_option("--out", ca.out, "Output directory");

  AnalyzeArgs aa;
  CLI::App* analyze = app.add_subcommand("analyze", "Compare a checkpoint against GD baselines");
  analyze->add_option("kind", aa.kind, "align, interpolate, ood, rollout, spectrum, weights, copy-probe or eval")
      ->required();
  analyze->add_option("--checkpoint", aa.checkpoint, "Checkpoint directory");
  analyze->add_option("--baseline", aa.baseline, "gd or gdpp");
  analyze->add_option("--alphas", aa.alphas, "OOD scales")->delimiter(',');
  analyze->add_option("--mode", aa.mode, "input_range, teacher_scale or alt_dist_scale");
  analyze->add_option("--lambda", aa.lambda, "Rollout dampening");
  analyze->add_option("--rollout-steps", aa.rollout_steps, "Rollout length");
  analyze->add_option("--gamma", aa.gamma, "GD++ gamma (spectrum)");
  analyze->add_flag("--tune-gamma", aa.tune_gamma, "Tune gamma for 2 recurrent GD++ steps first (spectrum)");
  analyze->add_option("--n", aa.n, "Context size (spectrum)");
  analyze->add_option("--nx", aa.nx, "Input dimension (spectrum)");
  analyze->add_option("--tasks", aa.tasks, "Number of evaluation tasks");
  analyze->add_option("--seed", aa.seed, "Task seed");
  analyze->add_option("--out", aa.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigExit;
  }
  try {
    if (*train) return cmd_train(ta);
    if (*construct) return cmd_construct(ca);
    if (*analyze) return cmd_analyze(aa);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kDivergenceExit;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigExit;
  }
  return 0;
}
