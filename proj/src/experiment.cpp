#include "icl/experiment.hpp"

#include "icl/constructions.hpp"
#include "icl/errors.hpp"

#include <cstdlib>
#include <fstream>

namespace icl {

namespace fs = std::filesystem;

std::filesystem::path default_cookbook_path() {
  if (const char* env = std::getenv("ICL_COOKBOOK")) return env;
  return ICL_COOKBOOK_PATH;
}

Json load_cookbook(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read cookbook " + path.string());
  try {
    Json j = Json::parse(in);
    if (!j.contains("presets") || !j["presets"].is_object()) throw ConfigError("cookbook lacks a presets object");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed cookbook: " + std::string(e.what()));
  }
}

std::vector<std::string> preset_names(const Json& cookbook) {
  std::vector<std::string> names;
  for (auto it = cookbook.at("presets").begin(); it != cookbook.at("presets").end(); ++it) names.push_back(it.key());
  return names;
}

namespace {

const std::set<std::string> kKeys = {
    "preset", "description", "experiment", "control_eta", "time_budget_minutes",
    // model
    "depth", "recurrent", "heads", "attn", "first_layer_attn", "full_self_attn", "mlp", "widening", "layernorm",
    "embed", "input_mlp", "token_dim", "clip_tokens", "init_std_scale", "norm_eps",
    // tasks and tokens
    "n", "nx", "ny", "task_kind", "ood_alpha", "ood_mode", "alt_dist", "layout", "pos_enc_dim", "pos_encoding",
    // optimization
    "batch_size", "steps", "lr", "grad_clip", "fixed_pool", "seed", "eval_every", "eval_tasks", "eval_seed",
    "baseline_steps", "baseline_gdpp", "baseline_tasks", "probe_copy", "probe_tasks", "frozen"};

template <class T>
T get(const Json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

/// Merges preset layers: later objects override earlier ones.
Json resolve_layers(const Json& j, const Json& cookbook, int depth = 0) {
  if (depth > 8) throw ConfigError("preset chain too deep");
  reject_unknown_keys(j, kKeys, "experiment config");
  Json merged = Json::object();
  if (j.contains("preset")) {
    const std::string name = get<std::string>(j, "preset");
    const Json& presets = cookbook.at("presets");
    if (!presets.contains(name)) throw ConfigError("unknown preset '" + name + "'");
    merged = resolve_layers(presets[name], cookbook, depth + 1);
    merged["preset"] = name;
  }
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "preset") merged[it.key()] = it.value();
  return merged;
}

}  // namespace

ExperimentConfig experiment_from_json(const Json& raw, const Json& cookbook) {
  const Json j = resolve_layers(raw, cookbook);
  ExperimentConfig c;
  if (j.contains("preset")) c.preset = get<std::string>(j, "preset");
  if (j.contains("description")) c.description = get<std::string>(j, "description");
  if (j.contains("experiment")) c.kind = experiment_kind_from_string(get<std::string>(j, "experiment"));
  if (j.contains("control_eta")) c.control_eta = get<double>(j, "control_eta");
  if (j.contains("time_budget_minutes")) c.time_budget_minutes = get<double>(j, "time_budget_minutes");

  TrainConfig& t = c.train;
  Json task = Json::object();
  for (const char* k : {"n", "nx", "ny", "ood_alpha", "ood_mode", "alt_dist"})
    if (j.contains(k)) task[k] = j[k];
  if (j.contains("task_kind")) task["kind"] = j["task_kind"];
  t.task = task_spec_from_json(task);
  if (t.task.kind == TaskKind::sine && (t.task.nx != 1 || t.task.ny != 1)) {
    if (j.contains("nx") || j.contains("ny")) throw ConfigError("sine tasks have nx = ny = 1");
    t.task.nx = t.task.ny = 1;
  }

  Json layout = Json::object();
  for (const char* k : {"layout", "pos_enc_dim", "pos_encoding"})
    if (j.contains(k)) layout[k] = j[k];
  t.layout = layout_spec_from_json(layout);
  if (t.layout.layout == Layout::alternating && !layout.contains("pos_encoding"))
    t.layout.encoding = PosEncoding::sinusoidal;
  if (t.layout.layout == Layout::concat) t.layout.pos_enc_dim = 0;

  Json model = Json::object();
  for (const char* k : {"depth", "recurrent", "heads", "attn", "first_layer_attn", "full_self_attn", "mlp", "widening",
                        "layernorm", "embed", "input_mlp", "token_dim", "clip_tokens", "init_std_scale", "norm_eps"})
    if (j.contains(k)) model[k] = j[k];
  const Index input_dim = t.task.nx + t.task.ny + t.layout.pos_enc_dim;
  model["nx"] = t.task.nx;
  model["ny"] = t.task.ny;
  model["input_dim"] = input_dim;
  if (!model.contains("token_dim")) model["token_dim"] = input_dim;
  ModelConfig base;
  base.clip_tokens.reset();
  t.model = model_config_from_json(model, base);
  if (!j.contains("clip_tokens")) t.model.clip_tokens = default_clip(t.model.depth);

  if (j.contains("batch_size")) t.batch_size = get<Index>(j, "batch_size");
  if (j.contains("steps")) t.steps = get<Index>(j, "steps");
  else t.steps = t.model.depth <= 2 ? 50000 : 100000;
  t.lr = j.contains("lr") ? get<double>(j, "lr") : default_lr(t.model.depth);
  if (j.contains("grad_clip")) t.grad_clip = get<double>(j, "grad_clip");
  if (j.contains("fixed_pool") && !j["fixed_pool"].is_null()) t.fixed_pool = get<Index>(j, "fixed_pool");
  if (j.contains("seed")) t.seed = Seed{get<std::uint64_t>(j, "seed")};
  if (j.contains("eval_every")) t.eval_every = get<Index>(j, "eval_every");
  if (j.contains("eval_tasks")) t.eval_tasks = get<Index>(j, "eval_tasks");
  if (j.contains("eval_seed")) t.eval_seed = Seed{get<std::uint64_t>(j, "eval_seed")};
  if (j.contains("baseline_steps")) t.baseline_steps = get<Index>(j, "baseline_steps");
  if (j.contains("baseline_gdpp")) t.baseline_gdpp = get<bool>(j, "baseline_gdpp");
  if (j.contains("baseline_tasks")) t.baseline_tasks = get<Index>(j, "baseline_tasks");
  if (j.contains("probe_copy")) t.probe_copy = get<bool>(j, "probe_copy");
  if (j.contains("probe_tasks")) t.probe_tasks = get<Index>(j, "probe_tasks");
  if (j.contains("frozen")) t.frozen = get<std::vector<std::string>>(j, "frozen");
  if (c.kind == ExperimentKind::copy) t.probe_copy = true;
  t.validate();
  return c;
}

ExperimentConfig preset_config(const std::string& name, const Json& cookbook) {
  return experiment_from_json(Json{{"preset", name}}, cookbook);
}

Json to_json(const ExperimentConfig& c) {
  const TrainConfig& t = c.train;
  Json j = to_json(t.model);
  j.erase("nx");
  j.erase("ny");
  j.erase("input_dim");
  const Json task = to_json(t.task);
  for (auto it = task.begin(); it != task.end(); ++it) j[it.key() == "kind" ? "task_kind" : it.key()] = it.value();
  const Json layout = to_json(t.layout);
  for (auto it = layout.begin(); it != layout.end(); ++it) j[it.key()] = it.value();
  j["description"] = c.description;
  j["experiment"] = to_string(c.kind);
  j["control_eta"] = c.control_eta;
  j["time_budget_minutes"] = c.time_budget_minutes;
  j["batch_size"] = t.batch_size;
  j["steps"] = t.steps;
  j["lr"] = t.lr;
  j["grad_clip"] = t.grad_clip;
  j["fixed_pool"] = t.fixed_pool ? Json(*t.fixed_pool) : Json(nullptr);
  j["seed"] = t.seed.value;
  j["eval_every"] = t.eval_every;
  j["eval_tasks"] = t.eval_tasks;
  j["eval_seed"] = t.eval_seed.value;
  j["baseline_steps"] = t.baseline_steps;
  j["baseline_gdpp"] = t.baseline_gdpp;
  j["baseline_tasks"] = t.baseline_tasks;
  j["probe_copy"] = t.probe_copy;
  j["probe_tasks"] = t.probe_tasks;
  j["frozen"] = t.frozen;
  return j;
}

ModelParams sine_control_init(const TrainConfig& cfg, double eta) {
  const ModelConfig& m = cfg.model;
  if (m.embed != EmbedMode::inputs_only || m.depth != 1)
    throw ConfigError("sine control needs an inputs_only embedding and one layer");
  ModelParams p = init_params(m, cfg.seed);
  ConstructionSpec spec;
  spec.eta = eta;
  spec.n = cfg.task.n;
  spec.nx = m.token_dim - m.ny;
  spec.ny = m.ny;
  p.layers[0].heads = {make_gd_weights(spec)};
  return p;
}

TrainResult run_experiment(const ExperimentConfig& c) {
  switch (c.kind) {
    case ExperimentKind::standard:
      return meta_train(c.train);
    case ExperimentKind::copy:
      return train_copy_experiment(c.train);
    case ExperimentKind::sine_control: {
      TrainConfig t = c.train;
      if (t.model.heads != 1) throw ConfigError("sine control uses a single head");
      t.init = sine_control_init(t, c.control_eta);
      if (t.frozen.empty()) t.frozen = {"layer0."};
      return meta_train(t);
    }
  }
  throw ConfigError("unknown experiment kind");
}

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::standard: return "standard";
    case ExperimentKind::copy: return "copy";
    case ExperimentKind::sine_control: return "sine_control";
  }
  return "standard";
}

ExperimentKind experiment_kind_from_string(const std::string& s) {
  if (s == "standard") return ExperimentKind::standard;
  if (s == "copy") return ExperimentKind::copy;
  if (s == "sine_control") return ExperimentKind::sine_control;
  throw ConfigError("unknown experiment '" + s + "'");
}

}  // namespace icl
