#pragma once

#include "icl/serialize.hpp"
#include "icl/training.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace icl {

enum class ExperimentKind { standard, copy, sine_control };

/// A training run described by a flat JSON object. Keys not given fall back
/// to the preset named by "preset" (if any) and then to built-in defaults.
struct ExperimentConfig {
  std::string preset;
  std::string description;
  ExperimentKind kind = ExperimentKind::standard;
  /// Learning rate of the frozen gradient-descent layer in the sine control.
  double control_eta = 1.0;
  double time_budget_minutes = 0.0;
  TrainConfig train;
};

std::filesystem::path default_cookbook_path();
Json load_cookbook(const std::filesystem::path& path = default_cookbook_path());
std::vector<std::string> preset_names(const Json& cookbook);

ExperimentConfig experiment_from_json(const Json& j, const Json& cookbook);
ExperimentConfig preset_config(const std::string& name, const Json& cookbook);
/// Fully resolved flat JSON; experiment_from_json(to_json(c)) reproduces c.
Json to_json(const ExperimentConfig& cfg);

/// Trains according to `cfg` (dispatching on its kind).
TrainResult run_experiment(const ExperimentConfig& cfg);

/// Initial parameters of the sine control: a frozen gradient-descent layer
/// after a trainable input embedding and MLP.
ModelParams sine_control_init(const TrainConfig& cfg, double eta);

std::string to_string(ExperimentKind kind);
ExperimentKind experiment_kind_from_string(const std::string& s);

}  // namespace icl
