#pragma once

#include "icl/baselines.hpp"
#include "icl/model.hpp"
#include "icl/taskgen.hpp"

#include <json.hpp>

#include <set>
#include <string>

namespace icl {

using Json = nlohmann::json;

/// Throws ConfigError naming the first key of `obj` not in `allowed`.
void reject_unknown_keys(const Json& obj, const std::set<std::string>& allowed, const std::string& where);

Json to_json(const ModelConfig& cfg);
/// Starts from `base` and overrides the keys present in `j`.
ModelConfig model_config_from_json(const Json& j, ModelConfig base = {});

Json to_json(const TaskSpec& spec);
TaskSpec task_spec_from_json(const Json& j, TaskSpec base = {});

Json to_json(const LayoutSpec& spec);
LayoutSpec layout_spec_from_json(const Json& j, LayoutSpec base = {});

Json to_json(const GdHyper& hyper);
GdHyper gd_hyper_from_json(const Json& j);

Json to_json(const SpectrumReport& report);
Json to_json(const SpectrumEnsemble& ensemble);

Json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const Json& j);

}  // namespace icl
