#pragma once

#include "icl/model.hpp"
#include "icl/serialize.hpp"

#include <filesystem>

namespace icl {

struct Checkpoint {
  Model model;
  /// Free-form metadata stored next to the model (task spec, layout, ...).
  Json meta = Json::object();
};

/// Writes one CSV per tensor plus manifest.json holding the model config,
/// the layer/head structure, tensor names and `meta`.
void save_checkpoint(const std::filesystem::path& dir, const Model& model, const Json& meta = Json::object());
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace icl
