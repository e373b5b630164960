#include "icl/checkpoint.hpp"

#include "icl/errors.hpp"

#include <fstream>
#include <map>

namespace icl {

namespace fs = std::filesystem;

void save_checkpoint(const fs::path& dir, const Model& model, const Json& meta) {
  check_params(model.config, model.params);
  fs::create_directories(dir);
  Json manifest;
  manifest["config"] = to_json(model.config);
  manifest["embedding"] = model.params.embedding.has_value();
  manifest["input_mlp"] = model.params.input_mlp.has_value();
  Json layers = Json::array();
  for (const LayerWeights& l : model.params.layers) {
    layers.push_back({{"attn", to_string(l.attn)},
                      {"full_self_attn", l.full_self_attn},
                      {"heads", l.heads.size()},
                      {"norm", l.norm.has_value()},
                      {"mlp", l.mlp.has_value()},
                      {"mlp_norm", l.mlp_norm.has_value()}});
  }
  manifest["layers"] = layers;
  Json tensors = Json::array();
  for_each_param(model.params, [&](const std::string& name, const Matrix& m) {
    const std::string file = name + ".csv";
    dump_matrix(dir / file, m, name);
    tensors.push_back({{"name", name}, {"file", file}});
  });
  manifest["tensors"] = tensors;
  manifest["meta"] = meta;
  std::ofstream out(dir / "manifest.json");
  if (!out) throw ConfigError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ConfigError("no checkpoint manifest in " + dir.string());
  Json manifest;
  try {
    manifest = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  Checkpoint ck;
  ck.model.config = model_config_from_json(manifest.at("config"));
  ModelParams& p = ck.model.params;
  const Matrix empty;
  if (manifest.value("embedding", false)) p.embedding = empty;
  if (manifest.value("input_mlp", false)) p.input_mlp = MlpWeights{empty, empty, empty, empty};
  for (const Json& l : manifest.at("layers")) {
    LayerWeights layer;
    layer.attn = attn_kind_from_string(l.at("attn").get<std::string>());
    layer.full_self_attn = l.at("full_self_attn").get<bool>();
    layer.heads.resize(l.at("heads").get<std::size_t>());
    if (l.value("norm", false)) layer.norm = NormWeights{empty, empty};
    if (l.value("mlp", false)) layer.mlp = MlpWeights{empty, empty, empty, empty};
    if (l.value("mlp_norm", false)) layer.mlp_norm = NormWeights{empty, empty};
    p.layers.push_back(std::move(layer));
  }
  std::map<std::string, std::string> files;
  for (const Json& t : manifest.at("tensors")) files[t.at("name").get<std::string>()] = t.at("file").get<std::string>();
  for_each_param(p, [&](const std::string& name, Matrix& m) {
    auto it = files.find(name);
    if (it == files.end()) throw ShapeError("checkpoint lacks tensor " + name);
    m = load_matrix(dir / it->second);
  });
  check_params(ck.model.config, p);
  if (manifest.contains("meta")) ck.meta = manifest["meta"];
  return ck;
}

}  // namespace icl
