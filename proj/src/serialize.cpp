#include "icl/serialize.hpp"

#include "icl/errors.hpp"

#include <cmath>

namespace icl {

void reject_unknown_keys(const Json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

namespace {

template <class T>
void read(const Json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

Json clip_json(const std::optional<std::pair<double, double>>& clip) {
  if (!clip) return nullptr;
  return Json::array({clip->first, clip->second});
}

std::optional<std::pair<double, double>> clip_from(const Json& v) {
  if (v.is_null()) return std::nullopt;
  if (!v.is_array() || v.size() != 2) throw ConfigError("clip range must be [lo, hi] or null");
  return std::make_pair(v[0].get<double>(), v[1].get<double>());
}

}  // namespace

Json to_json(const ModelConfig& c) {
  Json j;
  j["depth"] = c.depth;
  j["recurrent"] = c.recurrent;
  j["input_dim"] = c.input_dim;
  j["token_dim"] = c.token_dim;
  j["nx"] = c.nx;
  j["ny"] = c.ny;
  j["heads"] = c.heads;
  j["attn"] = to_string(c.attn);
  j["first_layer_attn"] = c.first_layer_attn ? Json(to_string(*c.first_layer_attn)) : Json(nullptr);
  j["full_self_attn"] = c.full_self_attn;
  j["mlp"] = c.mlp;
  j["widening"] = c.widening;
  j["layernorm"] = to_string(c.layernorm);
  j["embed"] = to_string(c.embed);
  j["input_mlp"] = c.input_mlp;
  j["clip_tokens"] = clip_json(c.clip_tokens);
  j["init_std_scale"] = c.init_std_scale;
  j["norm_eps"] = c.norm_eps;
  return j;
}

ModelConfig model_config_from_json(const Json& j, ModelConfig c) {
  reject_unknown_keys(j,
                      {"depth", "recurrent", "input_dim", "token_dim", "nx", "ny", "heads", "attn",
                       "first_layer_attn", "full_self_attn", "mlp", "widening", "layernorm", "embed",
                       "input_mlp", "clip_tokens", "init_std_scale", "norm_eps"},
                      "model config");
  read(j, "depth", c.depth);
  read(j, "recurrent", c.recurrent);
  read(j, "input_dim", c.input_dim);
  read(j, "token_dim", c.token_dim);
  read(j, "nx", c.nx);
  read(j, "ny", c.ny);
  read(j, "heads", c.heads);
  if (j.contains("attn")) c.attn = attn_kind_from_string(j["attn"].get<std::string>());
  if (j.contains("first_layer_attn")) {
    const Json& v = j["first_layer_attn"];
    c.first_layer_attn = v.is_null() ? std::nullopt : std::optional(attn_kind_from_string(v.get<std::string>()));
  }
  read(j, "full_self_attn", c.full_self_attn);
  read(j, "mlp", c.mlp);
  read(j, "widening", c.widening);
  if (j.contains("layernorm")) c.layernorm = norm_mode_from_string(j["layernorm"].get<std::string>());
  if (j.contains("embed")) c.embed = embed_mode_from_string(j["embed"].get<std::string>());
  read(j, "input_mlp", c.input_mlp);
  if (j.contains("clip_tokens")) c.clip_tokens = clip_from(j["clip_tokens"]);
  read(j, "init_std_scale", c.init_std_scale);
  read(j, "norm_eps", c.norm_eps);
  c.validate();
  return c;
}

Json to_json(const TaskSpec& s) {
  Json j;
  j["n"] = s.n;
  j["nx"] = s.nx;
  j["ny"] = s.ny;
  j["kind"] = to_string(s.kind);
  j["ood_alpha"] = s.ood.alpha;
  j["ood_mode"] = to_string(s.ood.mode);
  j["alt_dist"] = s.ood.alt_dist ? Json(*s.ood.alt_dist == DistKind::normal        ? "normal"
                                        : *s.ood.alt_dist == DistKind::exponential ? "exponential"
                                                                                  : "laplace")
                                 : Json(nullptr);
  return j;
}

TaskSpec task_spec_from_json(const Json& j, TaskSpec s) {
  reject_unknown_keys(j, {"n", "nx", "ny", "kind", "ood_alpha", "ood_mode", "alt_dist"}, "task spec");
  read(j, "n", s.n);
  read(j, "nx", s.nx);
  read(j, "ny", s.ny);
  if (j.contains("kind")) s.kind = task_kind_from_string(j["kind"].get<std::string>());
  read(j, "ood_alpha", s.ood.alpha);
  if (j.contains("ood_mode")) s.ood.mode = ood_mode_from_string(j["ood_mode"].get<std::string>());
  if (j.contains("alt_dist")) {
    const Json& v = j["alt_dist"];
    if (v.is_null()) {
      s.ood.alt_dist.reset();
    } else {
      const std::string name = v.get<std::string>();
      if (name == "normal") s.ood.alt_dist = DistKind::normal;
      else if (name == "exponential") s.ood.alt_dist = DistKind::exponential;
      else if (name == "laplace") s.ood.alt_dist = DistKind::laplace;
      else throw ConfigError("unknown alt_dist '" + name + "'");
    }
  }
  return s;
}

Json to_json(const LayoutSpec& s) {
  return {{"layout", to_string(s.layout)}, {"pos_enc_dim", s.pos_enc_dim}, {"pos_encoding", to_string(s.encoding)}};
}

LayoutSpec layout_spec_from_json(const Json& j, LayoutSpec s) {
  reject_unknown_keys(j, {"layout", "pos_enc_dim", "pos_encoding"}, "layout spec");
  if (j.contains("layout")) s.layout = layout_from_string(j["layout"].get<std::string>());
  read(j, "pos_enc_dim", s.pos_enc_dim);
  if (j.contains("pos_encoding")) s.encoding = pos_encoding_from_string(j["pos_encoding"].get<std::string>());
  return s;
}

Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Index k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
    rows.push_back(row);
  }
  return rows;
}

Matrix matrix_from_json(const Json& j) {
  if (!j.is_array() || j.empty()) throw ConfigError("matrix must be a non-empty array of rows");
  const Index rows = static_cast<Index>(j.size());
  const Index cols = static_cast<Index>(j[0].size());
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    if (static_cast<Index>(j[i].size()) != cols) throw ConfigError("ragged matrix rows");
    for (Index k = 0; k < cols; ++k) m(i, k) = j[i][k].get<double>();
  }
  return m;
}

Json to_json(const GdHyper& h) {
  Json j;
  j["etas"] = h.etas;
  j["gammas"] = h.gammas;
  j["lambda_damp"] = h.lambda_damp;
  j["w0"] = h.w0 ? matrix_to_json(*h.w0) : Json(nullptr);
  j["clip"] = clip_json(h.clip);
  return j;
}

GdHyper gd_hyper_from_json(const Json& j) {
  reject_unknown_keys(j, {"etas", "gammas", "lambda_damp", "w0", "clip"}, "GD hyperparameters");
  GdHyper h;
  read(j, "etas", h.etas);
  read(j, "gammas", h.gammas);
  read(j, "lambda_damp", h.lambda_damp);
  if (j.contains("w0") && !j["w0"].is_null()) h.w0 = matrix_from_json(j["w0"]);
  if (j.contains("clip")) h.clip = clip_from(j["clip"]);
  h.validate();
  return h;
}

Json to_json(const SpectrumReport& r) {
  Json j;
  j["gamma"] = r.gamma;
  j["eigenvalues_before"] = r.eigenvalues_before;
  j["eigenvalues_after"] = r.eigenvalues_after;
  j["condition_before"] = r.condition_before;
  j["condition_after_formula"] = r.condition_after_formula;
  j["condition_after_true"] = r.condition_after_true;
  j["f_local_max"] = std::isfinite(r.f_local_max) ? Json(r.f_local_max) : Json(nullptr);
  j["local_max_inside"] = r.local_max_inside;
  return j;
}

Json to_json(const SpectrumEnsemble& e) {
  return {{"gamma", e.gamma},
          {"tasks", e.tasks},
          {"min_eigenvalue", e.min_eigenvalue},
          {"max_eigenvalue", e.max_eigenvalue},
          {"mean_min_eigenvalue", e.mean_min_eigenvalue},
          {"mean_max_eigenvalue", e.mean_max_eigenvalue},
          {"median_condition_before", e.median_condition_before},
          {"median_condition_after_formula", e.median_condition_after_formula},
          {"median_condition_after_true", e.median_condition_after_true}};
}

}  // namespace icl
