// Run configuration: JSON file with dataset / model / train / enhance / xai /
// ensemble / grid sections. Unknown keys are rejected.
#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mammo/data.hpp"
#include "mammo/enhance.hpp"
#include "mammo/models.hpp"
#include "mammo/train.hpp"
#include "mammo/xai.hpp"

namespace mammo {

inline constexpr const char* kToolVersion = "0.1.0";

using Json = nlohmann::json;

struct ModelOverrides {
  std::optional<std::vector<std::size_t>> channels, depths;
  std::optional<std::size_t> patch, embed_dim, heads, depth, window, mlp_ratio, kernel, hidden;
};

struct EnsembleMemberSpec {
  ModelKind model = ModelKind::ResNetLite;
  EnhancementKind enhancement = EnhancementKind::Original;
  std::string checkpoint;  // empty: <dir>/<model>_<enhancement>.mmfw
};

struct RunConfig {
  std::uint64_t seed = 42;
  std::size_t input_side = 64;
  DatasetConfig dataset;
  ModelOverrides model;
  TrainConfig train;
  EnhanceConfig enhance;
  XaiConfig xai;
  struct Ensemble {
    std::vector<EnsembleMemberSpec> members{{ModelKind::ResNetLite, EnhancementKind::Original, ""},
                                            {ModelKind::ViTLite, EnhancementKind::AHE, ""},
                                            {ModelKind::SwinLite, EnhancementKind::HOG, ""}};
    std::optional<std::vector<double>> weights;  // none: calibrated on the val split
    double divergence_threshold = 0.3;
    double band_lo = 0.2, band_hi = 0.8;
  } ensemble;
  std::size_t jobs = 1;

  /// Model config for `kind` with overrides and the run's seed/side applied.
  ModelConfig model_config(ModelKind kind, std::uint64_t seed_override) const {
    auto c = default_config(kind);
    c.input_side = input_side;
    c.seed = seed_override;
    if (model.channels) c.channels = *model.channels;
    if (model.depths) c.depths = *model.depths;
    if (model.patch) c.patch = *model.patch;
    if (model.embed_dim) c.embed_dim = *model.embed_dim;
    if (model.heads) c.heads = *model.heads;
    if (model.depth) c.depth = *model.depth;
    if (model.window) c.window = *model.window;
    if (model.mlp_ratio) c.mlp_ratio = *model.mlp_ratio;
    if (model.kernel) c.kernel = *model.kernel;
    if (model.hidden) c.hidden = *model.hidden;
    return c;
  }
};

namespace detail {

inline void reject_unknown(const Json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : obj.items()) {
    if (!ok.contains(k)) throw ConfigError("config: unknown key '" + (where.empty() ? k : where + "." + k) + "'");
  }
}

template <typename V>
void read(const Json& obj, const char* key, V& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: bad type for '" + where + "." + key + "'");
  }
}

template <typename V>
void read_opt(const Json& obj, const char* key, std::optional<V>& out, const std::string& where) {
  if (!obj.contains(key)) return;
  V v{};
  read(obj, key, v, where);
  out = v;
}

}  // namespace detail

inline RunConfig parse_run_config(const Json& j) {
  using detail::read;
  RunConfig c;
  detail::reject_unknown(j, "", {"seed", "input_side", "dataset", "model", "train", "enhance", "xai", "ensemble", "grid", "tool_version"});
  read(j, "seed", c.seed, "");
  read(j, "input_side", c.input_side, "");
  c.dataset.seed = c.seed;
  c.train.seed = c.seed;
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    detail::reject_unknown(d, "dataset", {"benign_count", "malignant_count", "per_class", "synth_size", "split", "ingest_root"});
    if (d.contains("per_class")) {
      std::size_t n = 0;
      read(d, "per_class", n, "dataset");
      c.dataset.benign_count = c.dataset.malignant_count = n;
    }
    read(d, "benign_count", c.dataset.benign_count, "dataset");
    read(d, "malignant_count", c.dataset.malignant_count, "dataset");
    read(d, "synth_size", c.dataset.synth.size, "dataset");
    if (d.contains("split")) {
      const auto& s = d["split"];
      detail::reject_unknown(s, "dataset.split", {"train", "val", "test"});
      read(s, "train", c.dataset.split.train, "dataset.split");
      read(s, "val", c.dataset.split.val, "dataset.split");
      read(s, "test", c.dataset.split.test, "dataset.split");
    }
    if (d.contains("ingest_root")) {
      std::string root;
      read(d, "ingest_root", root, "dataset");
      c.dataset.ingest_root = root;
    }
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    detail::reject_unknown(m, "model",
                           {"channels", "depths", "patch", "embed_dim", "heads", "depth", "window", "mlp_ratio", "kernel", "hidden"});
    detail::read_opt(m, "channels", c.model.channels, "model");
    detail::read_opt(m, "depths", c.model.depths, "model");
    detail::read_opt(m, "patch", c.model.patch, "model");
    detail::read_opt(m, "embed_dim", c.model.embed_dim, "model");
    detail::read_opt(m, "heads", c.model.heads, "model");
    detail::read_opt(m, "depth", c.model.depth, "model");
    detail::read_opt(m, "window", c.model.window, "model");
    detail::read_opt(m, "mlp_ratio", c.model.mlp_ratio, "model");
    detail::read_opt(m, "kernel", c.model.kernel, "model");
    detail::read_opt(m, "hidden", c.model.hidden, "model");
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    detail::reject_unknown(t, "train",
                           {"epochs", "batch_size", "lr0", "gamma", "step", "weight_decay", "beta1", "beta2", "eps", "class_weights"});
    read(t, "epochs", c.train.epochs, "train");
    read(t, "batch_size", c.train.batch_size, "train");
    read(t, "lr0", c.train.lr0, "train");
    read(t, "gamma", c.train.gamma, "train");
    read(t, "step", c.train.step, "train");
    read(t, "weight_decay", c.train.weight_decay, "train");
    read(t, "beta1", c.train.beta1, "train");
    read(t, "beta2", c.train.beta2, "train");
    read(t, "eps", c.train.eps, "train");
    read(t, "class_weights", c.train.class_weights, "train");
  }
  if (j.contains("enhance")) {
    const auto& e = j["enhance"];
    detail::reject_unknown(e, "enhance", {"ahe", "hog"});
    if (e.contains("ahe")) {
      const auto& a = e["ahe"];
      detail::reject_unknown(a, "enhance.ahe", {"tile_rows", "tile_cols", "clip_limit", "bins"});
      read(a, "tile_rows", c.enhance.ahe.tile_rows, "enhance.ahe");
      read(a, "tile_cols", c.enhance.ahe.tile_cols, "enhance.ahe");
      read(a, "clip_limit", c.enhance.ahe.clip_limit, "enhance.ahe");
      read(a, "bins", c.enhance.ahe.bins, "enhance.ahe");
    }
    if (e.contains("hog")) {
      const auto& h = e["hog"];
      detail::reject_unknown(h, "enhance.hog", {"cell", "block", "bins", "signed"});
      read(h, "cell", c.enhance.hog.cell, "enhance.hog");
      read(h, "block", c.enhance.hog.block, "enhance.hog");
      read(h, "bins", c.enhance.hog.bins, "enhance.hog");
      read(h, "signed", c.enhance.hog.signed_orientation, "enhance.hog");
    }
  }
  if (j.contains("xai")) {
    const auto& x = j["xai"];
    detail::reject_unknown(x, "xai", {"ig_steps", "occlusion_patch", "occlusion_stride", "occlusion_fill", "target_class", "batch_size"});
    read(x, "ig_steps", c.xai.ig_steps, "xai");
    read(x, "occlusion_patch", c.xai.occlusion_patch, "xai");
    read(x, "occlusion_stride", c.xai.occlusion_stride, "xai");
    read(x, "occlusion_fill", c.xai.occlusion_fill, "xai");
    read(x, "target_class", c.xai.target_class, "xai");
    read(x, "batch_size", c.xai.batch_size, "xai");
  }
  if (j.contains("ensemble")) {
    const auto& e = j["ensemble"];
    detail::reject_unknown(e, "ensemble", {"members", "weights", "divergence_threshold", "band"});
    if (e.contains("members")) {
      c.ensemble.members.clear();
      if (!e["members"].is_array()) throw ConfigError("config: 'ensemble.members' must be an array");
      for (const auto& m : e["members"]) {
        detail::reject_unknown(m, "ensemble.members[]", {"model", "enhancement", "checkpoint"});
        EnsembleMemberSpec s;
        std::string kind = "resnet", enh = "original";
        read(m, "model", kind, "ensemble.members[]");
        read(m, "enhancement", enh, "ensemble.members[]");
        read(m, "checkpoint", s.checkpoint, "ensemble.members[]");
        try {
          s.model = parse_model_kind(kind);
          s.enhancement = parse_enhancement(enh);
        } catch (const std::invalid_argument& ex) {
          throw ConfigError(std::string("config: ") + ex.what());
        }
        c.ensemble.members.push_back(s);
      }
    }
    if (e.contains("weights") && !e["weights"].is_null() && e["weights"] != "auto") {
      std::vector<double> w;
      read(e, "weights", w, "ensemble");
      c.ensemble.weights = w;
    }
    read(e, "divergence_threshold", c.ensemble.divergence_threshold, "ensemble");
    if (e.contains("band")) {
      std::vector<double> band;
      read(e, "band", band, "ensemble");
      if (band.size() != 2) throw ConfigError("config: 'ensemble.band' needs [lo, hi]");
      c.ensemble.band_lo = band[0];
      c.ensemble.band_hi = band[1];
    }
  }
  if (j.contains("grid")) {
    const auto& g = j["grid"];
    detail::reject_unknown(g, "grid", {"jobs"});
    read(g, "jobs", c.jobs, "grid");
  }
  c.train.validate();
  c.dataset.synth.validate();
  if (c.input_side < 16) throw ConfigError("config: input_side must be >= 16");
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
  return parse_run_config(j);
}

/// Fully resolved configuration, suitable for echoing into output directories.
inline Json to_json(const RunConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["input_side"] = c.input_side;
  j["dataset"] = {{"benign_count", c.dataset.benign_count},
                  {"malignant_count", c.dataset.malignant_count},
                  {"synth_size", c.dataset.synth.size},
                  {"split", {{"train", c.dataset.split.train}, {"val", c.dataset.split.val}, {"test", c.dataset.split.test}}}};
  if (c.dataset.ingest_root) j["dataset"]["ingest_root"] = c.dataset.ingest_root->string();
  Json m = Json::object();
  if (c.model.channels) m["channels"] = *c.model.channels;
  if (c.model.depths) m["depths"] = *c.model.depths;
  if (c.model.patch) m["patch"] = *c.model.patch;
  if (c.model.embed_dim) m["embed_dim"] = *c.model.embed_dim;
  if (c.model.heads) m["heads"] = *c.model.heads;
  if (c.model.depth) m["depth"] = *c.model.depth;
  if (c.model.window) m["window"] = *c.model.window;
  if (c.model.mlp_ratio) m["mlp_ratio"] = *c.model.mlp_ratio;
  if (c.model.kernel) m["kernel"] = *c.model.kernel;
  if (c.model.hidden) m["hidden"] = *c.model.hidden;
  j["model"] = m;
  j["train"] = {{"epochs", c.train.epochs},       {"batch_size", c.train.batch_size},     {"lr0", c.train.lr0},
                {"gamma", c.train.gamma},         {"step", c.train.step},                 {"weight_decay", c.train.weight_decay},
                {"beta1", c.train.beta1},         {"beta2", c.train.beta2},               {"eps", c.train.eps},
                {"class_weights", c.train.class_weights}};
  j["enhance"] = {{"ahe",
                   {{"tile_rows", c.enhance.ahe.tile_rows},
                    {"tile_cols", c.enhance.ahe.tile_cols},
                    {"clip_limit", c.enhance.ahe.clip_limit},
                    {"bins", c.enhance.ahe.bins}}},
                  {"hog",
                   {{"cell", c.enhance.hog.cell},
                    {"block", c.enhance.hog.block},
                    {"bins", c.enhance.hog.bins},
                    {"signed", c.enhance.hog.signed_orientation}}}};
  j["xai"] = {{"ig_steps", c.xai.ig_steps},           {"occlusion_patch", c.xai.occlusion_patch},
              {"occlusion_stride", c.xai.occlusion_stride}, {"occlusion_fill", c.xai.occlusion_fill},
              {"target_class", c.xai.target_class},   {"batch_size", c.xai.batch_size}};
  Json members = Json::array();
  for (const auto& s : c.ensemble.members) {
    members.push_back({{"model", model_name(s.model)}, {"enhancement", enhancement_name(s.enhancement)}, {"checkpoint", s.checkpoint}});
  }
  j["ensemble"] = {{"members", members},
                   {"weights", c.ensemble.weights ? Json(*c.ensemble.weights) : Json("auto")},
                   {"divergence_threshold", c.ensemble.divergence_threshold},
                   {"band", {c.ensemble.band_lo, c.ensemble.band_hi}}};
  j["grid"] = {{"jobs", c.jobs}};
  j["tool_version"] = kToolVersion;
  return j;
}

}  // namespace mammo
