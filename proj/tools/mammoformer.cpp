// mammoformer: synthetic data, enhancement, training, grid benchmark,
// attribution maps and the tiered ensemble from one binary.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mammo/config.hpp"
#include "mammo/data.hpp"
#include "mammo/enhance.hpp"
#include "mammo/ensemble.hpp"
#include "mammo/eval.hpp"
#include "mammo/grid.hpp"
#include "mammo/models.hpp"
#include "mammo/train.hpp"
#include "mammo/xai.hpp"

namespace fs = std::filesystem;
using namespace mammo;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kIo = 3, kNumerical = 4 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? parse_run_config(Json::object()) : load_run_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.dataset.seed = *c.seed;
    cfg.train.seed = *c.seed;
  }
  return cfg;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << s;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Creates `dir` and echoes the resolved config and tool version into it.
void prepare_out(const fs::path& dir, const RunConfig& cfg) {
  fs::create_directories(dir);
  auto j = to_json(cfg);
  j["tool_version"] = kToolVersion;
  write_text(dir / "resolved_config.json", j.dump(2) + "\n");
}

Dataset obtain_dataset(const std::string& data_dir, const RunConfig& cfg) {
  if (!data_dir.empty()) return load_dataset(data_dir);
  return build_dataset(cfg.dataset);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.push_back(tok);
  return out;
}

/// Resized copy of `img` at side×side (bilinear, rounded), for overlays.
ImageGray resized(const ImageGray& img, std::size_t side) {
  const auto px = resize_bilinear(img, side, side);
  ImageGray out(side, side);
  for (std::size_t i = 0; i < px.size(); ++i) out.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(px[i], 0.0, 255.0)));
  return out;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& common, std::optional<std::size_t> per_class, const std::string& out) {
  auto cfg = resolve(common);
  if (per_class) cfg.dataset.benign_count = cfg.dataset.malignant_count = *per_class;
  const auto ds = build_dataset(cfg.dataset);
  prepare_out(out, cfg);
  save_dataset(out, ds);
  std::printf("wrote %zu train, %zu val, %zu test images to %s\n", ds.train.size(), ds.val.size(), ds.test.size(), out.c_str());
  return kOk;
}

int cmd_enhance(const Common& common, const std::string& input, const std::string& method, const std::string& out) {
  const auto cfg = resolve(common);
  std::vector<EnhancementKind> kinds;
  if (method == "all") kinds.assign(kAllEnhancements.begin(), kAllEnhancements.end());
  else
    for (const auto& m : split_list(method)) kinds.push_back(parse_enhancement(m));
  std::vector<fs::path> files;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::recursive_directory_iterator(input)) {
      const auto ext = e.path().extension().string();
      if (e.is_regular_file() && (ext == ".pgm" || ext == ".png")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(input);
  }
  prepare_out(out, cfg);
  for (const auto& f : files) {
    const auto img = read_image(f);
    for (auto k : kinds) write_png(fs::path(out) / (f.stem().string() + "_" + std::string(enhancement_name(k)) + ".png"), enhance(img, k, cfg.enhance));
  }
  std::printf("enhanced %zu image(s) x %zu setting(s) into %s\n", files.size(), kinds.size(), out.c_str());
  return kOk;
}

int cmd_train(const Common& common, const std::string& model, const std::string& enh, const std::string& data_dir,
              std::optional<std::size_t> epochs, const std::string& out) {
  auto cfg = resolve(common);
  if (epochs) cfg.train.epochs = *epochs;
  cfg.train.validate();
  const auto kind = parse_model_kind(model);
  const auto ek = parse_enhancement(enh);
  const auto ds = obtain_dataset(data_dir, cfg);
  const auto data = prepare_data(ds, ek, cfg.input_side, cfg.enhance);
  prepare_out(out, cfg);
  auto res = train(build(kind, cfg.model_config(kind, cfg.seed)), data, cfg.train, [](const EpochRecord& r) {
    std::printf("epoch %zu lr %.4g train_loss %.4f train_acc %.4f val_loss %.4f val_acc %.4f\n", r.epoch, r.lr, r.train_loss, r.train_acc,
                r.val_loss, r.val_acc);
    std::fflush(stdout);
  });
  attach_metadata(res.model, data, res.history);
  const std::string stem = std::string(model_name(kind)) + "_" + std::string(enhancement_name(ek));
  save_checkpoint(res.model, fs::path(out) / (stem + ".mmfw"));
  write_history_csv(fs::path(out) / (stem + "_history.csv"), res.history);
  const auto ev = evaluate(res.model, data.test);
  const auto m = metrics(confusion(ev.preds, data.test.labels));
  std::optional<double> auc;
  try {
    auc = roc_auc(ev.prob_malignant, data.test.labels).auc;
  } catch (const MetricError&) {
  }
  auto f = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  write_text(fs::path(out) / (stem + "_metrics.csv"), "model,enhancement,accuracy,precision,recall,f1,auc\n" + std::string(model_name(kind)) +
                                                          "," + std::string(enhancement_name(ek)) + "," + f(m.accuracy) + "," +
                                                          f(m.precision) + "," + f(m.recall) + "," + f(m.f1) + "," + f(auc) + "\n");
  std::printf("best epoch %zu (val %.4f); test accuracy %s precision %s recall %s f1 %s\n", res.history.best_epoch,
              res.history.best_val_accuracy, format_metric(m.accuracy).c_str(), format_metric(m.precision).c_str(),
              format_metric(m.recall).c_str(), format_metric(m.f1).c_str());
  return kOk;
}

int cmd_grid(const Common& common, const std::string& data_dir, std::optional<std::size_t> jobs, std::optional<std::size_t> epochs,
             const std::string& models, const std::string& enhancements, bool save_models, const std::string& out) {
  auto cfg = resolve(common);
  if (jobs) cfg.jobs = *jobs;
  if (epochs) cfg.train.epochs = *epochs;
  cfg.train.validate();
  GridOptions opt;
  opt.jobs = cfg.jobs;
  if (!models.empty()) {
    opt.models.clear();
    for (const auto& m : split_list(models)) opt.models.push_back(parse_model_kind(m));
  }
  if (!enhancements.empty()) {
    opt.enhancements.clear();
    for (const auto& e : split_list(enhancements)) opt.enhancements.push_back(parse_enhancement(e));
  }
  const auto ds = obtain_dataset(data_dir, cfg);
  prepare_out(out, cfg);
  opt.on_cell = [](const CellResult& c) {
    if (c.ok) std::fprintf(stderr, "%s/%s: accuracy %s\n", model_name(c.model).data(), enhancement_name(c.enhancement).data(), format_metric(c.metrics.accuracy).c_str());
    else std::fprintf(stderr, "%s/%s: FAILED: %s\n", model_name(c.model).data(), enhancement_name(c.enhancement).data(), c.error.c_str());
  };
  if (save_models) {
    fs::create_directories(fs::path(out) / "checkpoints");
    opt.on_model = [&](const CellResult& c, const Model& m) {
      save_checkpoint(m, fs::path(out) / "checkpoints" / (std::string(model_name(c.model)) + "_" + std::string(enhancement_name(c.enhancement)) + ".mmfw"));
    };
  }
  const auto g = run_grid(ds, cfg, opt);
  write_text(fs::path(out) / "grid.csv", render_grid_csv(g));
  write_text(fs::path(out) / "grid.md", render_grid_markdown(g, cfg));
  std::printf("wrote %s and %s\n", (fs::path(out) / "grid.md").c_str(), (fs::path(out) / "grid.csv").c_str());
  return kOk;
}

int cmd_explain(const Common& common, const std::string& checkpoint, const std::string& image, const std::string& methods,
                const std::string& out) {
  auto cfg = resolve(common);
  const auto model = load_checkpoint(checkpoint);
  const auto raw = read_image(image);
  const std::size_t side = model.config.input_side;
  const auto enhanced = enhance(raw, enhancement_of(model), cfg.enhance);
  const auto x = to_model_input(enhanced, side, normalization_of(model));
  const auto clf = classifier_of(model);
  std::vector<XaiMethod> list;
  if (methods == "all") {
    for (auto m : kAllXaiMethods)
      if (m != XaiMethod::AttentionMap || clf.has_attention) list.push_back(m);
  } else {
    for (const auto& m : split_list(methods)) list.push_back(parse_xai_method(m));
  }
  prepare_out(out, cfg);
  const auto base = resized(enhanced, side);
  auto xcfg = cfg.xai;
  xcfg.norm = normalization_of(model);
  for (auto m : list) {
    xcfg.method = m;
    const auto map = explain(clf, x, xcfg);
    const std::string name(xai_method_name(m));
    write_png(fs::path(out) / (name + ".png"), overlay(base, map));
    write_map_raw(fs::path(out) / (name + ".map"), map);
    std::printf("%s: sum %.6g\n", name.c_str(), map.sum());
  }
  return kOk;
}

struct EnsembleInput {
  std::string id;
  ImageGray image;
  std::optional<int> label;
};

std::vector<EnsembleInput> ensemble_inputs(const fs::path& dir) {
  std::vector<EnsembleInput> in;
  if (fs::exists(dir / "manifest.csv")) {
    const auto ds = load_dataset(dir);
    for (const auto& li : ds.test) in.push_back({li.id, li.image, static_cast<int>(li.label)});
    return in;
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".pgm" || ext == ".png")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) in.push_back({fs::relative(f, dir).string(), read_image(f), std::nullopt});
  return in;
}

int cmd_ensemble(const Common& common, const std::string& input, const std::string& ckpt_dir, const std::string& data_dir,
                 const std::string& out) {
  const auto cfg = resolve(common);
  EnsembleConfig ec;
  ec.divergence_threshold = cfg.ensemble.divergence_threshold;
  ec.band_lo = cfg.ensemble.band_lo;
  ec.band_hi = cfg.ensemble.band_hi;
  for (const auto& s : cfg.ensemble.members) {
    const std::string name = std::string(model_name(s.model)) + "_" + std::string(enhancement_name(s.enhancement));
    const fs::path path = s.checkpoint.empty() ? fs::path(ckpt_dir) / (name + ".mmfw") : fs::path(s.checkpoint);
    Model m;
    try {
      m = load_checkpoint(path, s.model);
    } catch (const CheckpointError& e) {
      throw CheckpointError(e.code(), "ensemble member " + name + ": " + e.what());
    }
    if (enhancement_of(m) != s.enhancement) throw ConfigError("ensemble member " + name + ": checkpoint was trained on " + std::string(enhancement_name(enhancement_of(m))));
    ec.members.push_back(model_member(name, std::move(m), cfg.enhance));
  }
  if (cfg.ensemble.weights) {
    ec.weights = *cfg.ensemble.weights;
  } else {
    const fs::path vdir = data_dir.empty() ? fs::path(input) : fs::path(data_dir);
    if (!fs::exists(vdir / "manifest.csv")) throw ConfigError("ensemble: weights are 'auto' but no dataset with a val split was given (--data)");
    ec.weights = calibrate_weights(ec.members, load_dataset(vdir).val);
    for (auto& m : ec.members) m.calls->store(0);
  }
  ec.validate();
  const auto inputs = ensemble_inputs(input);
  prepare_out(out, cfg);
  std::ofstream jl(fs::path(out) / "decisions.jsonl");
  if (!jl) throw IoError("cannot write decisions.jsonl");
  std::size_t flagged = 0, tier1 = 0, correct = 0, labelled = 0;
  for (const auto& item : inputs) {
    const auto d = predict(ec, item.image);
    Json row;
    row["id"] = item.id;
    row["tier"] = tier_name(d.tier);
    Json probs = Json::array();
    for (const auto& p : d.member_probs) probs.push_back(p ? Json(*p) : Json(nullptr));
    row["member_probs"] = probs;
    row["fused_prob"] = d.fused_prob;
    row["label"] = d.label;
    row["flagged"] = d.flagged;
    jl << row.dump() << '\n';
    flagged += d.flagged;
    tier1 += d.tier == Tier::Primary;
    if (item.label) {
      ++labelled;
      correct += d.label == *item.label;
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(inputs.size(), 1));
  Json summary;
  summary["cases"] = inputs.size();
  summary["flagged"] = flagged;
  summary["flag_rate"] = static_cast<double>(flagged) / n;
  summary["tier1_short_circuit_rate"] = static_cast<double>(tier1) / n;
  summary["weights"] = ec.weights;
  summary["divergence_threshold"] = ec.divergence_threshold;
  summary["band"] = {ec.band_lo, ec.band_hi};
  Json calls = Json::object();
  for (const auto& m : ec.members) calls[m.name] = m.calls->load();
  summary["member_calls"] = calls;
  if (labelled) summary["accuracy"] = static_cast<double>(correct) / static_cast<double>(labelled);
  write_text(fs::path(out) / "summary.json", summary.dump(2) + "\n");
  std::printf("%zu cases, flag rate %.4f, tier-1 rate %.4f\n", inputs.size(), static_cast<double>(flagged) / n, static_cast<double>(tier1) / n);
  return kOk;
}

int cmd_report(const Common& common, const std::string& grid_csv, const std::string& out) {
  const auto cfg = resolve(common);
  const auto g = parse_grid_csv(read_text(grid_csv));
  prepare_out(out, cfg);
  write_text(fs::path(out) / "report.md", render_grid_markdown(g, cfg));
  std::printf("wrote %s\n", (fs::path(out) / "report.md").c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MammoFormer desk-scale pipeline"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", common.seed, "global seed override");

  std::optional<std::size_t> per_class, epochs, jobs;
  std::string out, input, method = "all", model, enh = "original", data_dir, models, enhancements, checkpoint, image, methods = "all",
                   ckpt_dir = ".", grid_csv;
  bool save_models = false;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  gen->add_option("--per-class", per_class, "images per class");
  gen->add_option("--out", out, "output directory")->required();

  auto* enh_cmd = app.add_subcommand("enhance", "apply enhancement transforms to images");
  enh_cmd->add_option("--input", input, "image file or directory")->required();
  enh_cmd->add_option("--method", method, "original|negative|ahe|hog|all (comma separated)");
  enh_cmd->add_option("--out", out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train one model");
  tr->add_option("--model", model, "basecnn|resnet|vit|swin|densetrans|convmixer|convnext")->required();
  tr->add_option("--enhance", enh, "original|negative|ahe|hog");
  tr->add_option("--data", data_dir, "dataset directory (default: generate from config)");
  tr->add_option("--epochs", epochs, "epoch count override");
  tr->add_option("--out", out, "output directory")->required();

  auto* gr = app.add_subcommand("grid", "train the model x enhancement grid and write the report");
  gr->add_option("--data", data_dir, "dataset directory (default: generate from config)");
  gr->add_option("--jobs", jobs, "parallel cells");
  gr->add_option("--epochs", epochs, "epoch count override");
  gr->add_option("--models", models, "comma separated subset");
  gr->add_option("--enhancements", enhancements, "comma separated subset");
  gr->add_flag("--save-checkpoints", save_models, "keep every cell's checkpoint");
  gr->add_option("--out", out, "output directory")->required();

  auto* ex = app.add_subcommand("explain", "attribution maps for one image");
  ex->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  ex->add_option("--image", image, "PGM/PNG image")->required();
  ex->add_option("--methods", methods, "saliency,ig,occlusion,gradcam,guided_gradcam,deeplift,attention or all");
  ex->add_option("--out", out, "output directory")->required();

  auto* en = app.add_subcommand("ensemble", "run the tiered ensemble over a directory");
  en->add_option("--input", input, "dataset directory (test split) or image directory")->required();
  en->add_option("--checkpoints", ckpt_dir, "directory holding <model>_<enhancement>.mmfw");
  en->add_option("--data", data_dir, "dataset used to calibrate weights (default: --input)");
  en->add_option("--out", out, "output directory")->required();

  auto* rep = app.add_subcommand("report", "render the markdown report from a grid CSV");
  rep->add_option("--grid", grid_csv, "grid.csv from a previous run")->required();
  rep->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(common, per_class, out);
    if (enh_cmd->parsed()) return cmd_enhance(common, input, method, out);
    if (tr->parsed()) return cmd_train(common, model, enh, data_dir, epochs, out);
    if (gr->parsed()) return cmd_grid(common, data_dir, jobs, epochs, models, enhancements, save_models, out);
    if (ex->parsed()) return cmd_explain(common, checkpoint, image, methods, out);
    if (en->parsed()) return cmd_ensemble(common, input, ckpt_dir, data_dir, out);
    if (rep->parsed()) return cmd_report(common, grid_csv, out);
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return kNumerical;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return kIo;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kIo;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kUsage;
}
