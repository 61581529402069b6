// Model × enhancement benchmark grid and its markdown / CSV report.
#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mammo/config.hpp"
#include "mammo/data.hpp"
#include "mammo/eval.hpp"
#include "mammo/models.hpp"
#include "mammo/train.hpp"

namespace mammo {

/// Published full-scale accuracy / precision / recall / F1 (%), rows in
/// kAllModels order, columns Orig, Neg, AHE, HOG.
struct ReferenceTable {
  std::array<std::array<double, 4>, 7> accuracy, precision, recall, f1;
};

inline const ReferenceTable& published_reference() {
  static const ReferenceTable t{
      {{{99.9, 99.9, 99.9, 99.7}, {99.9, 99.9, 99.9, 99.9}, {94.0, 54.3, 98.3, 99.0}, {83.3, 91.3, 51.7, 96.3},
        {91.7, 99.9, 94.0, 95.0}, {99.9, 99.9, 99.9, 99.9}, {99.9, 99.9, 99.9, 99.0}}},
      {{{99.9, 99.9, 99.9, 99.7}, {99.9, 99.9, 99.9, 99.9}, {94.3, 56.6, 98.3, 99.0}, {87.4, 92.7, 26.7, 96.6},
        {92.8, 99.9, 94.7, 95.2}, {99.9, 99.9, 99.9, 99.9}, {99.9, 99.9, 99.9, 99.0}}},
      {{{99.9, 99.9, 99.9, 99.7}, {99.9, 99.9, 99.9, 99.9}, {94.0, 54.3, 98.3, 99.0}, {83.3, 91.3, 51.7, 96.3},
        {91.7, 99.9, 94.0, 95.0}, {99.9, 99.9, 99.9, 99.9}, {99.9, 99.9, 99.9, 99.0}}},
      {{{99.9, 99.9, 99.9, 99.7}, {99.9, 99.9, 99.9, 99.9}, {94.0, 51.9, 98.3, 99.0}, {82.8, 91.3, 35.2, 96.3},
        {91.6, 99.9, 94.0, 95.0}, {99.9, 99.9, 99.9, 99.9}, {99.9, 99.9, 99.9, 99.0}}}};
  return t;
}

struct CellResult {
  ModelKind model = ModelKind::BaseCNN;
  EnhancementKind enhancement = EnhancementKind::Original;
  bool ok = false;
  std::string error;
  ConfusionMatrix cm;
  Metrics metrics;
  std::optional<double> auc;
  double best_val_accuracy = 0.0;
  std::size_t best_epoch = 0;
  std::uint64_t seed = 0;
  double seconds = 0.0;  // wall time, training plus test evaluation
};

struct GridResult {
  std::vector<ModelKind> models;
  std::vector<EnhancementKind> enhancements;
  std::vector<CellResult> cells;  // row-major: model, then enhancement

  const CellResult& cell(ModelKind m, EnhancementKind e) const {
    for (const auto& c : cells)
      if (c.model == m && c.enhancement == e) return c;
    throw std::out_of_range("grid: no such cell");
  }
};

/// Seed shared by every enhancement column of a model row, so columns differ
/// only in preprocessing.
inline std::uint64_t grid_cell_seed(std::uint64_t global_seed, ModelKind m) { return hash_combine(global_seed, hash_string(model_name(m))); }

struct GridOptions {
  std::vector<ModelKind> models{kAllModels.begin(), kAllModels.end()};
  std::vector<EnhancementKind> enhancements{kAllEnhancements.begin(), kAllEnhancements.end()};
  std::size_t jobs = 1;
  /// Called once per finished cell (from worker threads, serialised).
  std::function<void(const CellResult&)> on_cell;
  /// Optional per-cell checkpoint sink.
  std::function<void(const CellResult&, const Model&)> on_model;
};

inline CellResult run_cell(const PreparedData& data, const RunConfig& cfg, ModelKind kind, Model* trained = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  CellResult r;
  r.model = kind;
  r.enhancement = data.enhancement;
  r.seed = grid_cell_seed(cfg.seed, kind);
  auto tcfg = cfg.train;
  tcfg.seed = r.seed;
  auto res = train(build(kind, cfg.model_config(kind, r.seed)), data, tcfg);
  const auto ev = evaluate(res.model, data.test);
  r.cm = confusion(ev.preds, data.test.labels);
  r.metrics = metrics(r.cm);
  try {
    r.auc = roc_auc(ev.prob_malignant, data.test.labels).auc;
  } catch (const MetricError&) {
  }
  r.best_val_accuracy = res.history.best_val_accuracy;
  r.best_epoch = res.history.best_epoch;
  r.ok = true;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (trained) {
    attach_metadata(res.model, data, res.history);
    *trained = std::move(res.model);
  }
  return r;
}

/// Trains every (model, enhancement) cell; failures are recorded per cell.
/// Cells run on `jobs` threads, each cell single-threaded and deterministic.
inline GridResult run_grid(const Dataset& ds, const RunConfig& cfg, const GridOptions& opt = {}) {
  GridResult g;
  g.models = opt.models;
  g.enhancements = opt.enhancements;
  std::vector<PreparedData> prepared;
  for (auto e : opt.enhancements) prepared.push_back(prepare_data(ds, e, cfg.input_side, cfg.enhance));
  const std::size_t n = opt.models.size() * opt.enhancements.size();
  g.cells.resize(n);
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      const auto kind = opt.models[i / opt.enhancements.size()];
      const auto& data = prepared[i % opt.enhancements.size()];
      CellResult r;
      std::optional<Model> trained;
      try {
        if (opt.on_model) trained.emplace();
        r = run_cell(data, cfg, kind, trained ? &*trained : nullptr);
      } catch (const std::exception& ex) {
        r.model = kind;
        r.enhancement = data.enhancement;
        r.seed = grid_cell_seed(cfg.seed, kind);
        r.ok = false;
        r.error = ex.what();
      }
      std::lock_guard lock(mu);
      g.cells[i] = r;
      if (opt.on_cell) opt.on_cell(r);
      if (opt.on_model && r.ok) opt.on_model(r, *trained);
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(opt.jobs, n));
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < jobs; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  return g;
}

namespace detail {

inline std::string pct(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * *v);
  return buf;
}

inline std::string pct_plain(double v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

inline std::string signed_pct(double v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%+.1f", v);
  return buf;
}

inline std::size_t model_row(ModelKind m) { return static_cast<std::size_t>(m); }
inline std::size_t enh_col(EnhancementKind e) { return static_cast<std::size_t>(e); }

}  // namespace detail

/// Mean test accuracy of the successful cells in an enhancement column.
inline std::optional<double> enhancement_average(const GridResult& g, EnhancementKind e) {
  double s = 0.0;
  std::size_t k = 0;
  for (const auto& c : g.cells) {
    if (c.enhancement != e || !c.ok || !c.metrics.accuracy) continue;
    s += *c.metrics.accuracy;
    ++k;
  }
  if (k == 0) return std::nullopt;
  return s / static_cast<double>(k);
}

inline std::string render_grid_markdown(const GridResult& g, const RunConfig& cfg) {
  const auto& ref = published_reference();
  std::ostringstream o;
  o << "# Model x enhancement grid\n\n";
  o << "Desk-scale run on synthetic data: seed " << cfg.seed << ", input " << cfg.input_side << "x" << cfg.input_side << ", "
    << cfg.train.epochs << " epochs, batch " << cfg.train.batch_size << ". Test-split metrics in percent; positive class = malignant.\n\n";
  struct Block {
    const char* title;
    std::function<std::optional<double>(const CellResult&)> get;
    const std::array<std::array<double, 4>, 7>* ref;
  };
  const std::vector<Block> blocks{{"Accuracy", [](const CellResult& c) { return c.metrics.accuracy; }, &ref.accuracy},
                                  {"Precision", [](const CellResult& c) { return c.metrics.precision; }, &ref.precision},
                                  {"Recall", [](const CellResult& c) { return c.metrics.recall; }, &ref.recall},
                                  {"F1-score", [](const CellResult& c) { return c.metrics.f1; }, &ref.f1}};
  o << "## Desk-scale results\n\n| Model |";
  for (const auto& b : blocks)
    for (auto e : g.enhancements) o << ' ' << b.title << ' ' << enhancement_name(e) << " |";
  o << "\n|---|";
  for (std::size_t i = 0; i < blocks.size() * g.enhancements.size(); ++i) o << "---:|";
  o << '\n';
  for (auto m : g.models) {
    o << "| " << model_display_name(m) << " |";
    for (const auto& b : blocks)
      for (auto e : g.enhancements) {
        const auto& c = g.cell(m, e);
        o << ' ' << (c.ok ? detail::pct(b.get(c)) : "FAIL") << " |";
      }
    o << '\n';
  }
  o << "\n## Published full-scale values (reference only)\n\n| Model |";
  for (const auto& b : blocks)
    for (auto e : g.enhancements) o << ' ' << b.title << ' ' << enhancement_name(e) << " |";
  o << "\n|---|";
  for (std::size_t i = 0; i < blocks.size() * g.enhancements.size(); ++i) o << "---:|";
  o << '\n';
  for (auto m : g.models) {
    o << "| " << model_display_name(m) << " |";
    for (const auto& b : blocks)
      for (auto e : g.enhancements) o << ' ' << detail::pct_plain((*b.ref)[detail::model_row(m)][detail::enh_col(e)]) << " |";
    o << '\n';
  }
  o << "\n## Average accuracy per enhancement\n\n| Enhancement | Desk-scale | Published |\n|---|---:|---:|\n";
  for (auto e : g.enhancements) {
    double pub = 0.0;
    for (auto m : g.models) pub += ref.accuracy[detail::model_row(m)][detail::enh_col(e)];
    pub /= static_cast<double>(g.models.size());
    o << "| " << enhancement_name(e) << " | " << detail::pct(enhancement_average(g, e)) << " | " << detail::pct_plain(pub) << " |\n";
  }
  o << "\n## Accuracy change vs original, per model\n\n| Model |";
  for (auto e : g.enhancements)
    if (e != EnhancementKind::Original) o << ' ' << enhancement_name(e) << " desk | " << enhancement_name(e) << " published |";
  o << "\n|---|";
  for (auto e : g.enhancements)
    if (e != EnhancementKind::Original) o << "---:|---:|";
  o << '\n';
  const bool has_orig = std::find(g.enhancements.begin(), g.enhancements.end(), EnhancementKind::Original) != g.enhancements.end();
  for (auto m : g.models) {
    o << "| " << model_display_name(m) << " |";
    for (auto e : g.enhancements) {
      if (e == EnhancementKind::Original) continue;
      std::string desk = "n/a";
      if (has_orig) {
        const auto& c = g.cell(m, e);
        const auto& b = g.cell(m, EnhancementKind::Original);
        if (c.ok && b.ok && c.metrics.accuracy && b.metrics.accuracy) desk = detail::signed_pct(100.0 * (*c.metrics.accuracy - *b.metrics.accuracy));
      }
      const double pub = ref.accuracy[detail::model_row(m)][detail::enh_col(e)] - ref.accuracy[detail::model_row(m)][0];
      o << ' ' << desk << " | " << detail::signed_pct(pub) << " |";
    }
    o << '\n';
  }
  bool any_fail = false;
  for (const auto& c : g.cells) any_fail |= !c.ok;
  if (any_fail) {
    o << "\n## Failed cells\n\n";
    for (const auto& c : g.cells)
      if (!c.ok) o << "- " << model_display_name(c.model) << " / " << enhancement_name(c.enhancement) << ": " << c.error << '\n';
  }
  o << "\nNotes: metrics use the standard binary definitions with malignant as the positive class; the published table reports "
       "near-identical accuracy, precision and recall in most cells, which suggests class-averaged metrics there. Published values "
       "come from full-resolution training on real mammograms and are not expected to match.\n";
  return o.str();
}

inline std::string render_grid_csv(const GridResult& g) {
  std::ostringstream o;
  o << "model,enhancement,accuracy,precision,recall,f1,auc\n";
  auto f = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  for (const auto& c : g.cells) {
    o << model_name(c.model) << ',' << enhancement_name(c.enhancement) << ',';
    if (c.ok) o << f(c.metrics.accuracy) << ',' << f(c.metrics.precision) << ',' << f(c.metrics.recall) << ',' << f(c.metrics.f1) << ',' << f(c.auc);
    else o << ",,,,";
    o << '\n';
  }
  return o.str();
}

/// Parses the CSV written by render_grid_csv back into cells (metrics only).
inline GridResult parse_grid_csv(const std::string& text) {
  GridResult g;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != "model,enhancement,accuracy,precision,recall,f1,auc") throw IoError("grid csv: unexpected header");
  auto opt = [](const std::string& s) -> std::optional<double> {
    if (s.empty()) return std::nullopt;
    return std::stod(s);
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) f.push_back(tok);
    while (f.size() < 7) f.emplace_back();
    CellResult c;
    c.model = parse_model_kind(f[0]);
    c.enhancement = parse_enhancement(f[1]);
    c.metrics = {opt(f[2]), opt(f[3]), opt(f[4]), opt(f[5])};
    c.auc = opt(f[6]);
    c.ok = c.metrics.accuracy.has_value();
    if (std::find(g.models.begin(), g.models.end(), c.model) == g.models.end()) g.models.push_back(c.model);
    if (std::find(g.enhancements.begin(), g.enhancements.end(), c.enhancement) == g.enhancements.end()) g.enhancements.push_back(c.enhancement);
    g.cells.push_back(c);
  }
  return g;
}

}  // namespace mammo
