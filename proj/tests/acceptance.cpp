// Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
// stderr. Trains the full model x enhancement grid, so expect tens of minutes.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>

#include "gradcheck.hpp"
#include "mammo/config.hpp"
#include "mammo/ensemble.hpp"
#include "mammo/grid.hpp"
#include "mammo/xai.hpp"
#include "occlusion_oracle.hpp"
#include "oracles.hpp"

using namespace mammo;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(int id, bool ok, const std::string& detail) {
  std::cout << (ok ? "PASS" : "FAIL") << " criterion " << id << ": " << detail << std::endl;
  if (!ok) ++failures;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Trained {
  Model basecnn, resnet;
  bool have_basecnn = false, have_resnet = false;
};

// ---------------------------------------------------------------------------

void criterion1() {
  const auto t0 = Clock::now();
  std::size_t cases = 0;
  double worst_prim = 0.0;
  std::string worst_prim_name;
  for (OpKind k : gradcheck::all_primitives())
    for (std::uint64_t s = 0; s < 100; ++s) {
      const double e = gradcheck::check_case(gradcheck::make_case(k, s), s);
      ++cases;
      if (e > worst_prim) {
        worst_prim = e;
        worst_prim_name = std::string(op_name(k));
      }
    }
  double worst_model = 0.0;
  std::string worst_model_name;
  for (auto kind : kAllModels) {
    const double e = gradcheck::check_model(kind, 1, 64);
    std::cerr << "  gradcheck " << model_name(kind) << " " << e << "\n";
    if (e > worst_model) {
      worst_model = e;
      worst_model_name = std::string(model_name(kind));
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = cases >= 100 * gradcheck::all_primitives().size() && worst_prim < 1e-3 && worst_model < 1e-3 && secs < 120.0;
  report(1, ok,
         std::to_string(cases) + " primitive cases (100 seeds each), worst rel " + fmt("%.2e", worst_prim) + " (" + worst_prim_name + "); 7 models, worst rel " +
             fmt("%.2e", worst_model) + " (" + worst_model_name + "); " + fmt("%.1f", secs) + " s");
}

double class_score(const Classifier& c, const Tensor& x, int cls) {
  NoGradGuard g;
  return c.forward(x, nullptr).at(static_cast<std::size_t>(cls));
}

void criterion2(const Trained& t, const PreparedData& data) {
  if (!t.have_basecnn) {
    report(2, false, "no trained BaseCNN available");
    return;
  }
  const auto c = classifier_of(t.basecnn);
  XaiConfig cfg;
  cfg.norm = normalization_of(t.basecnn);
  cfg.ig_steps = 256;
  const auto base = Tensor::full({1, 1, c.side, c.side}, static_cast<float>((0.0 - cfg.norm.mean) / cfg.norm.std));
  std::size_t used = 0, ig_ok = 0, dl_ok = 0;
  double worst_ig = 0.0, worst_dl = 0.0;
  for (std::size_t i = 0; i < data.test.size() && used < 20; ++i) {
    const auto x = data.test.item(i);
    const int cls = detail::resolve_target(c, x, -1);
    const double delta = class_score(c, x, cls) - class_score(c, base, cls);
    if (std::abs(delta) <= 1e-3) continue;
    ++used;
    cfg.target_class = cls;
    const double ig = std::abs(integrated_gradients(c, x, cfg).sum() - delta) / std::abs(delta);
    const double dl = std::abs(deeplift(c, x, cfg).sum() - delta) / std::abs(delta);
    worst_ig = std::max(worst_ig, ig);
    worst_dl = std::max(worst_dl, dl);
    ig_ok += ig <= 0.01;
    dl_ok += dl <= 1e-4;
  }

  // linear model: IG = (x − x′)·w exactly
  Rng rng(3);
  std::vector<double> w(64 * 64), xv(64 * 64);
  for (auto& v : w) v = static_cast<double>(static_cast<float>(rng.uniform(-1, 1)));
  for (auto& v : xv) v = static_cast<double>(static_cast<float>(rng.uniform(0, 1)));
  const auto lin = linear_classifier<float>(w, 0.25, 64);
  XaiConfig lcfg;
  lcfg.target_class = 1;
  lcfg.ig_steps = 32;
  const auto lx = Tensor::from({1, 1, 64, 64}, std::vector<float>(xv.begin(), xv.end()));
  const auto lmap = integrated_gradients(lin, lx, lcfg);
  double lin_err = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) lin_err = std::max(lin_err, std::abs(lmap.values[i] - xv[i] * w[i]));

  cfg.target_class = 1;
  const auto zmap = integrated_gradients(c, base, cfg);
  bool zero = true;
  for (double v : zmap.values) zero &= v == 0.0;

  const bool ok = used == 20 && ig_ok == used && dl_ok == used && lin_err <= 1e-5 && zero;
  report(2, ok,
         "IG completeness " + std::to_string(ig_ok) + "/" + std::to_string(used) + " within 1% (worst " + fmt("%.3g", 100 * worst_ig) +
             "%); DeepLIFT " + std::to_string(dl_ok) + "/" + std::to_string(used) + " within 1e-4 (worst " + fmt("%.2e", worst_dl) +
             "); linear IG err " + fmt("%.1e", lin_err) + "; baseline map " + (zero ? "zero" : "nonzero"));
}

void criterion3(const Trained& t, const PreparedData& data, const RunConfig& rc) {
  std::vector<std::pair<std::string, Model>> models;
  if (t.have_basecnn) models.emplace_back("basecnn", t.basecnn);
  if (t.have_resnet) models.emplace_back("resnet", t.resnet);
  for (auto k : {ModelKind::ViTLite, ModelKind::SwinLite, ModelKind::DenseTransformer, ModelKind::ConvMixerLite, ModelKind::ConvNeXtLite})
    models.emplace_back(std::string(model_name(k)), build<float>(k, rc.model_config(k, 5)));
  std::size_t pairs = 0, equal = 0;
  for (std::size_t i = 0; pairs < 10; ++i) {
    const auto& [name, m] = models[i % models.size()];
    const auto c = classifier_of(m);
    const auto x = data.test.item((i * 7) % data.test.size());
    XaiConfig cfg;
    cfg.norm = normalization_of(m);
    cfg.target_class = static_cast<int>(i % 2);
    const auto got = occlusion(c, x, cfg);
    const double fill = static_cast<double>(static_cast<float>((cfg.occlusion_fill - cfg.norm.mean) / cfg.norm.std));
    const auto ref = oracle::occlusion_brute_force(c, x, cfg.patch(c.side), cfg.stride(c.side), fill, cfg.target_class);
    ++pairs;
    equal += got == ref;
  }
  report(3, equal == pairs, std::to_string(equal) + "/" + std::to_string(pairs) + " (model, image) pairs bit-equal to brute force");
}

void criterion4() {
  std::size_t neg_ok = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const auto img = oracle::random_image(s, 24, 24);
    neg_ok += negative(negative(img)) == img;
  }
  double hog_err = 0.0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto img = oracle::random_image(5000 + s, 32, 32);
    const auto d = hog_descriptor(img);
    const auto ref = oracle::hog(img);
    if (ref.size() != d.values.size()) {
      hog_err = std::numeric_limits<double>::infinity();
      break;
    }
    for (std::size_t i = 0; i < ref.size(); ++i) hog_err = std::max(hog_err, std::abs(d.values[i] - ref[i]));
  }
  AheParams global;
  global.tile_rows = global.tile_cols = 1;
  global.clip_limit = std::numeric_limits<double>::infinity();
  std::size_t he_ok = 0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto img = oracle::random_image(9000 + s, 48, 40, static_cast<int>(s), 255 - static_cast<int>(s));
    he_ok += ahe(img, global) == oracle::global_he(img);
  }
  std::size_t fixed_ok = 0;
  for (int v = 0; v < 256; v += 15) {
    const ImageGray img(64, 64, static_cast<std::uint8_t>(v));
    fixed_ok += ahe(img) == img && ahe(img, global) == img;
  }
  const bool ok = neg_ok == 1000 && hog_err <= 1e-6 && he_ok == 50 && fixed_ok == 18;
  report(4, ok,
         "negative involution " + std::to_string(neg_ok) + "/1000; HOG max diff " + fmt("%.1e", hog_err) + " over 50 images; 1x1 AHE = HE " +
             std::to_string(he_ok) + "/50; constant fixed points " + std::to_string(fixed_ok) + "/18");
}

void criterion5() {
  TrainConfig tc;
  const bool lr_ok = lr_schedule(0, tc) == 1e-3 && lr_schedule(6, tc) == 1e-3 && std::abs(lr_schedule(7, tc) - 1e-4) < 1e-18 &&
                     std::abs(lr_schedule(14, tc) - 1e-5) < 1e-18;
  const auto z = Tensor::zeros({4, 2});
  const std::vector<int> y{0, 1, 0, 1};
  const double ce = cross_entropy(z, std::span<const int>(y)).item();
  const bool ce_ok = std::abs(ce - std::log(2.0)) <= 1e-6;

  DatasetConfig dc;
  dc.benign_count = dc.malignant_count = 30;
  dc.synth.size = 48;
  const auto ds = build_dataset(dc);
  auto mc = default_config(ModelKind::BaseCNN);
  mc.input_side = 32;
  mc.seed = 11;
  const auto data = prepare_data(ds, EnhancementKind::Original, 32);
  tc.epochs = 3;
  const auto a = train(build<float>(ModelKind::BaseCNN, mc), data, tc);
  const auto b = train(build<float>(ModelKind::BaseCNN, mc), data, tc);
  std::ostringstream ha, hb;
  for (const auto& e : a.history.epochs) ha << format_double(e.train_loss) << format_double(e.val_loss) << format_double(e.val_acc);
  for (const auto& e : b.history.epochs) hb << format_double(e.train_loss) << format_double(e.val_loss) << format_double(e.val_acc);
  const bool hist_ok = a.history == b.history && ha.str() == hb.str() && serialize_checkpoint(a.model) == serialize_checkpoint(b.model);
  report(5, lr_ok && ce_ok && hist_ok,
         std::string("lr schedule ") + (lr_ok ? "ok" : "wrong") + "; CE(0) = " + fmt("%.9f", ce) + "; repeated training " +
             (hist_ok ? "bit-identical" : "differs"));
}

void criterion6(const GridResult& g) {
  const auto& b = g.cell(ModelKind::BaseCNN, EnhancementKind::Original);
  const auto& r = g.cell(ModelKind::ResNetLite, EnhancementKind::Original);
  const double ab = b.ok && b.metrics.accuracy ? *b.metrics.accuracy : 0.0;
  const double ar = r.ok && r.metrics.accuracy ? *r.metrics.accuracy : 0.0;
  // both cells back to back on one thread; the budget allows 4 cores
  const double secs = b.seconds + r.seconds;
  report(6, ab >= 0.95 && ar >= 0.95 && secs < 600.0,
         "test accuracy BaseCNN " + fmt("%.4f", ab) + ", ResNet " + fmt("%.4f", ar) + " (10 epochs); " + fmt("%.0f", secs) + " s single-threaded");
}

void criterion7(const GridResult& g, const RunConfig& rc) {
  auto acc = [&](ModelKind m, EnhancementKind e) {
    const auto& c = g.cell(m, e);
    return c.ok && c.metrics.accuracy ? *c.metrics.accuracy : -1.0;
  };
  const double vo = acc(ModelKind::ViTLite, EnhancementKind::Original), vh = acc(ModelKind::ViTLite, EnhancementKind::HOG);
  const double so = acc(ModelKind::SwinLite, EnhancementKind::Original), sh = acc(ModelKind::SwinLite, EnhancementKind::HOG);
  const auto md = render_grid_markdown(g, rc);
  std::ofstream("acceptance_grid.md") << md;
  std::ofstream("acceptance_grid.csv") << render_grid_csv(g);

  // every model row of the desk table holds 16 numeric cells; 4 averages present
  std::size_t rows_ok = 0;
  const auto desk = md.substr(0, md.find("## Published"));
  for (auto m : kAllModels) {
    const auto pos = desk.find("| " + std::string(model_display_name(m)) + " |");
    if (pos == std::string::npos) continue;
    const auto line = desk.substr(pos, desk.find('\n', pos) - pos);
    std::size_t nums = 0;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, '|')) {
      try {
        std::size_t used = 0;
        std::stod(tok, &used);
        ++nums;
      } catch (...) {
      }
    }
    rows_ok += nums == 16;
  }
  std::size_t avgs = 0;
  for (auto e : kAllEnhancements) avgs += enhancement_average(g, e).has_value();
  std::size_t ok_cells = 0;
  for (const auto& c : g.cells) ok_cells += c.ok;
  const bool ok = vh >= vo && sh >= so && rows_ok == 7 && avgs == 4 && ok_cells == 28;
  report(7, ok,
         "ViT hog " + fmt("%.4f", vh) + " vs orig " + fmt("%.4f", vo) + "; Swin hog " + fmt("%.4f", sh) + " vs orig " + fmt("%.4f", so) + "; " +
             std::to_string(ok_cells) + "/28 cells, " + std::to_string(rows_ok) + "/7 rows rendered, " + std::to_string(avgs) + "/4 averages");
}

void criterion8() {
  const std::vector<int> p{1, 1, 0, 0}, y{1, 0, 1, 0};
  const auto cm = confusion(p, y);
  const auto m = metrics(cm);
  bool fixtures = cm == ConfusionMatrix{1, 1, 1, 1} && *m.accuracy == 0.5 && *m.precision == 0.5 && *m.recall == 0.5 && *m.f1 == 0.5;
  fixtures &= !metrics(ConfusionMatrix{0, 0, 3, 2}).precision.has_value();
  const std::vector<double> tied(4, 0.3), sep{0.9, 0.1, 0.8, 0.2};
  fixtures &= roc_auc(tied, y).auc == 0.5 && roc_auc(sep, y).auc == 1.0;
  const auto pr = pr_curve(tied, y);
  fixtures &= pr.size() == 1 && pr[0].precision == 0.5;

  Rng rng(99);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const auto n = static_cast<std::size_t>(rng.integer(5, 200));
    std::vector<double> s(n);
    std::vector<int> lab(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = t % 2 ? rng.uniform() : static_cast<double>(rng.integer(0, 8));
      lab[i] = static_cast<int>(rng.integer(0, 1));
    }
    lab[0] = 0;
    lab[1] = 1;
    worst = std::max(worst, std::abs(roc_auc(s, lab).auc - rank_statistic_auc(s, lab)));
  }
  report(8, fixtures && worst <= 1e-9, std::string("fixtures ") + (fixtures ? "ok" : "wrong") + "; AUC vs rank statistic max diff " + fmt("%.1e", worst) + " over 100 sets");
}

EnsembleMember fixed(std::string name, double p) {
  EnsembleMember m;
  m.name = std::move(name);
  m.predict = [p](const ImageGray&) { return p; };
  return m;
}

void criterion9() {
  const ImageGray img(2, 2);
  EnsembleConfig cfg;
  cfg.members = {fixed("a", 0.95), fixed("b", 0.1), fixed("c", 0.1)};
  const auto d1 = predict(cfg, img);
  bool ok = d1.tier == Tier::Primary && *cfg.members[1].calls == 0 && d1.fused_prob == 0.95;
  const auto agree = fuse({0.9, 0.9, 0.9}, {1, 1, 1}, 0.3);
  ok &= std::abs(agree.fused_prob - 0.9) < 1e-12 && !agree.flagged;
  cfg.members = {fixed("a", 0.8), fixed("b", 0.3), fixed("c", 0.6)};
  const auto d2 = predict(cfg, img);
  ok &= d2.tier == Tier::FullEnsemble && std::abs(d2.fused_prob - 0.5667) < 5e-5 && d2.flagged;
  const auto w = calibrate_weights({0.99, 0.98, 0.96});
  ok &= std::abs(w[0] + w[1] + w[2] - 1.0) < 1e-15 && calibrate_weights({0.0, 1.0})[0] == 0.0;
  Rng rng(1);
  double worst = 0.0;
  bool mono = true;
  for (int t = 0; t < 500; ++t) {
    const std::vector<double> p{rng.uniform(), rng.uniform(), rng.uniform()}, wt{rng.uniform(0.01, 1), rng.uniform(0.01, 1), rng.uniform(0.01, 1)};
    const double c = rng.uniform(1e-3, 1e3);
    worst = std::max(worst, std::abs(fuse(p, wt, 0.3).fused_prob - fuse(p, {c * wt[0], c * wt[1], c * wt[2]}, 0.3).fused_prob));
    const double hi = rng.uniform(0.01, 1), lo = rng.uniform(0.005, hi);
    if (fuse(p, wt, hi).flagged && !fuse(p, wt, lo).flagged) mono = false;
  }
  ok &= worst <= 1e-12 && mono;
  bool single = true;
  for (int t = 0; t < 100; ++t) {
    const double p = rng.uniform();
    EnsembleConfig one;
    one.members = {fixed("only", p)};
    single &= fuse({p}, {rng.uniform(0.01, 5.0)}, 0.3).fused_prob == p && !fuse({p}, {1.0}, 0.0).flagged && predict(one, img).fused_prob == p;
  }
  ok &= single;
  report(9, ok, "worked example fused " + fmt("%.4f", d2.fused_prob) + (d2.flagged ? " flagged" : " not flagged") + "; rescale max diff " +
                    fmt("%.1e", worst) + "; flag monotone " + (mono ? "yes" : "no") +
                    "; single member " + (single ? "exact" : "differs"));
}

void criterion10() {
  std::size_t rt = 0;
  for (auto k : kAllModels) {
    auto c = default_config(k);
    c.seed = 3;
    c.meta["enhancement"] = "hog";
    const auto m = build<float>(k, c);
    const auto bytes = serialize_checkpoint(m);
    const auto back = deserialize_checkpoint(bytes, k);
    bool same = back.config == m.config && back.params.size() == m.params.size() && serialize_checkpoint(back) == bytes;
    NoGradGuard g;
    const auto x = Tensor::full({1, 1, 64, 64}, 0.3f);
    const auto a = forward(m, x), b = forward(back, x);
    same &= a.at(0) == b.at(0) && a.at(1) == b.at(1);
    rt += same;
  }
  const auto bytes = serialize_checkpoint(build<float>(ModelKind::BaseCNN, default_config(ModelKind::BaseCNN)));
  auto code_of = [](const std::string& b) {
    try {
      deserialize_checkpoint(b);
    } catch (const CheckpointError& e) {
      return static_cast<int>(e.code());
    }
    return -1;
  };
  auto corrupt = bytes;
  corrupt[1] = '?';
  const bool bad_header = code_of(corrupt) == static_cast<int>(CheckpointError::Code::BadMagic);
  const bool truncated = code_of(bytes.substr(0, bytes.size() - 3)) == static_cast<int>(CheckpointError::Code::Truncated) &&
                         code_of(bytes.substr(0, 6)) == static_cast<int>(CheckpointError::Code::Truncated);
  report(10, rt == 7 && bad_header && truncated,
         std::to_string(rt) + "/7 kinds round-trip; corrupt header " + (bad_header ? "rejected" : "accepted") + "; truncation " +
             (truncated ? "rejected" : "accepted"));
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  RunConfig rc;
  std::cerr << "building default dataset\n";
  const auto ds = build_dataset(rc.dataset);

  Trained trained;
  GridOptions opt;
  opt.on_cell = [&](const CellResult& c) {
    std::cerr << "  cell " << model_name(c.model) << "/" << enhancement_name(c.enhancement) << " "
              << (c.ok ? format_metric(c.metrics.accuracy) : "FAILED: " + c.error) << " (" << fmt("%.0f", seconds_since(t0)) << " s)\n";
  };
  opt.on_model = [&](const CellResult& c, const Model& m) {
    if (c.enhancement != EnhancementKind::Original) return;
    if (c.model == ModelKind::BaseCNN) {
      trained.basecnn = m.clone();
      trained.have_basecnn = true;
    }
    if (c.model == ModelKind::ResNetLite) {
      trained.resnet = m.clone();
      trained.have_resnet = true;
    }
  };
  std::cerr << "training the 28-cell grid\n";
  const auto grid = run_grid(ds, rc, opt);
  const auto data = prepare_data(ds, EnhancementKind::Original, rc.input_side, rc.enhance);

  criterion1();
  criterion2(trained, data);
  criterion3(trained, data, rc);
  criterion4();
  criterion5();
  criterion6(grid);
  criterion7(grid, rc);
  criterion8();
  criterion9();
  criterion10();
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << " (" << fmt("%.0f", seconds_since(t0))
            << " s)" << std::endl;
  return failures == 0 ? 0 : 1;
}
