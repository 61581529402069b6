// Synthetic mammogram generation, augmentation, class balancing, dataset
// splitting, directory ingestion and conversion to model-input tensors.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "mammo/image.hpp"
#include "mammo/random.hpp"
#include "mammo/tensor.hpp"

namespace mammo {

enum class Label : std::uint8_t { Benign = 0, Malignant = 1 };
enum class Source : std::uint8_t { Synthetic, Ingested };

inline const char* label_name(Label l) { return l == Label::Benign ? "benign" : "malignant"; }
inline const char* source_name(Source s) { return s == Source::Synthetic ? "synthetic" : "ingested"; }

struct LabeledImage {
  ImageGray image;
  Label label = Label::Benign;
  Source source = Source::Synthetic;
  std::string id;
  /// Id of the image this one was derived from (itself for originals).
  std::string group;
};

struct SynthParams {
  std::size_t size = 128;
  double background_level = 70.0;
  double background_noise = 30.0;
  struct Benign {
    double radius_min = 0.09;  // fraction of size
    double radius_max = 0.16;
    double edge_softness = 2.5;  // pixels
  } benign;
  struct Malignant {
    double core_radius_min = 0.08;  // fraction of size
    double core_radius_max = 0.13;
    int spike_count_min = 6;
    int spike_count_max = 14;
    double spike_length_min = 0.4;  // fraction of core radius
    double spike_length_max = 0.9;
    double margin_irregularity = 0.25;
  } malignant;
  double lesion_intensity_min = 90.0;
  double lesion_intensity_max = 140.0;

  void validate() const {
    auto range = [](double lo, double hi, const char* what) {
      if (!(lo <= hi)) throw std::invalid_argument(std::string("synth: empty range for ") + what);
    };
    if (size < 32) throw std::invalid_argument("synth: size must be >= 32");
    range(benign.radius_min, benign.radius_max, "benign radius");
    range(malignant.core_radius_min, malignant.core_radius_max, "malignant core radius");
    range(malignant.spike_length_min, malignant.spike_length_max, "spike length");
    range(lesion_intensity_min, lesion_intensity_max, "lesion intensity");
    if (malignant.spike_count_min < 0 || malignant.spike_count_min > malignant.spike_count_max) {
      throw std::invalid_argument("synth: invalid spike count range");
    }
    if (benign.edge_softness <= 0) throw std::invalid_argument("synth: edge softness must be positive");
  }
};

/// Lesion geometry of a generated image, for probes and tests.
struct SynthGeometry {
  double cx = 0, cy = 0;
  double radius = 0;  // benign mean radius or malignant core radius
  std::vector<std::pair<double, double>> spike_tips;
  std::vector<std::pair<double, double>> spike_bases;
};

namespace detail {

// Smooth value noise on a lattice of `cells`×`cells`, in [0, 1].
class ValueNoise {
 public:
  ValueNoise(std::size_t cells, Rng& rng) : cells_(cells), lattice_((cells + 1) * (cells + 1)) {
    for (auto& v : lattice_) v = rng.uniform();
  }
  double at(double u, double v) const {  // u, v in [0, 1]
    const double x = u * static_cast<double>(cells_), y = v * static_cast<double>(cells_);
    const auto x0 = std::min(static_cast<std::size_t>(x), cells_ - 1), y0 = std::min(static_cast<std::size_t>(y), cells_ - 1);
    const double fx = smooth(x - static_cast<double>(x0)), fy = smooth(y - static_cast<double>(y0));
    auto L = [&](std::size_t i, std::size_t j) { return lattice_[j * (cells_ + 1) + i]; };
    const double top = L(x0, y0) * (1 - fx) + L(x0 + 1, y0) * fx;
    const double bot = L(x0, y0 + 1) * (1 - fx) + L(x0 + 1, y0 + 1) * fx;
    return top * (1 - fy) + bot * fy;
  }

 private:
  static double smooth(double t) { return t * t * (3 - 2 * t); }
  std::size_t cells_;
  std::vector<double> lattice_;
};

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by, double& t) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  t = len2 > 0 ? std::clamp(((px - ax) * dx + (py - ay) * dy) / len2, 0.0, 1.0) : 0.0;
  const double qx = ax + t * dx - px, qy = ay + t * dy - py;
  return std::sqrt(qx * qx + qy * qy);
}

}  // namespace detail

/// Procedural mammogram: textured background plus one lesion. Benign lesions
/// are smooth-edged ellipses; malignant ones are an irregular core with
/// anti-aliased radial spikes. Deterministic in (label, seed, params).
inline ImageGray synth_generate(Label label, std::uint64_t seed, const SynthParams& p = {}, SynthGeometry* geom = nullptr) {
  p.validate();
  Rng rng(hash_combine(seed, static_cast<std::uint64_t>(label) + 0x51ed));
  const std::size_t n = p.size;
  const double S = static_cast<double>(n);

  std::vector<detail::ValueNoise> octaves;
  for (std::size_t cells : {4u, 8u, 16u, 32u}) octaves.emplace_back(cells, rng);
  std::vector<double> field(n * n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / S, v = (static_cast<double>(y) + 0.5) / S;
      double amp = 1.0, acc = 0.0, norm = 0.0;
      for (const auto& o : octaves) {
        acc += amp * o.at(u, v);
        norm += amp;
        amp *= 0.5;
      }
      field[y * n + x] = p.background_level + p.background_noise * (2.0 * acc / norm - 1.0);
    }

  SynthGeometry g;
  g.cx = S * rng.uniform(0.35, 0.65);
  g.cy = S * rng.uniform(0.35, 0.65);
  const double intensity = rng.uniform(p.lesion_intensity_min, p.lesion_intensity_max);
  detail::ValueNoise texture(6, rng);

  if (label == Label::Benign) {
    const double r = S * rng.uniform(p.benign.radius_min, p.benign.radius_max);
    const double aspect = rng.uniform(0.8, 1.2);
    const double rot = rng.uniform(0.0, std::numbers::pi);
    const double a = r * std::sqrt(aspect), b = r / std::sqrt(aspect);
    const double cr = std::cos(rot), sr = std::sin(rot);
    g.radius = r;
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - g.cx, dy = static_cast<double>(y) + 0.5 - g.cy;
        const double u = dx * cr + dy * sr, v = -dx * sr + dy * cr;
        const double d = std::sqrt((u / a) * (u / a) + (v / b) * (v / b));
        const double w = detail::sigmoid((1.0 - d) * r / p.benign.edge_softness);
        const double tex = 0.85 + 0.3 * texture.at((static_cast<double>(x) + 0.5) / S, (static_cast<double>(y) + 0.5) / S);
        field[y * n + x] += w * intensity * tex;
      }
  } else {
    const auto& m = p.malignant;
    const double r0 = S * rng.uniform(m.core_radius_min, m.core_radius_max);
    g.radius = r0;
    // Irregular margin: radius modulated by a few random harmonics.
    struct Harmonic {
      double k, amp, phase;
    };
    std::vector<Harmonic> harm;
    for (int k = 3; k <= 7; ++k) harm.push_back({static_cast<double>(k), rng.uniform(0.3, 1.0), rng.uniform(0.0, 2 * std::numbers::pi)});
    double hnorm = 0.0;
    for (const auto& h : harm) hnorm += h.amp;
    auto margin = [&](double theta) {
      double s = 0.0;
      for (const auto& h : harm) s += h.amp * std::sin(h.k * theta + h.phase);
      return r0 * (1.0 + m.margin_irregularity * s / hnorm);
    };
    const auto spikes = static_cast<int>(rng.integer(m.spike_count_min, m.spike_count_max));
    struct Spike {
      double ax, ay, bx, by, width;
    };
    std::vector<Spike> segs;
    const double base_angle = rng.uniform(0.0, 2 * std::numbers::pi);
    for (int s = 0; s < spikes; ++s) {
      const double phi = base_angle + 2 * std::numbers::pi * (s + rng.uniform(-0.3, 0.3)) / spikes;
      const double rb = margin(phi) * 0.8;
      const double len = r0 * rng.uniform(m.spike_length_min, m.spike_length_max) + margin(phi) * 0.2;
      Spike sp{g.cx + rb * std::cos(phi), g.cy + rb * std::sin(phi), g.cx + (rb + len) * std::cos(phi),
               g.cy + (rb + len) * std::sin(phi), rng.uniform(0.9, 1.4) * S / 128.0};
      segs.push_back(sp);
      g.spike_bases.emplace_back(sp.ax, sp.ay);
      g.spike_tips.emplace_back(sp.bx, sp.by);
    }
    const double soft = 0.7 * S / 128.0;
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        const double dx = px - g.cx, dy = py - g.cy;
        const double d = std::sqrt(dx * dx + dy * dy);
        double w = detail::sigmoid((margin(std::atan2(dy, dx)) - d) / soft);
        for (const auto& sp : segs) {
          double t = 0.0;
          const double dist = detail::segment_distance(px, py, sp.ax, sp.ay, sp.bx, sp.by, t);
          const double half = sp.width * (1.0 - 0.6 * t);
          w = std::max(w, std::clamp(half + 0.5 - dist, 0.0, 1.0) * (1.0 - 0.25 * t));
        }
        const double tex = 0.85 + 0.3 * texture.at(px / S, py / S);
        field[y * n + x] += w * intensity * tex;
      }
  }
  if (geom) *geom = g;
  ImageGray img(n, n);
  for (std::size_t i = 0; i < field.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(std::clamp<long>(std::lround(field[i]), 0, 255));
  return img;
}

// ---------------------------------------------------------------------------
// Augmentation

struct FlipH {};
struct FlipV {};
struct Rotate {
  int quarter_turns = 1;  // 1..3, clockwise
};
struct Brightness {
  int delta = 0;
};
struct Contrast {
  double factor = 1.0;  // about mid-grey 128
};
using AugmentationOp = std::variant<FlipH, FlipV, Rotate, Brightness, Contrast>;

inline std::string augmentation_tag(const AugmentationOp& op) {
  return std::visit(
      [](const auto& o) -> std::string {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, FlipH>) return "fh";
        if constexpr (std::is_same_v<T, FlipV>) return "fv";
        if constexpr (std::is_same_v<T, Rotate>) return "r" + std::to_string(90 * o.quarter_turns);
        if constexpr (std::is_same_v<T, Brightness>) return "b" + std::to_string(o.delta);
        if constexpr (std::is_same_v<T, Contrast>) {
          std::ostringstream os;
          os << "c" << o.factor;
          return os.str();
        }
      },
      op);
}

inline ImageGray apply_augmentation(const ImageGray& img, const AugmentationOp& op) {
  const std::size_t w = img.width, h = img.height;
  return std::visit(
      [&](const auto& o) -> ImageGray {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, FlipH>) {
          ImageGray out(w, h);
          for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) out.at(x, y) = img.at(w - 1 - x, y);
          return out;
        } else if constexpr (std::is_same_v<T, FlipV>) {
          ImageGray out(w, h);
          for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) out.at(x, y) = img.at(x, h - 1 - y);
          return out;
        } else if constexpr (std::is_same_v<T, Rotate>) {
          if (o.quarter_turns < 1 || o.quarter_turns > 3) throw std::invalid_argument("rotate: quarter turns must be 1, 2 or 3");
          ImageGray cur = img;
          for (int k = 0; k < o.quarter_turns; ++k) {
            ImageGray next(cur.height, cur.width);
            // clockwise: dst(x, y) = src(y, H-1-x)
            for (std::size_t y = 0; y < next.height; ++y)
              for (std::size_t x = 0; x < next.width; ++x) next.at(x, y) = cur.at(y, cur.height - 1 - x);
            cur = std::move(next);
          }
          return cur;
        } else if constexpr (std::is_same_v<T, Brightness>) {
          ImageGray out = img;
          for (auto& p : out.pixels) p = static_cast<std::uint8_t>(std::clamp(static_cast<int>(p) + o.delta, 0, 255));
          return out;
        } else {
          ImageGray out = img;
          for (auto& p : out.pixels)
            p = static_cast<std::uint8_t>(std::clamp<long>(std::lround((static_cast<double>(p) - 128.0) * o.factor + 128.0), 0, 255));
          return out;
        }
      },
      op);
}

/// T(x) = { f_i(x) }: one output per op, labels preserved, ids suffixed.
inline std::vector<LabeledImage> augment(const LabeledImage& img, const std::vector<AugmentationOp>& ops) {
  if (ops.empty()) throw std::invalid_argument("augment: empty op list");
  std::vector<LabeledImage> out;
  out.reserve(ops.size());
  for (const auto& op : ops) {
    LabeledImage v = img;
    v.image = apply_augmentation(img.image, op);
    v.id = img.id + "+" + augmentation_tag(op);
    v.group = img.group.empty() ? img.id : img.group;
    out.push_back(std::move(v));
  }
  return out;
}

inline std::vector<AugmentationOp> default_balancing_ops() {
  return {FlipH{}, FlipV{}, Rotate{1}, Rotate{2}, Rotate{3}, Brightness{15}, Brightness{-15}, Contrast{1.2}};
}

// ---------------------------------------------------------------------------
// Dataset assembly

struct SplitFractions {
  double train = 0.70, val = 0.15, test = 0.15;
};

struct DatasetConfig {
  std::size_t benign_count = 300;
  std::size_t malignant_count = 300;
  SynthParams synth;
  /// When set, images are read from <root>/{benign,malignant}/ instead of generated.
  std::optional<std::filesystem::path> ingest_root;
  SplitFractions split;
  std::uint64_t seed = 42;
  std::vector<AugmentationOp> balancing_ops = default_balancing_ops();
};

struct Dataset {
  std::vector<LabeledImage> train, val, test;
  std::uint64_t seed = 0;
  SplitFractions split;
  std::size_t skipped_files = 0;
};

namespace detail {

inline std::vector<LabeledImage> ingest_class(const std::filesystem::path& root, Label label, std::size_t& skipped) {
  std::vector<LabeledImage> out;
  const auto dir = root / label_name(label);
  if (!std::filesystem::is_directory(dir)) return out;
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".pgm" || ext == ".png" || ext == ".PGM" || ext == ".PNG")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    try {
      LabeledImage li;
      li.image = read_image(f);
      li.label = label;
      li.source = Source::Ingested;
      li.id = std::string(label_name(label)) + "/" + f.stem().string();
      li.group = li.id;
      out.push_back(std::move(li));
    } catch (const IoError&) {
      ++skipped;
    }
  }
  return out;
}

// Adds augmented copies of `minority` members until it holds `target` items.
inline void balance_to(std::vector<LabeledImage>& minority, std::size_t target, const std::vector<AugmentationOp>& ops) {
  const std::size_t n = minority.size();
  if (n == 0 || n >= target) return;
  const std::size_t deficit = target - n;
  if (deficit > n * ops.size()) {
    throw std::invalid_argument("balancing: class ratio exceeds what " + std::to_string(ops.size()) + " augmentation ops can cover");
  }
  for (std::size_t k = 0; k < deficit; ++k) {
    const auto& src = minority[k % n];
    auto v = augment(src, {ops[k / n]});
    minority.push_back(std::move(v.front()));
  }
}

}  // namespace detail

/// Generates or ingests images, splits each class by source id, then
/// augments the minority class inside every split until class counts match.
/// Augmented variants always stay in their source's split.
inline Dataset build_dataset(const DatasetConfig& cfg) {
  const double fsum = cfg.split.train + cfg.split.val + cfg.split.test;
  if (std::abs(fsum - 1.0) > 1e-9 || cfg.split.train <= 0 || cfg.split.val < 0 || cfg.split.test < 0) {
    throw std::invalid_argument("dataset: split fractions must be non-negative, train > 0, and sum to 1");
  }
  Dataset ds;
  ds.seed = cfg.seed;
  ds.split = cfg.split;
  std::vector<LabeledImage> by_class[2];
  if (cfg.ingest_root) {
    if (!std::filesystem::is_directory(*cfg.ingest_root)) throw IoError("ingestion path missing: " + cfg.ingest_root->string());
    by_class[0] = detail::ingest_class(*cfg.ingest_root, Label::Benign, ds.skipped_files);
    by_class[1] = detail::ingest_class(*cfg.ingest_root, Label::Malignant, ds.skipped_files);
  } else {
    if (cfg.benign_count < 2 || cfg.malignant_count < 2) throw std::invalid_argument("dataset: need at least 2 images per class");
    for (int c = 0; c < 2; ++c) {
      const Label label = static_cast<Label>(c);
      const std::size_t count = c == 0 ? cfg.benign_count : cfg.malignant_count;
      for (std::size_t i = 0; i < count; ++i) {
        LabeledImage li;
        li.image = synth_generate(label, hash_combine(cfg.seed, (static_cast<std::uint64_t>(c) << 32) | i), cfg.synth);
        li.label = label;
        li.source = Source::Synthetic;
        char buf[32];
        std::snprintf(buf, sizeof buf, "syn-%c-%05zu", c == 0 ? 'b' : 'm', i);
        li.id = buf;
        li.group = li.id;
        by_class[c].push_back(std::move(li));
      }
    }
  }
  if (by_class[0].size() < 2 || by_class[1].size() < 2) throw std::invalid_argument("dataset: need at least 2 images per class");

  std::vector<LabeledImage> parts[2][3];  // [class][split]
  for (int c = 0; c < 2; ++c) {
    auto& items = by_class[c];
    Rng rng(hash_combine(cfg.seed, 0xda7a + static_cast<std::uint64_t>(c)));
    rng.shuffle(items.begin(), items.end());
    const std::size_t n = items.size();
    const auto n_train = static_cast<std::size_t>(std::lround(static_cast<double>(n) * cfg.split.train));
    const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::lround(static_cast<double>(n) * cfg.split.val)));
    for (std::size_t i = 0; i < n; ++i) {
      const int s = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);
      parts[c][s].push_back(std::move(items[i]));
    }
  }
  for (int s = 0; s < 3; ++s) {
    auto& b = parts[0][s];
    auto& m = parts[1][s];
    if (b.size() < m.size()) detail::balance_to(b, m.size(), cfg.balancing_ops);
    if (m.size() < b.size()) detail::balance_to(m, b.size(), cfg.balancing_ops);
  }
  auto assemble = [&](int s) {
    std::vector<LabeledImage> out;
    for (int c = 0; c < 2; ++c)
      for (auto& li : parts[c][s]) out.push_back(std::move(li));
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    return out;
  };
  ds.train = assemble(0);
  ds.val = assemble(1);
  ds.test = assemble(2);
  return ds;
}

// ---------------------------------------------------------------------------
// Manifest and on-disk layout

inline void write_manifest(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "id,label,source,split\n";
  auto rows = [&](const std::vector<LabeledImage>& v, const char* split) {
    for (const auto& li : v) out << li.id << ',' << static_cast<int>(li.label) << ',' << source_name(li.source) << ',' << split << '\n';
  };
  rows(ds.train, "train");
  rows(ds.val, "val");
  rows(ds.test, "test");
}

inline std::filesystem::path image_path_for(const std::filesystem::path& root, const LabeledImage& li) {
  std::string file = li.id;
  std::replace(file.begin(), file.end(), '/', '_');
  return root / label_name(li.label) / (file + ".pgm");
}

/// Writes <root>/{benign,malignant}/<id>.pgm plus <root>/manifest.csv.
inline void save_dataset(const std::filesystem::path& root, const Dataset& ds) {
  std::filesystem::create_directories(root / "benign");
  std::filesystem::create_directories(root / "malignant");
  for (const auto* split : {&ds.train, &ds.val, &ds.test})
    for (const auto& li : *split) write_pgm(image_path_for(root, li), li.image);
  write_manifest(root / "manifest.csv", ds);
}

/// Reads a directory written by save_dataset.
inline Dataset load_dataset(const std::filesystem::path& root) {
  std::ifstream in(root / "manifest.csv");
  if (!in) throw IoError("missing manifest: " + (root / "manifest.csv").string());
  Dataset ds;
  std::string line;
  std::getline(in, line);
  if (line != "id,label,source,split") throw IoError("unexpected manifest header in " + root.string());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, label, source, split;
    std::getline(ss, id, ',');
    std::getline(ss, label, ',');
    std::getline(ss, source, ',');
    std::getline(ss, split, ',');
    LabeledImage li;
    li.id = id;
    li.label = label == "1" ? Label::Malignant : Label::Benign;
    li.source = source == "ingested" ? Source::Ingested : Source::Synthetic;
    li.group = id.substr(0, id.find('+'));
    li.image = read_pgm(image_path_for(root, li));
    if (split == "train") {
      ds.train.push_back(std::move(li));
    } else if (split == "val") {
      ds.val.push_back(std::move(li));
    } else if (split == "test") {
      ds.test.push_back(std::move(li));
    } else {
      throw IoError("manifest: unknown split '" + split + "'");
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Model input

struct Normalization {
  double mean = 0.0;
  double std = 1.0;
};

/// Bilinear resize with half-pixel centres; values stay real-valued in [0, 255].
inline std::vector<double> resize_bilinear(const ImageGray& img, std::size_t out_h, std::size_t out_w) {
  std::vector<double> out(out_h * out_w);
  const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = (1 - wx) * img.at(x0, y0) + wx * img.at(x1, y0);
      const double bot = (1 - wx) * img.at(x0, y1) + wx * img.at(x1, y1);
      out[y * out_w + x] = (1 - wy) * top + wy * bot;
    }
  }
  return out;
}

/// Mean/std of resized, [0,1]-scaled pixels over a set of images.
inline Normalization compute_normalization(const std::vector<const ImageGray*>& images, std::size_t side) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto* img : images) {
    for (double v : resize_bilinear(*img, side, side)) {
      const double s = v / 255.0;
      sum += s;
      sq += s * s;
      ++n;
    }
  }
  if (n == 0) return {};
  const double mean = sum / static_cast<double>(n);
  const double var = std::max(sq / static_cast<double>(n) - mean * mean, 0.0);
  return {mean, var > 1e-12 ? std::sqrt(var) : 1.0};
}

/// [1, 1, side, side] tensor: resize, scale to [0,1], standardise.
inline Tensor to_model_input(const ImageGray& img, std::size_t side, const Normalization& norm = {}) {
  if (side < 16) throw std::invalid_argument("to_model_input: side must be >= 16");
  auto px = resize_bilinear(img, side, side);
  std::vector<float> data(px.size());
  for (std::size_t i = 0; i < px.size(); ++i) data[i] = static_cast<float>((px[i] / 255.0 - norm.mean) / norm.std);
  return Tensor::from({1, 1, side, side}, std::move(data));
}

/// Stacks single-image inputs along the batch axis (no graph).
inline Tensor stack_inputs(const std::vector<Tensor>& items) {
  if (items.empty()) throw ShapeError("stack_inputs: empty batch");
  Shape shape = items.front().shape();
  const std::size_t per = items.front().numel();
  std::vector<float> data;
  data.reserve(per * items.size());
  for (const auto& t : items) {
    if (t.numel() != per) throw ShapeError("stack_inputs: mismatched item shapes");
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  shape[0] = items.size() * shape[0];
  return Tensor::from(shape, std::move(data));
}

}  // namespace mammo
