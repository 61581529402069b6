// Attribution methods (saliency, integrated gradients, occlusion, GradCAM,
// guided GradCAM, DeepLIFT rescale), transformer attention maps and heatmap
// overlays. Methods act on a Classifier: any batch -> logits function that
// may expose a GradCAM hook and final-block attention through a trace.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mammo/data.hpp"
#include "mammo/image.hpp"
#include "mammo/models.hpp"
#include "mammo/tensor.hpp"

namespace mammo {

class XaiError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct AttributionMap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;

  double at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
  double sum() const {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
  bool operator==(const AttributionMap&) const = default;
};

enum class XaiMethod { Saliency, IntegratedGradients, Occlusion, GradCAM, GuidedGradCAM, DeepLIFT, AttentionMap };

inline constexpr std::array<XaiMethod, 7> kAllXaiMethods{XaiMethod::Saliency,      XaiMethod::IntegratedGradients, XaiMethod::Occlusion,
                                                         XaiMethod::GradCAM,       XaiMethod::GuidedGradCAM,       XaiMethod::DeepLIFT,
                                                         XaiMethod::AttentionMap};

inline std::string_view xai_method_name(XaiMethod m) {
  switch (m) {
    case XaiMethod::Saliency: return "saliency";
    case XaiMethod::IntegratedGradients: return "ig";
    case XaiMethod::Occlusion: return "occlusion";
    case XaiMethod::GradCAM: return "gradcam";
    case XaiMethod::GuidedGradCAM: return "guided_gradcam";
    case XaiMethod::DeepLIFT: return "deeplift";
    case XaiMethod::AttentionMap: return "attention";
  }
  return "?";
}

inline XaiMethod parse_xai_method(std::string_view s) {
  for (auto m : kAllXaiMethods) {
    if (xai_method_name(m) == s) return m;
  }
  if (s == "integrated_gradients") return XaiMethod::IntegratedGradients;
  if (s == "guided-gradcam") return XaiMethod::GuidedGradCAM;
  throw XaiError("unknown attribution method '" + std::string(s) + "'");
}

enum class BaselineKind { Black, Custom };

struct XaiConfig {
  XaiMethod method = XaiMethod::Saliency;
  BaselineKind baseline = BaselineKind::Black;
  /// Baseline in model-input space, used when baseline == Custom.
  std::vector<double> custom_baseline;
  std::size_t ig_steps = 50;
  std::size_t occlusion_patch = 0;   // 0: max(1, input_side / 4)
  std::size_t occlusion_stride = 0;  // 0: patch / 2
  double occlusion_fill = 0.0;       // pixel intensity in [0, 1] before normalisation
  int target_class = -1;             // -1: predicted class
  Normalization norm;                // maps pixel intensities to model-input values
  std::size_t batch_size = 32;

  void validate(std::size_t side) const {
    if (ig_steps < 1) throw XaiError("xai: ig_steps must be >= 1");
    const std::size_t p = patch(side);
    if (p < 1 || p > side) throw XaiError("xai: occlusion patch must be in [1, input side]");
    if (target_class > 1 || target_class < -1) throw XaiError("xai: target_class must be 0, 1 or -1");
    if (batch_size < 1) throw XaiError("xai: batch_size must be >= 1");
  }
  std::size_t patch(std::size_t side) const { return occlusion_patch ? occlusion_patch : std::max<std::size_t>(1, side / 4); }
  std::size_t stride(std::size_t side) const { return occlusion_stride ? occlusion_stride : std::max<std::size_t>(1, patch(side) / 2); }
};

template <typename T>
struct BasicClassifier {
  std::size_t side = 0;
  std::function<BasicTensor<T>(const BasicTensor<T>&, ForwardTrace<T>*)> forward;
  bool has_hook = false;
  bool has_attention = false;
};

using Classifier = BasicClassifier<float>;

/// Wraps a frozen copy of `m` (parameters excluded from gradient tracking, so
/// attribution never touches the original model's gradient buffers).
template <typename T>
BasicClassifier<T> classifier_of(const BasicModel<T>& m) {
  auto frozen = std::make_shared<BasicModel<T>>(m.clone());
  for (auto& p : frozen->params) p.tensor.set_requires_grad(false);
  BasicClassifier<T> c;
  c.side = m.config.input_side;
  c.forward = [frozen](const BasicTensor<T>& x, ForwardTrace<T>* tr) { return mammo::forward(*frozen, x, tr); };
  c.has_hook = true;
  c.has_attention = is_transformer(m.kind);
  return c;
}

/// Logits (0, w·x + b): class-1 score linear in the input.
template <typename T>
BasicClassifier<T> linear_classifier(std::vector<double> w, double b, std::size_t side) {
  if (w.size() != side * side) throw XaiError("linear_classifier: weight count must be side*side");
  std::vector<T> wm(w.size() * 2, T(0));
  for (std::size_t i = 0; i < w.size(); ++i) wm[2 * i + 1] = static_cast<T>(w[i]);
  auto W = std::make_shared<BasicTensor<T>>(BasicTensor<T>::from({w.size(), 2}, std::move(wm)));
  auto B = std::make_shared<BasicTensor<T>>(BasicTensor<T>::from({2}, {T(0), static_cast<T>(b)}));
  BasicClassifier<T> c;
  c.side = side;
  c.forward = [W, B](const BasicTensor<T>& x, ForwardTrace<T>*) { return ops::add_bias(ops::matmul(ops::flatten(x), *W), *B, 1); };
  return c;
}

namespace detail {

template <typename T>
void check_input(const BasicClassifier<T>& c, const BasicTensor<T>& x) {
  if (x.rank() != 4 || x.dim(0) != 1 || x.dim(1) != 1 || x.dim(2) != c.side || x.dim(3) != c.side) {
    throw ShapeError("xai: expected input [1,1," + std::to_string(c.side) + "," + std::to_string(c.side) + "], got " + shape_str(x.shape()));
  }
}

/// Requested class, or the predicted one when cfg asks for -1.
template <typename T>
int resolve_target(const BasicClassifier<T>& c, const BasicTensor<T>& x, int target) {
  if (target >= 0) return target;
  NoGradGuard g;
  const auto l = c.forward(x, nullptr);
  return l.at(1) > l.at(0) ? 1 : 0;
}

/// Σ_b logits[b, cls] as a scalar graph node.
template <typename T>
BasicTensor<T> class_score(const BasicTensor<T>& logits, int cls) {
  return ops::sum(ops::gather(logits, 1, {static_cast<std::size_t>(cls)}));
}

template <typename T>
BasicTensor<T> baseline_for(const BasicClassifier<T>& c, const XaiConfig& cfg) {
  const std::size_t n = c.side * c.side;
  if (cfg.baseline == BaselineKind::Custom) {
    if (cfg.custom_baseline.size() != n) {
      throw ShapeError("xai: baseline has " + std::to_string(cfg.custom_baseline.size()) + " values, input has " + std::to_string(n));
    }
    std::vector<T> v(cfg.custom_baseline.begin(), cfg.custom_baseline.end());
    return BasicTensor<T>::from({1, 1, c.side, c.side}, std::move(v));
  }
  return BasicTensor<T>::full({1, 1, c.side, c.side}, static_cast<T>((0.0 - cfg.norm.mean) / cfg.norm.std));
}

template <typename T>
AttributionMap make_map(std::size_t side, const std::vector<double>& v) {
  return AttributionMap{side, side, v};
}

/// Bilinear resize (half-pixel centres, clamped borders) of a real grid.
inline std::vector<double> upsample_bilinear(const std::vector<double>& src, std::size_t h, std::size_t w, std::size_t out_h,
                                             std::size_t out_w) {
  std::vector<double> out(out_h * out_w);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h), sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = (1 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1];
      const double bot = (1 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1];
      out[y * out_w + x] = (1 - wy) * top + wy * bot;
    }
  }
  return out;
}

/// Gradient of the class score w.r.t. the input under a backward mode.
template <typename T>
std::vector<double> input_gradient(const BasicClassifier<T>& c, const BasicTensor<T>& x, int cls, BackwardMode mode) {
  auto leaf = x.detach(true);
  auto logits = c.forward(leaf, nullptr);
  BackwardModeGuard guard(mode);
  backward(class_score(logits, cls));
  return std::vector<double>(leaf.grad().begin(), leaf.grad().end());
}

}  // namespace detail

/// |∂F_class/∂x| per pixel.
template <typename T>
AttributionMap saliency(const BasicClassifier<T>& c, const BasicTensor<T>& x, int cls = -1) {
  detail::check_input(c, x);
  cls = detail::resolve_target(c, x, cls);
  auto g = detail::input_gradient(c, x, cls, BackwardMode::Standard);
  for (auto& v : g) v = std::abs(v);
  return detail::make_map<T>(c.side, g);
}

/// (x − x′) ⊙ (1/m)·Σ_k ∇F(x′ + ((k − ½)/m)(x − x′)), evaluated in batches.
template <typename T>
AttributionMap integrated_gradients(const BasicClassifier<T>& c, const BasicTensor<T>& x, const XaiConfig& cfg) {
  detail::check_input(c, x);
  cfg.validate(c.side);
  const int cls = detail::resolve_target(c, x, cfg.target_class);
  const auto base = detail::baseline_for(c, cfg);
  const std::size_t n = c.side * c.side, m = cfg.ig_steps;
  std::vector<double> grad_sum(n, 0.0);
  for (std::size_t k0 = 0; k0 < m; k0 += cfg.batch_size) {
    const std::size_t bs = std::min(cfg.batch_size, m - k0);
    std::vector<T> pts(bs * n);
    for (std::size_t b = 0; b < bs; ++b) {
      const double alpha = (static_cast<double>(k0 + b) + 0.5) / static_cast<double>(m);
      for (std::size_t i = 0; i < n; ++i) {
        const double xb = base.data()[i];
        pts[b * n + i] = static_cast<T>(xb + alpha * (static_cast<double>(x.data()[i]) - xb));
      }
    }
    auto leaf = BasicTensor<T>::from({bs, 1, c.side, c.side}, std::move(pts), true);
    backward(detail::class_score(c.forward(leaf, nullptr), cls));
    const auto g = leaf.grad();
    for (std::size_t b = 0; b < bs; ++b)
      for (std::size_t i = 0; i < n; ++i) grad_sum[i] += g[b * n + i];
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = (static_cast<double>(x.data()[i]) - base.data()[i]) * grad_sum[i] / static_cast<double>(m);
  }
  return detail::make_map<T>(c.side, out);
}

/// Top-left corners of occlusion windows along one axis (last window flush
/// with the border).
inline std::vector<std::size_t> occlusion_offsets(std::size_t side, std::size_t patch, std::size_t stride) {
  std::vector<std::size_t> pos;
  for (std::size_t p = 0; p + patch <= side; p += stride) pos.push_back(p);
  if (pos.empty() || pos.back() + patch < side) pos.push_back(side - patch);
  return pos;
}

/// Mean over covering windows of F(x) − F(x with the window filled). Each
/// masked image is an independent single-image forward; windows visit in
/// row-major order and per-pixel sums accumulate in double.
template <typename T>
AttributionMap occlusion(const BasicClassifier<T>& c, const BasicTensor<T>& x, const XaiConfig& cfg) {
  detail::check_input(c, x);
  cfg.validate(c.side);
  NoGradGuard no_grad;
  const int cls = detail::resolve_target(c, x, cfg.target_class);
  const std::size_t S = c.side, patch = cfg.patch(S), stride = cfg.stride(S);
  const T fill = static_cast<T>((cfg.occlusion_fill - cfg.norm.mean) / cfg.norm.std);
  const double f0 = c.forward(x, nullptr).at(static_cast<std::size_t>(cls));
  const auto offs = occlusion_offsets(S, patch, stride);
  std::vector<double> acc(S * S, 0.0), count(S * S, 0.0);
  for (std::size_t oy : offs) {
    for (std::size_t ox : offs) {
      auto masked = x.detach();
      auto d = masked.mutable_data();
      for (std::size_t y = oy; y < oy + patch; ++y)
        for (std::size_t xx = ox; xx < ox + patch; ++xx) d[y * S + xx] = fill;
      const double delta = f0 - static_cast<double>(c.forward(masked, nullptr).at(static_cast<std::size_t>(cls)));
      for (std::size_t y = oy; y < oy + patch; ++y)
        for (std::size_t xx = ox; xx < ox + patch; ++xx) {
          acc[y * S + xx] += delta;
          count[y * S + xx] += 1.0;
        }
    }
  }
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = count[i] > 0 ? acc[i] / count[i] : 0.0;
  return detail::make_map<T>(S, acc);
}

/// Coarse (pre-upsampling) GradCAM grid alongside the final map.
struct GradCamDetail {
  std::size_t hook_h = 0, hook_w = 0, channels = 0;
  std::vector<double> alpha;   // per channel
  std::vector<double> coarse;  // relu(Σ α_k A^k), hook resolution
};

template <typename T>
AttributionMap gradcam(const BasicClassifier<T>& c, const BasicTensor<T>& x, int cls = -1, GradCamDetail* detail_out = nullptr) {
  detail::check_input(c, x);
  if (!c.has_hook) throw XaiError("gradcam: classifier exposes no activation hook");
  cls = detail::resolve_target(c, x, cls);
  auto leaf = x.detach(true);
  ForwardTrace<T> tr;
  auto logits = c.forward(leaf, &tr);
  if (!tr.hook.defined() || tr.hook.rank() != 4) throw XaiError("gradcam: hook layer did not resolve");
  backward(detail::class_score(logits, cls));
  const std::size_t C = tr.hook.dim(1), h = tr.hook.dim(2), w = tr.hook.dim(3), hw = h * w;
  std::vector<double> g(C * hw, 0.0);
  if (tr.hook.has_grad()) std::copy(tr.hook.grad().begin(), tr.hook.grad().end(), g.begin());
  GradCamDetail d{h, w, C, std::vector<double>(C, 0.0), std::vector<double>(hw, 0.0)};
  for (std::size_t k = 0; k < C; ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += g[k * hw + i];
    d.alpha[k] = s / static_cast<double>(hw);
  }
  const auto A = tr.hook.data();
  for (std::size_t i = 0; i < hw; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < C; ++k) s += d.alpha[k] * static_cast<double>(A[k * hw + i]);
    d.coarse[i] = std::max(s, 0.0);
  }
  auto up = detail::upsample_bilinear(d.coarse, h, w, c.side, c.side);
  if (detail_out) *detail_out = std::move(d);
  return detail::make_map<T>(c.side, up);
}

/// GradCAM ⊙ guided-backpropagation input gradient.
template <typename T>
AttributionMap guided_gradcam(const BasicClassifier<T>& c, const BasicTensor<T>& x, int cls = -1) {
  cls = detail::resolve_target(c, x, cls);
  auto cam = gradcam(c, x, cls);
  const auto guided = detail::input_gradient(c, x, cls, BackwardMode::Guided);
  for (std::size_t i = 0; i < cam.values.size(); ++i) cam.values[i] *= guided[i];
  return cam;
}

/// Guided-backpropagation input gradient on its own.
template <typename T>
AttributionMap guided_backprop(const BasicClassifier<T>& c, const BasicTensor<T>& x, int cls = -1) {
  detail::check_input(c, x);
  cls = detail::resolve_target(c, x, cls);
  return detail::make_map<T>(c.side, detail::input_gradient(c, x, cls, BackwardMode::Guided));
}

/// Rescale-rule multipliers propagated from the class logit, times (x − x′).
/// The actual input and the reference travel as one batch of two.
template <typename T>
AttributionMap deeplift(const BasicClassifier<T>& c, const BasicTensor<T>& x, const XaiConfig& cfg) {
  detail::check_input(c, x);
  cfg.validate(c.side);
  const int cls = detail::resolve_target(c, x, cfg.target_class);
  const auto base = detail::baseline_for(c, cfg);
  const std::size_t n = c.side * c.side;
  std::vector<T> pair(2 * n);
  std::copy(x.data().begin(), x.data().end(), pair.begin());
  std::copy(base.data().begin(), base.data().end(), pair.begin() + static_cast<long>(n));
  auto leaf = BasicTensor<T>::from({2, 1, c.side, c.side}, std::move(pair), true);
  auto logits = c.forward(leaf, nullptr);
  auto score = ops::gather(ops::gather(logits, 1, {static_cast<std::size_t>(cls)}), 0, {0});
  {
    BackwardModeGuard guard(BackwardMode::DeepLiftRescale);
    backward(ops::sum(score));
  }
  std::vector<double> out(n);
  const auto g = leaf.grad();
  for (std::size_t i = 0; i < n; ++i) out[i] = g[i] * (static_cast<double>(x.data()[i]) - base.data()[i]);
  return detail::make_map<T>(c.side, out);
}

/// Attention received per token (column sums over queries, averaged over
/// heads and windows' query rows), placed on the token grid.
template <typename T>
std::vector<double> attention_received(const ForwardTrace<T>& tr) {
  if (!tr.attention.defined()) throw XaiError("attention_map: no attention recorded");
  const std::size_t Bw = tr.attention.dim(0), h = tr.attention.dim(1), n = tr.attention.dim(2);
  if (Bw != tr.windows) throw XaiError("attention_map: expects a single image");
  std::vector<double> grid(tr.grid_h * tr.grid_w, 0.0);
  const auto w = tr.attention.data();
  for (std::size_t win = 0; win < Bw; ++win)
    for (std::size_t hd = 0; hd < h; ++hd)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) grid[tr.token_cell[win * n + j]] += w[((win * h + hd) * n + i) * n + j] / static_cast<double>(h);
  return grid;
}

/// Min-max normalisation to [0, 1]; a constant input becomes all zeros.
inline std::vector<double> normalize01(std::vector<double> v) {
  if (v.empty()) return v;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo, b = *hi;
  for (auto& e : v) e = b > a ? (e - a) / (b - a) : 0.0;
  return v;
}

template <typename T>
AttributionMap attention_map(const BasicClassifier<T>& c, const BasicTensor<T>& x) {
  detail::check_input(c, x);
  if (!c.has_attention) throw XaiError("attention_map: model kind has no attention blocks");
  ForwardTrace<T> tr;
  {
    NoGradGuard g;
    c.forward(x, &tr);
  }
  const auto grid = attention_received(tr);
  return detail::make_map<T>(c.side, normalize01(detail::upsample_bilinear(grid, tr.grid_h, tr.grid_w, c.side, c.side)));
}

template <typename T>
AttributionMap explain(const BasicClassifier<T>& c, const BasicTensor<T>& x, const XaiConfig& cfg) {
  switch (cfg.method) {
    case XaiMethod::Saliency: return saliency(c, x, cfg.target_class);
    case XaiMethod::IntegratedGradients: return integrated_gradients(c, x, cfg);
    case XaiMethod::Occlusion: return occlusion(c, x, cfg);
    case XaiMethod::GradCAM: return gradcam(c, x, cfg.target_class);
    case XaiMethod::GuidedGradCAM: return guided_gradcam(c, x, cfg.target_class);
    case XaiMethod::DeepLIFT: return deeplift(c, x, cfg);
    case XaiMethod::AttentionMap: return attention_map(c, x);
  }
  throw XaiError("explain: unknown method");
}

// ---------------------------------------------------------------------------
// Rendering

/// Palette entry i (t = i/255): piecewise-linear blue→cyan→yellow→red,
/// r = clamp(1.5 − |4t − 3|), g = clamp(1.5 − |4t − 2|), b = clamp(1.5 − |4t − 1|),
/// scaled to 0..255 and rounded.
inline const std::array<std::array<std::uint8_t, 3>, 256>& heat_palette() {
  static const auto table = [] {
    std::array<std::array<std::uint8_t, 3>, 256> t{};
    for (int i = 0; i < 256; ++i) {
      const double v = i / 255.0;
      auto ch = [&](double c) { return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(1.5 - std::abs(4.0 * v - c), 0.0, 1.0))); };
      t[static_cast<std::size_t>(i)] = {ch(3.0), ch(2.0), ch(1.0)};
    }
    return t;
  }();
  return table;
}

/// Min-max normalised map through the palette, blended 50/50 over the image.
inline ImageRgb overlay(const ImageGray& img, const AttributionMap& map) {
  if (img.width != map.width || img.height != map.height) {
    throw ShapeError("overlay: image " + std::to_string(img.width) + "x" + std::to_string(img.height) + " vs map " +
                     std::to_string(map.width) + "x" + std::to_string(map.height));
  }
  const auto norm = normalize01(map.values);
  const auto& pal = heat_palette();
  ImageRgb out{img.width, img.height, std::vector<std::uint8_t>(img.pixels.size() * 3)};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const auto idx = static_cast<std::size_t>(std::lround(norm[i] * 255.0));
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const unsigned sum = img.pixels[i] + pal[idx][ch];
      out.pixels[3 * i + ch] = static_cast<std::uint8_t>((sum + 1) / 2);
    }
  }
  return out;
}

/// Map rescaled to 0..255 grayscale (for quick inspection).
inline ImageGray map_to_gray(const AttributionMap& map) {
  const auto norm = normalize01(map.values);
  ImageGray g(map.width, map.height);
  for (std::size_t i = 0; i < norm.size(); ++i) g.pixels[i] = static_cast<std::uint8_t>(std::lround(norm[i] * 255.0));
  return g;
}

/// u32 width, u32 height, then width·height f32, all little endian.
inline void write_map_raw(const std::filesystem::path& path, const AttributionMap& map) {
  std::string buf;
  auto put = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  put(static_cast<std::uint32_t>(map.width));
  put(static_cast<std::uint32_t>(map.height));
  for (double v : map.values) put(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline AttributionMap read_map_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto get = [&](std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
    return v;
  };
  if (buf.size() < 8) throw IoError(path.string() + ": truncated map");
  AttributionMap m{get(4), get(0), {}};
  if (buf.size() != 8 + 4 * m.width * m.height) throw IoError(path.string() + ": map size does not match header");
  for (std::size_t i = 0; i < m.width * m.height; ++i) m.values.push_back(std::bit_cast<float>(get(8 + 4 * i)));
  return m;
}

}  // namespace mammo
