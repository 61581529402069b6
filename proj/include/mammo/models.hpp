// Toy-scale classifiers over a common interface: a plain CNN, a residual
// network, a vision transformer, a shifted-window transformer, a dense conv
// stem feeding a transformer encoder, ConvMixer and ConvNeXt. All consume
// [B, 1, S, S] inputs and return raw two-class logits.
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mammo/random.hpp"
#include "mammo/tensor.hpp"

namespace mammo {

enum class ModelKind : std::uint8_t { BaseCNN, ResNetLite, ViTLite, SwinLite, DenseTransformer, ConvMixerLite, ConvNeXtLite };

inline constexpr std::array<ModelKind, 7> kAllModels{ModelKind::BaseCNN,       ModelKind::ResNetLite,       ModelKind::ViTLite,
                                                     ModelKind::SwinLite,      ModelKind::DenseTransformer, ModelKind::ConvMixerLite,
                                                     ModelKind::ConvNeXtLite};

inline std::string_view model_name(ModelKind k) {
  switch (k) {
    case ModelKind::BaseCNN: return "basecnn";
    case ModelKind::ResNetLite: return "resnet";
    case ModelKind::ViTLite: return "vit";
    case ModelKind::SwinLite: return "swin";
    case ModelKind::DenseTransformer: return "densetrans";
    case ModelKind::ConvMixerLite: return "convmixer";
    case ModelKind::ConvNeXtLite: return "convnext";
  }
  return "?";
}

/// Row label used in comparison tables.
inline std::string_view model_display_name(ModelKind k) {
  switch (k) {
    case ModelKind::BaseCNN: return "CNN";
    case ModelKind::ResNetLite: return "ResNet";
    case ModelKind::ViTLite: return "ViT";
    case ModelKind::SwinLite: return "Swin";
    case ModelKind::DenseTransformer: return "DenseTrans";
    case ModelKind::ConvMixerLite: return "ConvMixer";
    case ModelKind::ConvNeXtLite: return "ConvNeXt";
  }
  return "?";
}

inline std::optional<ModelKind> try_parse_model_kind(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (auto k : kAllModels) {
    if (model_name(k) == s) return k;
  }
  static const std::map<std::string, ModelKind> aliases{
      {"cnn", ModelKind::BaseCNN},          {"resnetlite", ModelKind::ResNetLite},
      {"vitlite", ModelKind::ViTLite},      {"swinlite", ModelKind::SwinLite},
      {"densetransformer", ModelKind::DenseTransformer}, {"convmixerlite", ModelKind::ConvMixerLite},
      {"convnextlite", ModelKind::ConvNeXtLite}};
  if (auto it = aliases.find(s); it != aliases.end()) return it->second;
  return std::nullopt;
}

inline ModelKind parse_model_kind(std::string_view name) {
  if (auto k = try_parse_model_kind(name)) return *k;
  throw std::invalid_argument("unknown model kind '" + std::string(name) +
                              "' (expected basecnn|resnet|vit|swin|densetrans|convmixer|convnext)");
}

inline bool is_transformer(ModelKind k) {
  return k == ModelKind::ViTLite || k == ModelKind::SwinLite || k == ModelKind::DenseTransformer;
}

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  std::size_t input_side = 64;
  std::vector<std::size_t> channels;  // per-stage widths
  std::vector<std::size_t> depths;    // per-stage block counts
  std::size_t patch = 8;
  std::size_t embed_dim = 64;
  std::size_t heads = 4;
  std::size_t depth = 4;
  std::size_t window = 4;
  std::size_t mlp_ratio = 2;
  std::size_t kernel = 5;
  std::size_t hidden = 64;
  std::size_t num_classes = 2;
  std::uint64_t seed = 0;
  /// Free-form metadata carried through checkpoints (normalisation, enhancement, scores).
  std::map<std::string, std::string> meta;

  bool operator==(const ModelConfig&) const = default;

  /// Canonical `key=value` lines, keys sorted.
  std::string to_text() const {
    std::map<std::string, std::string> kv;
    auto list = [](const std::vector<std::size_t>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
      return s;
    };
    kv["channels"] = list(channels);
    kv["depths"] = list(depths);
    kv["depth"] = std::to_string(depth);
    kv["embed_dim"] = std::to_string(embed_dim);
    kv["heads"] = std::to_string(heads);
    kv["hidden"] = std::to_string(hidden);
    kv["input_side"] = std::to_string(input_side);
    kv["kernel"] = std::to_string(kernel);
    kv["mlp_ratio"] = std::to_string(mlp_ratio);
    kv["num_classes"] = std::to_string(num_classes);
    kv["patch"] = std::to_string(patch);
    kv["seed"] = std::to_string(seed);
    kv["window"] = std::to_string(window);
    for (const auto& [k, v] : meta) kv["meta." + k] = v;
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
  }

  static ModelConfig from_text(std::string_view text) {
    ModelConfig c;
    auto list = [](const std::string& s) {
      std::vector<std::size_t> v;
      std::stringstream ss(s);
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        if (!tok.empty()) v.push_back(std::stoul(tok));
      }
      return v;
    };
    std::stringstream ss{std::string(text)};
    std::string line;
    while (std::getline(ss, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("model config: malformed line '" + line + "'");
      const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
      try {
        if (k.rfind("meta.", 0) == 0) c.meta[k.substr(5)] = v;
        else if (k == "channels") c.channels = list(v);
        else if (k == "depths") c.depths = list(v);
        else if (k == "depth") c.depth = std::stoul(v);
        else if (k == "embed_dim") c.embed_dim = std::stoul(v);
        else if (k == "heads") c.heads = std::stoul(v);
        else if (k == "hidden") c.hidden = std::stoul(v);
        else if (k == "input_side") c.input_side = std::stoul(v);
        else if (k == "kernel") c.kernel = std::stoul(v);
        else if (k == "mlp_ratio") c.mlp_ratio = std::stoul(v);
        else if (k == "num_classes") c.num_classes = std::stoul(v);
        else if (k == "patch") c.patch = std::stoul(v);
        else if (k == "seed") c.seed = std::stoull(v);
        else if (k == "window") c.window = std::stoul(v);
        else throw ConfigError("model config: unknown key '" + k + "'");
      } catch (const std::logic_error& e) {
        if (dynamic_cast<const ConfigError*>(&e)) throw;
        throw ConfigError("model config: bad value for '" + k + "': " + v);
      }
    }
    return c;
  }
};

inline ModelConfig default_config(ModelKind kind) {
  ModelConfig c;
  switch (kind) {
    case ModelKind::BaseCNN:
      c.channels = {16, 32, 64, 128};
      c.hidden = 64;
      break;
    case ModelKind::ResNetLite:
      c.channels = {16, 32, 64};
      c.depths = {2, 2, 2};
      break;
    case ModelKind::ViTLite:
      c.patch = 8;
      c.embed_dim = 64;
      c.heads = 4;
      c.depth = 4;
      c.mlp_ratio = 2;
      break;
    case ModelKind::SwinLite:
      c.patch = 8;
      c.embed_dim = 48;
      c.heads = 3;
      c.window = 4;
      c.depths = {2, 2};
      c.mlp_ratio = 2;
      break;
    case ModelKind::DenseTransformer:
      c.channels = {16, 16};  // stem width, growth rate
      c.depths = {2};         // dense layers
      c.embed_dim = 64;
      c.heads = 4;
      c.depth = 4;
      c.mlp_ratio = 2;
      break;
    case ModelKind::ConvMixerLite:
      c.embed_dim = 64;
      c.depth = 6;
      c.patch = 8;
      c.kernel = 5;
      break;
    case ModelKind::ConvNeXtLite:
      c.channels = {32, 64};
      c.depths = {2, 2};
      c.kernel = 7;
      c.patch = 4;
      c.mlp_ratio = 4;
      break;
  }
  return c;
}

inline void validate_config(ModelKind kind, const ModelConfig& c) {
  auto fail = [&](const std::string& msg) { throw ConfigError(std::string(model_name(kind)) + " config: " + msg); };
  if (c.num_classes != 2) fail("num_classes must be 2");
  if (c.input_side < 16) fail("input_side must be >= 16");
  switch (kind) {
    case ModelKind::BaseCNN:
      if (c.channels.size() != 4) fail("needs 4 channel widths");
      if (c.input_side % 16 != 0) fail("input_side must be divisible by 16 (four 2x pools)");
      break;
    case ModelKind::ResNetLite:
      if (c.channels.empty() || c.channels.size() != c.depths.size()) fail("channels and depths must align");
      if (c.input_side % (4u << (c.channels.size() - 1)) != 0) fail("input_side not divisible by total stride");
      break;
    case ModelKind::ViTLite:
      if (c.patch == 0 || c.input_side % c.patch != 0) fail("input_side must be divisible by patch");
      if (c.heads == 0 || c.embed_dim % c.heads != 0) fail("embed_dim must be divisible by heads");
      break;
    case ModelKind::SwinLite: {
      if (c.patch == 0 || c.window == 0 || c.input_side % (c.window * c.patch) != 0) fail("input_side must be divisible by window*patch");
      if (c.depths.empty()) fail("needs at least one stage");
      std::size_t grid = c.input_side / c.patch, dim = c.embed_dim, heads = c.heads;
      for (std::size_t s = 0; s < c.depths.size(); ++s) {
        if (heads == 0 || dim % heads != 0) fail("embed_dim must be divisible by heads at every stage");
        if (grid % std::min(c.window, grid) != 0) fail("token grid not divisible by window");
        if (s + 1 < c.depths.size()) {
          if (grid % 2 != 0) fail("token grid must be even for patch merging");
          grid /= 2;
          dim *= 2;
          heads *= 2;
        }
      }
      break;
    }
    case ModelKind::DenseTransformer:
      if (c.channels.size() != 2 || c.depths.size() != 1) fail("needs channels=(stem,growth) and depths=(layers)");
      if (c.input_side % 8 != 0) fail("input_side must be divisible by 8");
      if (c.heads == 0 || c.embed_dim % c.heads != 0) fail("embed_dim must be divisible by heads");
      break;
    case ModelKind::ConvMixerLite:
      if (c.patch == 0 || c.input_side % c.patch != 0) fail("input_side must be divisible by patch");
      if (c.kernel % 2 == 0) fail("kernel must be odd");
      break;
    case ModelKind::ConvNeXtLite:
      if (c.channels.empty() || c.channels.size() != c.depths.size()) fail("channels and depths must align");
      if (c.patch == 0 || c.input_side % (c.patch << (c.channels.size() - 1)) != 0) fail("input_side not divisible by total stride");
      if (c.kernel % 2 == 0) fail("kernel must be odd");
      break;
  }
}

template <typename T>
struct Param {
  std::string name;
  BasicTensor<T> tensor;
  bool trainable = true;
  bool decay = false;  // weight matrices / kernels only
};

template <typename T>
class BasicModel {
 public:
  ModelKind kind = ModelKind::BaseCNN;
  ModelConfig config;
  std::vector<Param<T>> params;
  /// Ordered layer descriptors.
  std::vector<std::string> topology;
  /// Layer whose activations feed GradCAM.
  std::string gradcam_hook;

  const BasicTensor<T>& param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("model has no parameter '" + name + "'");
    return params[it->second].tensor;
  }
  BasicTensor<T>& param(const std::string& name) { return params.at(index_.at(name)).tensor; }
  bool has_param(const std::string& name) const { return index_.contains(name); }

  void add_param(std::string name, BasicTensor<T> t, bool trainable, bool decay) {
    if (index_.contains(name)) throw std::logic_error("duplicate parameter name " + name);
    index_[name] = params.size();
    t.set_requires_grad(trainable);
    params.push_back({std::move(name), std::move(t), trainable, decay});
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params) p.tensor.zero_grad();
  }

  /// Deep copy with a different scalar type.
  template <typename U>
  BasicModel<U> cast() const {
    BasicModel<U> out;
    out.kind = kind;
    out.config = config;
    out.topology = topology;
    out.gradcam_hook = gradcam_hook;
    for (const auto& p : params) out.add_param(p.name, p.tensor.template cast<U>(), p.trainable, p.decay);
    return out;
  }

  BasicModel clone() const { return cast<T>(); }

 private:
  std::map<std::string, std::size_t> index_;
};

using Model = BasicModel<float>;

/// Intermediate tensors exposed to attribution methods.
template <typename T>
struct ForwardTrace {
  /// GradCAM activation map [B, C, h, w]; lies on the path to the logits.
  BasicTensor<T> hook;
  /// Final attention block: weights [B*windows, heads, n, n].
  BasicTensor<T> attention;
  /// Per-image token grid the attention tokens live on, and for every
  /// (window, token) pair the flat grid cell it came from.
  std::size_t grid_h = 0, grid_w = 0, windows = 1;
  std::vector<std::size_t> token_cell;
};

// ---------------------------------------------------------------------------
// Building blocks

/// Query/key/value/output projections of one attention layer. The key
/// projection has no bias (a per-query constant under softmax); `bk` may be
/// left undefined.
template <typename T>
struct AttentionParams {
  BasicTensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  std::size_t heads = 1;
};

/// softmax(Q·Kᵀ/√d_k [+ mask])·V for Q, K, V of shape [B, h, n, d_k].
/// `mask`, when given, is a constant additive tensor of shape [B·h, n, n].
template <typename T>
BasicTensor<T> scaled_dot_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                                    const BasicTensor<T>* mask = nullptr, BasicTensor<T>* weights_out = nullptr) {
  detail::require_rank("scaled_dot_attention", q.shape(), 4);
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw ShapeError("scaled_dot_attention: Q/K/V shapes differ " + shape_str(q.shape()) + " " + shape_str(k.shape()) + " " +
                     shape_str(v.shape()));
  }
  const std::size_t B = q.dim(0), h = q.dim(1), n = q.dim(2), dk = q.dim(3);
  if (dk < 1) throw ShapeError("scaled_dot_attention: d_k must be >= 1");
  auto q3 = ops::reshape(q, {B * h, n, dk});
  auto kt = ops::transpose(ops::reshape(k, {B * h, n, dk}), {0, 2, 1});
  auto scores = ops::scale(ops::matmul(q3, kt), 1.0 / std::sqrt(static_cast<double>(dk)));
  if (mask) scores = ops::add(scores, *mask);
  auto w = ops::softmax(scores);
  if (weights_out) *weights_out = ops::reshape(w, {B, h, n, n});
  auto out = ops::matmul(w, ops::reshape(v, {B * h, n, dk}));
  return ops::reshape(out, {B, h, n, dk});
}

namespace detail {

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  return ops::add_bias(ops::matmul(x, w), b, x.rank() - 1);
}

}  // namespace detail

/// Multi-head self-attention over tokens [B, n, D].
template <typename T>
BasicTensor<T> multi_head_attention(const BasicTensor<T>& x, const AttentionParams<T>& p, const BasicTensor<T>* mask = nullptr,
                                    BasicTensor<T>* weights_out = nullptr) {
  detail::require_rank("multi_head_attention", x.shape(), 3);
  const std::size_t B = x.dim(0), n = x.dim(1), D = x.dim(2), h = p.heads;
  if (h == 0 || D % h != 0) throw ShapeError("multi_head_attention: dim " + std::to_string(D) + " not divisible by heads");
  const std::size_t dk = D / h;
  auto split = [&](const BasicTensor<T>& t) { return ops::transpose(ops::reshape(t, {B, n, h, dk}), {0, 2, 1, 3}); };
  auto q = split(detail::linear(x, p.wq, p.bq));
  auto k = split(p.bk.defined() ? detail::linear(x, p.wk, p.bk) : ops::matmul(x, p.wk));
  auto v = split(detail::linear(x, p.wv, p.bv));
  auto o = scaled_dot_attention(q, k, v, mask, weights_out);
  auto merged = ops::reshape(ops::transpose(o, {0, 2, 1, 3}), {B, n, D});
  return detail::linear(merged, p.wo, p.bo);
}

namespace detail {

inline std::vector<std::size_t> roll_indices(std::size_t n, std::size_t shift, bool forward) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = forward ? (i + shift) % n : (i + n - shift % n) % n;
  return idx;
}

// Attention mask for shifted windows: tokens from different pre-roll regions
// may not attend to each other. Returns [windows, n, n] of 0 / -1e9.
inline std::vector<double> shifted_window_mask(std::size_t H, std::size_t W, std::size_t ws, std::size_t shift) {
  std::vector<int> region(H * W);
  auto band = [&](std::size_t i, std::size_t len) { return i < len - ws ? 0 : (i < len - shift ? 1 : 2); };
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) region[y * W + x] = band(y, H) * 3 + band(x, W);
  const std::size_t nwy = H / ws, nwx = W / ws, n = ws * ws;
  std::vector<double> mask(nwy * nwx * n * n, 0.0);
  for (std::size_t wy = 0; wy < nwy; ++wy)
    for (std::size_t wx = 0; wx < nwx; ++wx)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const int ri = region[(wy * ws + i / ws) * W + wx * ws + i % ws];
          const int rj = region[(wy * ws + j / ws) * W + wx * ws + j % ws];
          if (ri != rj) mask[((wy * nwx + wx) * n + i) * n + j] = -1e9;
        }
  return mask;
}

}  // namespace detail

/// Window self-attention over a token grid [B, H, W, C]. With shift > 0 the
/// grid is cyclically rolled by -shift before partitioning (cross-boundary
/// pairs masked) and rolled back afterwards.
template <typename T>
BasicTensor<T> shifted_window_attention(const BasicTensor<T>& x, std::size_t window, std::size_t shift, const AttentionParams<T>& p,
                                        ForwardTrace<T>* trace = nullptr) {
  detail::require_rank("shifted_window_attention", x.shape(), 4);
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  if (window == 0 || H % window != 0 || W % window != 0) {
    throw ShapeError("shifted_window_attention: grid " + std::to_string(H) + "x" + std::to_string(W) + " not divisible by window " +
                     std::to_string(window));
  }
  if (shift >= window) throw AttributeError("shifted_window_attention: shift must be smaller than the window");
  const std::size_t nwy = H / window, nwx = W / window, nw = nwy * nwx, n = window * window;
  BasicTensor<T> h = x;
  if (shift > 0) {
    h = ops::gather(h, 1, detail::roll_indices(H, shift, true));
    h = ops::gather(h, 2, detail::roll_indices(W, shift, true));
  }
  auto win = ops::reshape(ops::transpose(ops::reshape(h, {B, nwy, window, nwx, window, C}), {0, 1, 3, 2, 4, 5}), {B * nw, n, C});
  BasicTensor<T> mask;
  if (shift > 0) {
    const auto m = detail::shifted_window_mask(H, W, window, shift);
    std::vector<T> full(B * nw * p.heads * n * n);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t w = 0; w < nw; ++w)
        for (std::size_t hd = 0; hd < p.heads; ++hd)
          std::copy_n(m.begin() + static_cast<long>(w * n * n), n * n, full.begin() + static_cast<long>(((b * nw + w) * p.heads + hd) * n * n));
    mask = BasicTensor<T>::from({B * nw * p.heads, n, n}, std::move(full));
  }
  BasicTensor<T> weights;
  auto a = multi_head_attention(win, p, shift > 0 ? &mask : nullptr, trace ? &weights : nullptr);
  auto merged = ops::reshape(ops::transpose(ops::reshape(a, {B, nwy, nwx, window, window, C}), {0, 1, 3, 2, 4, 5}), {B, H, W, C});
  if (shift > 0) {
    merged = ops::gather(merged, 1, detail::roll_indices(H, shift, false));
    merged = ops::gather(merged, 2, detail::roll_indices(W, shift, false));
  }
  if (trace) {
    trace->attention = weights;
    trace->grid_h = H;
    trace->grid_w = W;
    trace->windows = nw;
    trace->token_cell.assign(nw * n, 0);
    for (std::size_t wy = 0; wy < nwy; ++wy)
      for (std::size_t wx = 0; wx < nwx; ++wx)
        for (std::size_t i = 0; i < n; ++i) {
          // position in the rolled grid, then back to the original grid
          const std::size_t ry = wy * window + i / window, rx = wx * window + i % window;
          const std::size_t oy = (ry + shift) % H, ox = (rx + shift) % W;
          trace->token_cell[(wy * nwx + wx) * n + i] = oy * W + ox;
        }
  }
  return merged;
}

// ---------------------------------------------------------------------------
// Construction

namespace detail {

template <typename T>
class Builder {
 public:
  Builder(BasicModel<T>& m, std::uint64_t seed) : m_(m), rng_(seed) {}

  void conv(const std::string& name, std::size_t co, std::size_t ci, std::size_t k, bool bias = true) {
    kaiming(name + ".weight", {co, ci, k, k}, ci * k * k);
    if (bias) zeros(name + ".bias", {co});
  }
  void depthwise(const std::string& name, std::size_t c, std::size_t k) {
    kaiming(name + ".weight", {c, 1, k, k}, k * k);
    zeros(name + ".bias", {c});
  }
  void linear(const std::string& name, std::size_t in, std::size_t out) {
    kaiming(name + ".weight", {in, out}, in);
    zeros(name + ".bias", {out});
  }
  void layer_norm(const std::string& name, std::size_t d) {
    m_.add_param(name + ".gamma", BasicTensor<T>::full({d}, T(1)), true, false);
    zeros(name + ".beta", {d});
  }
  void batch_norm(const std::string& name, std::size_t c) {
    layer_norm(name, c);
    m_.add_param(name + ".running_mean", BasicTensor<T>::zeros({c}), false, false);
    m_.add_param(name + ".running_var", BasicTensor<T>::full({c}, T(1)), false, false);
  }
  void attention(const std::string& name, std::size_t d) {
    linear(name + ".q", d, d);
    kaiming(name + ".k.weight", {d, d}, d);
    linear(name + ".v", d, d);
    linear(name + ".o", d, d);
  }
  void embedding(const std::string& name, Shape shape) {
    std::vector<T> v(numel_of(shape));
    for (auto& e : v) e = static_cast<T>(rng_.truncated_normal(0.02));
    m_.add_param(name, BasicTensor<T>::from(std::move(shape), std::move(v)), true, false);
  }
  void layer(std::string desc) { m_.topology.push_back(std::move(desc)); }
  /// Uniform bound is gain·√(1/fan_in); √6 is He-uniform, √3 keeps unit variance through a linear map.
  void set_gain(double g) { gain_ = g; }

 private:
  void kaiming(const std::string& name, Shape shape, std::size_t fan_in) {
    const double bound = gain_ / std::sqrt(static_cast<double>(fan_in));
    std::vector<T> v(numel_of(shape));
    for (auto& e : v) e = static_cast<T>(rng_.uniform(-bound, bound));
    m_.add_param(name, BasicTensor<T>::from(std::move(shape), std::move(v)), true, true);
  }
  void zeros(const std::string& name, Shape shape) { m_.add_param(name, BasicTensor<T>::zeros(std::move(shape)), true, false); }

  BasicModel<T>& m_;
  Rng rng_;
  double gain_ = std::sqrt(6.0);
};

template <typename T>
void build_transformer_block(Builder<T>& b, const std::string& name, std::size_t d, std::size_t mlp_ratio) {
  b.layer_norm(name + ".ln1", d);
  b.attention(name + ".attn", d);
  b.layer_norm(name + ".ln2", d);
  b.linear(name + ".fc1", d, d * mlp_ratio);
  b.linear(name + ".fc2", d * mlp_ratio, d);
}

}  // namespace detail

/// Builds a model with deterministic initialisation from cfg.seed:
/// Kaiming-uniform conv/linear weights, truncated-normal(0.02) embeddings,
/// zero biases and norm offsets, unit norm scales.
template <typename T = float>
BasicModel<T> build(ModelKind kind, const ModelConfig& cfg) {
  validate_config(kind, cfg);
  BasicModel<T> m;
  m.kind = kind;
  m.config = cfg;
  detail::Builder<T> b(m, hash_combine(cfg.seed, static_cast<std::uint64_t>(kind) + 101));
  const std::size_t S = cfg.input_side;
  switch (kind) {
    case ModelKind::BaseCNN: {
      std::size_t in = 1, side = S;
      for (std::size_t i = 0; i < 4; ++i) {
        b.conv("conv" + std::to_string(i + 1), cfg.channels[i], in, 3);
        b.layer("conv3x3(" + std::to_string(in) + "->" + std::to_string(cfg.channels[i]) + ") relu maxpool2");
        in = cfg.channels[i];
        side /= 2;
      }
      b.layer("flatten");
      b.linear("fc1", in * side * side, cfg.hidden);
      b.layer("linear(" + std::to_string(in * side * side) + "->" + std::to_string(cfg.hidden) + ") relu");
      b.linear("fc2", cfg.hidden, 2);
      b.layer("linear(" + std::to_string(cfg.hidden) + "->2)");
      m.gradcam_hook = "conv4";
      break;
    }
    case ModelKind::ResNetLite: {
      b.conv("stem", cfg.channels[0], 1, 3);
      b.batch_norm("stem.bn", cfg.channels[0]);
      b.layer("conv3x3/2 bn relu maxpool2");
      std::size_t in = cfg.channels[0];
      for (std::size_t s = 0; s < cfg.channels.size(); ++s) {
        for (std::size_t k = 0; k < cfg.depths[s]; ++k) {
          const std::string n = "s" + std::to_string(s) + ".b" + std::to_string(k);
          const std::size_t out = cfg.channels[s];
          b.batch_norm(n + ".bn1", in);
          b.conv(n + ".conv1", out, in, 3);
          b.batch_norm(n + ".bn2", out);
          b.conv(n + ".conv2", out, out, 3);
          if (in != out || (s > 0 && k == 0)) b.conv(n + ".proj", out, in, 1);
          b.layer("residual(" + std::to_string(in) + "->" + std::to_string(out) + (s > 0 && k == 0 ? ", stride 2" : "") + ")");
          in = out;
        }
      }
      b.batch_norm("final.bn", in);
      b.layer("bn relu global_avg_pool");
      b.linear("head", in, 2);
      b.layer("linear(" + std::to_string(in) + "->2)");
      m.gradcam_hook = "final.bn+relu";
      break;
    }
    case ModelKind::ViTLite: {
      const std::size_t grid = S / cfg.patch, D = cfg.embed_dim;
      b.conv("patch", D, 1, cfg.patch);
      b.embedding("pos", {grid * grid, D});
      b.layer("patch_embed(" + std::to_string(cfg.patch) + ") -> " + std::to_string(grid * grid) + " tokens + positional");
      for (std::size_t i = 0; i < cfg.depth; ++i) {
        detail::build_transformer_block(b, "blk" + std::to_string(i), D, cfg.mlp_ratio);
        b.layer("prenorm_block(" + std::to_string(D) + ", heads " + std::to_string(cfg.heads) + ")");
      }
      b.layer_norm("norm", D);
      b.linear("head", D, 2);
      b.layer("layer_norm mean_pool linear(" + std::to_string(D) + "->2)");
      m.gradcam_hook = "final token grid";
      break;
    }
    case ModelKind::SwinLite: {
      std::size_t grid = S / cfg.patch, D = cfg.embed_dim;
      b.conv("patch", D, 1, cfg.patch);
      b.layer_norm("patch.ln", D);
      b.embedding("pos", {grid * grid, D});
      b.layer("patch_embed(" + std::to_string(cfg.patch) + ") layer_norm + positional");
      for (std::size_t s = 0; s < cfg.depths.size(); ++s) {
        for (std::size_t k = 0; k < cfg.depths[s]; ++k) {
          detail::build_transformer_block(b, "s" + std::to_string(s) + ".b" + std::to_string(k), D, cfg.mlp_ratio);
          const std::size_t ws = std::min(cfg.window, grid);
          b.layer("swin_block(grid " + std::to_string(grid) + ", window " + std::to_string(ws) + ", shift " +
                  std::to_string(k % 2 == 1 && grid > ws ? ws / 2 : 0) + ")");
        }
        if (s + 1 < cfg.depths.size()) {
          b.layer_norm("merge" + std::to_string(s) + ".ln", 4 * D);
          b.linear("merge" + std::to_string(s) + ".reduce", 4 * D, 2 * D);
          b.layer("patch_merging(" + std::to_string(D) + "->" + std::to_string(2 * D) + ")");
          grid /= 2;
          D *= 2;
        }
      }
      b.layer_norm("norm", D);
      b.linear("head", D, 2);
      b.layer("layer_norm mean_pool linear(" + std::to_string(D) + "->2)");
      m.gradcam_hook = "final token grid";
      break;
    }
    case ModelKind::DenseTransformer: {
      const std::size_t stem = cfg.channels[0], growth = cfg.channels[1], D = cfg.embed_dim;
      b.conv("stem", stem, 1, 3);
      b.layer("conv3x3/2 relu avgpool2");
      std::size_t width = stem;
      for (std::size_t i = 0; i < cfg.depths[0]; ++i) {
        b.conv("dense" + std::to_string(i), growth, width, 3);
        b.layer("dense_conv3x3(" + std::to_string(width) + "->" + std::to_string(growth) + ") relu concat");
        width += growth;
      }
      b.conv("transition", D, width, 1);
      b.layer("pointwise(" + std::to_string(width) + "->" + std::to_string(D) + ") relu avgpool2");
      const std::size_t grid = S / 8;
      b.embedding("pos", {grid * grid, D});
      for (std::size_t i = 0; i < cfg.depth; ++i) {
        detail::build_transformer_block(b, "blk" + std::to_string(i), D, cfg.mlp_ratio);
        b.layer("prenorm_block(" + std::to_string(D) + ", heads " + std::to_string(cfg.heads) + ")");
      }
      b.layer_norm("norm", D);
      b.linear("head", D, 2);
      b.layer("layer_norm mean_pool linear(" + std::to_string(D) + "->2)");
      m.gradcam_hook = "transition";
      break;
    }
    case ModelKind::ConvMixerLite: {
      const std::size_t D = cfg.embed_dim;
      // With frozen batch-norm statistics He-uniform lets the GELU means pile
      // up along the residual stream (logits ~30 at init).
      b.set_gain(std::sqrt(3.0));
      b.conv("patch", D, 1, cfg.patch);
      b.batch_norm("patch.bn", D);
      b.layer("patch_conv(" + std::to_string(cfg.patch) + ") gelu bn");
      for (std::size_t i = 0; i < cfg.depth; ++i) {
        const std::string n = "mix" + std::to_string(i);
        b.depthwise(n + ".dw", D, cfg.kernel);
        b.batch_norm(n + ".bn1", D);
        b.conv(n + ".pw", D, D, 1);
        b.batch_norm(n + ".bn2", D);
        b.layer("residual(depthwise" + std::to_string(cfg.kernel) + " gelu bn) pointwise gelu bn");
      }
      b.linear("head", D, 2);
      b.layer("global_avg_pool linear(" + std::to_string(D) + "->2)");
      m.gradcam_hook = "mix" + std::to_string(cfg.depth - 1) + ".pw";
      break;
    }
    case ModelKind::ConvNeXtLite: {
      b.conv("stem", cfg.channels[0], 1, cfg.patch);
      b.layer_norm("stem.ln", cfg.channels[0]);
      b.layer("patchify(" + std::to_string(cfg.patch) + ") layer_norm");
      for (std::size_t s = 0; s < cfg.channels.size(); ++s) {
        const std::size_t C = cfg.channels[s];
        if (s > 0) {
          b.layer_norm("down" + std::to_string(s) + ".ln", cfg.channels[s - 1]);
          b.conv("down" + std::to_string(s), C, cfg.channels[s - 1], 2);
          b.layer("layer_norm conv2x2/2(" + std::to_string(cfg.channels[s - 1]) + "->" + std::to_string(C) + ")");
        }
        for (std::size_t k = 0; k < cfg.depths[s]; ++k) {
          const std::string n = "s" + std::to_string(s) + ".b" + std::to_string(k);
          b.depthwise(n + ".dw", C, cfg.kernel);
          b.layer_norm(n + ".ln", C);
          b.linear(n + ".pw1", C, cfg.mlp_ratio * C);
          b.linear(n + ".pw2", cfg.mlp_ratio * C, C);
          b.layer("convnext_block(depthwise" + std::to_string(cfg.kernel) + ", layer_norm, " + std::to_string(cfg.mlp_ratio) + "x mlp)");
        }
      }
      b.layer_norm("norm", cfg.channels.back());
      b.linear("head", cfg.channels.back(), 2);
      b.layer("global_avg_pool layer_norm linear(" + std::to_string(cfg.channels.back()) + "->2)");
      m.gradcam_hook = "last stage output";
      break;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward passes

namespace detail {

template <typename T>
struct Fwd {
  const BasicModel<T>& m;
  ForwardTrace<T>* trace;

  const BasicTensor<T>& p(const std::string& n) const { return m.param(n); }

  BasicTensor<T> conv(const std::string& n, const BasicTensor<T>& x, std::size_t stride, std::size_t pad) const {
    const auto& w = p(n + ".weight");
    const BasicTensor<T>* bias = m.has_param(n + ".bias") ? &p(n + ".bias") : nullptr;
    if (w.dim(2) == 1 && w.dim(3) == 1 && stride == 1 && pad == 0) return ops::pointwise_conv2d(x, w, bias);
    return ops::conv2d(x, w, bias, stride, pad);
  }
  BasicTensor<T> depthwise(const std::string& n, const BasicTensor<T>& x) const {
    const auto& w = p(n + ".weight");
    return ops::depthwise_conv2d(x, w, &p(n + ".bias"), 1, w.dim(2) / 2);
  }
  BasicTensor<T> linear(const std::string& n, const BasicTensor<T>& x) const {
    return detail::linear(x, p(n + ".weight"), p(n + ".bias"));
  }
  BasicTensor<T> ln(const std::string& n, const BasicTensor<T>& x) const { return ops::layer_norm(x, p(n + ".gamma"), p(n + ".beta")); }
  BasicTensor<T> bn(const std::string& n, const BasicTensor<T>& x) const {
    return ops::batch_norm(x, p(n + ".gamma"), p(n + ".beta"), p(n + ".running_mean"), p(n + ".running_var"));
  }
  /// Layer norm across channels of an NCHW tensor.
  BasicTensor<T> ln_channels(const std::string& n, const BasicTensor<T>& x) const {
    return ops::transpose(ln(n, ops::transpose(x, {0, 2, 3, 1})), {0, 3, 1, 2});
  }
  AttentionParams<T> attn(const std::string& n, std::size_t heads) const {
    return {p(n + ".q.weight"), p(n + ".q.bias"), p(n + ".k.weight"), BasicTensor<T>{},
            p(n + ".v.weight"), p(n + ".v.bias"), p(n + ".o.weight"), p(n + ".o.bias"), heads};
  }
  BasicTensor<T> mlp(const std::string& n, const BasicTensor<T>& x) const {
    return linear(n + ".fc2", ops::dropout_identity(ops::gelu(linear(n + ".fc1", x))));
  }

  /// Pre-norm encoder block over tokens [B, n, D]; records attention when last.
  BasicTensor<T> encoder_block(const std::string& n, BasicTensor<T> x, std::size_t heads, bool last, std::size_t gh,
                               std::size_t gw) const {
    BasicTensor<T> weights;
    const bool record = last && trace;
    auto a = multi_head_attention(ln(n + ".ln1", x), attn(n + ".attn", heads), static_cast<const BasicTensor<T>*>(nullptr), record ? &weights : nullptr);
    x = ops::add(x, a);
    x = ops::add(x, mlp(n, ln(n + ".ln2", x)));
    if (record) {
      trace->attention = weights;
      trace->grid_h = gh;
      trace->grid_w = gw;
      trace->windows = 1;
      trace->token_cell.resize(gh * gw);
      for (std::size_t i = 0; i < gh * gw; ++i) trace->token_cell[i] = i;
    }
    return x;
  }

  /// Tokens [B, n, D] on a gh×gw grid -> hook [B, D, gh, gw] -> tokens again,
  /// so the hook lies on the path to the logits.
  BasicTensor<T> token_hook(const BasicTensor<T>& x, std::size_t gh, std::size_t gw) const {
    if (!trace) return x;
    const std::size_t B = x.dim(0), D = x.dim(2);
    trace->hook = ops::reshape(ops::transpose(x, {0, 2, 1}), {B, D, gh, gw});
    return ops::transpose(ops::reshape(trace->hook, {B, D, gh * gw}), {0, 2, 1});
  }

  BasicTensor<T> set_hook(BasicTensor<T> x) const {
    if (trace) trace->hook = x;
    return x;
  }

  BasicTensor<T> head_from_tokens(const BasicTensor<T>& x) const {
    return linear("head", ops::mean_axis(ln("norm", x), 1));
  }

  // Patch/stem conv output [B, D, g, g] -> tokens [B, g*g, D]
  static BasicTensor<T> to_tokens(const BasicTensor<T>& x) {
    const std::size_t B = x.dim(0), D = x.dim(1), n = x.dim(2) * x.dim(3);
    return ops::transpose(ops::reshape(x, {B, D, n}), {0, 2, 1});
  }
};

template <typename T>
BasicTensor<T> forward_basecnn(const Fwd<T>& f, BasicTensor<T> x) {
  for (int i = 1; i <= 4; ++i) {
    x = ops::relu(f.conv("conv" + std::to_string(i), x, 1, 1));
    if (i == 4) x = f.set_hook(x);
    x = ops::max_pool2d(x, 2, 2);
  }
  x = ops::relu(f.linear("fc1", ops::flatten(x)));
  return f.linear("fc2", ops::dropout_identity(x));
}

template <typename T>
BasicTensor<T> residual_unit(const Fwd<T>& f, const std::string& n, const BasicTensor<T>& x, std::size_t stride) {
  auto h = f.conv(n + ".conv1", ops::relu(f.bn(n + ".bn1", x)), stride, 1);
  h = f.conv(n + ".conv2", ops::relu(f.bn(n + ".bn2", h)), 1, 1);
  BasicTensor<T> shortcut = f.m.has_param(n + ".proj.weight") ? f.conv(n + ".proj", x, stride, 0) : x;
  return ops::add(h, shortcut);
}

template <typename T>
BasicTensor<T> forward_resnet(const Fwd<T>& f, BasicTensor<T> x) {
  const auto& cfg = f.m.config;
  x = ops::relu(f.bn("stem.bn", f.conv("stem", x, 2, 1)));
  x = ops::max_pool2d(x, 2, 2);
  for (std::size_t s = 0; s < cfg.channels.size(); ++s)
    for (std::size_t k = 0; k < cfg.depths[s]; ++k)
      x = residual_unit(f, "s" + std::to_string(s) + ".b" + std::to_string(k), x, s > 0 && k == 0 ? 2 : 1);
  x = f.set_hook(ops::relu(f.bn("final.bn", x)));
  return f.linear("head", ops::global_avg_pool(x));
}

template <typename T>
BasicTensor<T> forward_vit(const Fwd<T>& f, const BasicTensor<T>& x) {
  const auto& cfg = f.m.config;
  const std::size_t g = cfg.input_side / cfg.patch;
  auto t = ops::embedding_add(Fwd<T>::to_tokens(f.conv("patch", x, cfg.patch, 0)), f.p("pos"));
  for (std::size_t i = 0; i < cfg.depth; ++i) t = f.encoder_block("blk" + std::to_string(i), t, cfg.heads, i + 1 == cfg.depth, g, g);
  t = f.token_hook(t, g, g);
  return f.head_from_tokens(t);
}

template <typename T>
BasicTensor<T> forward_swin(const Fwd<T>& f, const BasicTensor<T>& x) {
  const auto& cfg = f.m.config;
  std::size_t g = cfg.input_side / cfg.patch, D = cfg.embed_dim, heads = cfg.heads;
  const std::size_t B = x.dim(0);
  auto t = ops::embedding_add(f.ln("patch.ln", Fwd<T>::to_tokens(f.conv("patch", x, cfg.patch, 0))), f.p("pos"));
  auto grid = ops::reshape(t, {B, g, g, D});
  for (std::size_t s = 0; s < cfg.depths.size(); ++s) {
    const std::size_t ws = std::min(cfg.window, g);
    for (std::size_t k = 0; k < cfg.depths[s]; ++k) {
      const std::string n = "s" + std::to_string(s) + ".b" + std::to_string(k);
      const std::size_t shift = (k % 2 == 1 && g > ws) ? ws / 2 : 0;
      const bool last = s + 1 == cfg.depths.size() && k + 1 == cfg.depths[s];
      auto a = shifted_window_attention(f.ln(n + ".ln1", grid), ws, shift, f.attn(n + ".attn", heads), last ? f.trace : nullptr);
      grid = ops::add(grid, a);
      grid = ops::add(grid, f.mlp(n, f.ln(n + ".ln2", grid)));
    }
    if (s + 1 < cfg.depths.size()) {
      const std::string n = "merge" + std::to_string(s);
      auto merged = ops::reshape(ops::transpose(ops::reshape(grid, {B, g / 2, 2, g / 2, 2, D}), {0, 1, 3, 4, 2, 5}), {B, g / 2, g / 2, 4 * D});
      grid = f.linear(n + ".reduce", f.ln(n + ".ln", merged));
      g /= 2;
      D *= 2;
      heads *= 2;
    }
  }
  auto tokens = f.token_hook(ops::reshape(grid, {B, g * g, D}), g, g);
  return f.head_from_tokens(tokens);
}

template <typename T>
BasicTensor<T> forward_densetrans(const Fwd<T>& f, const BasicTensor<T>& x) {
  const auto& cfg = f.m.config;
  auto h = ops::avg_pool2d(ops::relu(f.conv("stem", x, 2, 1)), 2, 2);
  for (std::size_t i = 0; i < cfg.depths[0]; ++i) {
    auto y = ops::relu(f.conv("dense" + std::to_string(i), h, 1, 1));
    h = ops::concat<T>({h, y}, 1);
  }
  h = f.set_hook(ops::relu(f.conv("transition", h, 1, 0)));
  h = ops::avg_pool2d(h, 2, 2);
  const std::size_t g = cfg.input_side / 8;
  auto t = ops::embedding_add(Fwd<T>::to_tokens(h), f.p("pos"));
  for (std::size_t i = 0; i < cfg.depth; ++i) t = f.encoder_block("blk" + std::to_string(i), t, cfg.heads, i + 1 == cfg.depth, g, g);
  return f.head_from_tokens(t);
}

template <typename T>
BasicTensor<T> forward_convmixer(const Fwd<T>& f, const BasicTensor<T>& x) {
  const auto& cfg = f.m.config;
  auto h = f.bn("patch.bn", ops::gelu(f.conv("patch", x, cfg.patch, 0)));
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string n = "mix" + std::to_string(i);
    h = ops::add(h, f.bn(n + ".bn1", ops::gelu(f.depthwise(n + ".dw", h))));
    h = f.bn(n + ".bn2", ops::gelu(f.conv(n + ".pw", h, 1, 0)));
  }
  h = f.set_hook(h);
  return f.linear("head", ops::global_avg_pool(h));
}

template <typename T>
BasicTensor<T> forward_convnext(const Fwd<T>& f, const BasicTensor<T>& x) {
  const auto& cfg = f.m.config;
  auto h = f.ln_channels("stem.ln", f.conv("stem", x, cfg.patch, 0));
  for (std::size_t s = 0; s < cfg.channels.size(); ++s) {
    if (s > 0) h = f.conv("down" + std::to_string(s), f.ln_channels("down" + std::to_string(s) + ".ln", h), 2, 0);
    for (std::size_t k = 0; k < cfg.depths[s]; ++k) {
      const std::string n = "s" + std::to_string(s) + ".b" + std::to_string(k);
      auto y = ops::transpose(f.depthwise(n + ".dw", h), {0, 2, 3, 1});
      y = f.linear(n + ".pw2", ops::gelu(f.linear(n + ".pw1", f.ln(n + ".ln", y))));
      h = ops::add(h, ops::transpose(y, {0, 3, 1, 2}));
    }
  }
  h = f.set_hook(h);
  return f.linear("head", f.ln("norm", ops::global_avg_pool(h)));
}

}  // namespace detail

/// Raw logits [B, 2] for a batch [B, 1, S, S].
template <typename T>
BasicTensor<T> forward(const BasicModel<T>& m, const BasicTensor<T>& batch, ForwardTrace<T>* trace = nullptr) {
  const std::size_t S = m.config.input_side;
  if (batch.rank() != 4 || batch.dim(1) != 1 || batch.dim(2) != S || batch.dim(3) != S) {
    throw ShapeError("forward: expected [B,1," + std::to_string(S) + "," + std::to_string(S) + "], got " + shape_str(batch.shape()));
  }
  detail::Fwd<T> f{m, trace};
  switch (m.kind) {
    case ModelKind::BaseCNN: return detail::forward_basecnn(f, batch);
    case ModelKind::ResNetLite: return detail::forward_resnet(f, batch);
    case ModelKind::ViTLite: return detail::forward_vit(f, batch);
    case ModelKind::SwinLite: return detail::forward_swin(f, batch);
    case ModelKind::DenseTransformer: return detail::forward_densetrans(f, batch);
    case ModelKind::ConvMixerLite: return detail::forward_convmixer(f, batch);
    case ModelKind::ConvNeXtLite: return detail::forward_convnext(f, batch);
  }
  throw std::logic_error("forward: unknown model kind");
}

/// Pre-activation residual unit F(x) + shortcut(x) on NCHW input, using the
/// parameters of block `name` in `m`. Exposed for probing the skip path.
template <typename T>
BasicTensor<T> residual_block(const BasicModel<T>& m, const std::string& name, const BasicTensor<T>& x, std::size_t stride = 1) {
  detail::Fwd<T> f{m, nullptr};
  return detail::residual_unit(f, name, x, stride);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (little endian): "MMFW", u32 version, u8 kind, u32-length config
// text, u32 parameter count, then per parameter: u32-length name, u32 rank,
// u32 dims[rank], f32 data.

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Code { Io, BadMagic, VersionMismatch, Truncated, KindMismatch, BadConfig, ShapeMismatch };
  CheckpointError(Code code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& buf) : buf_(buf) {}
  const char* take(std::size_t n) {
    if (pos_ + n > buf_.size()) throw CheckpointError(CheckpointError::Code::Truncated, "checkpoint truncated");
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(4));
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) | (static_cast<std::uint32_t>(p[2]) << 16) |
           (static_cast<std::uint32_t>(p[3]) << 24);
  }
  std::string str() {
    const auto n = u32();
    return std::string(take(n), n);
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Model& m) {
  std::string out = "MMFW";
  detail::put_u32(out, kCheckpointVersion);
  out.push_back(static_cast<char>(m.kind));
  const auto text = m.config.to_text();
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  detail::put_u32(out, static_cast<std::uint32_t>(m.params.size()));
  for (const auto& p : m.params) {
    detail::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    detail::put_u32(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : p.tensor.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline Model deserialize_checkpoint(const std::string& buf, std::optional<ModelKind> expected = std::nullopt) {
  using Code = CheckpointError::Code;
  detail::Reader r(buf);
  if (buf.size() < 4 || std::string_view(buf.data(), 4) != "MMFW") {
    if (buf.size() < 4 && std::string_view("MMFW").starts_with(buf)) throw CheckpointError(Code::Truncated, "checkpoint truncated");
    throw CheckpointError(Code::BadMagic, "checkpoint: bad magic");
  }
  r.take(4);
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError(Code::VersionMismatch, "checkpoint: format version " + std::to_string(version) + ", expected " +
                                                     std::to_string(kCheckpointVersion));
  }
  const auto tag = static_cast<std::uint8_t>(*r.take(1));
  if (tag >= kAllModels.size()) throw CheckpointError(Code::BadConfig, "checkpoint: unknown model kind tag " + std::to_string(tag));
  const auto kind = static_cast<ModelKind>(tag);
  if (expected && *expected != kind) {
    throw CheckpointError(Code::KindMismatch, "checkpoint holds a " + std::string(model_name(kind)) + " model, expected " +
                                                  std::string(model_name(*expected)));
  }
  ModelConfig cfg;
  Model m;
  const auto text = r.str();
  try {
    cfg = ModelConfig::from_text(text);
    m = build<float>(kind, cfg);
  } catch (const ConfigError& e) {
    throw CheckpointError(Code::BadConfig, std::string("checkpoint: ") + e.what());
  }
  const auto count = r.u32();
  if (count != m.params.size()) {
    throw CheckpointError(Code::ShapeMismatch, "checkpoint: " + std::to_string(count) + " parameters, config implies " +
                                                   std::to_string(m.params.size()));
  }
  for (auto& p : m.params) {
    const auto name = r.str();
    if (name != p.name) throw CheckpointError(Code::ShapeMismatch, "checkpoint: parameter '" + name + "' where '" + p.name + "' expected");
    const auto rank = r.u32();
    if (rank > 8) throw CheckpointError(Code::ShapeMismatch, "checkpoint: implausible rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    if (shape != p.tensor.shape()) {
      throw CheckpointError(Code::ShapeMismatch, "checkpoint: " + name + " has shape " + shape_str(shape) + ", config implies " +
                                                     shape_str(p.tensor.shape()));
    }
    const char* raw = r.take(4 * p.tensor.numel());
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[4 * i + b])) << (8 * b);
      dst[i] = std::bit_cast<float>(bits);
    }
  }
  if (!r.done()) throw CheckpointError(Code::ShapeMismatch, "checkpoint: trailing bytes after parameters");
  return m;
}

inline void save_checkpoint(const Model& m, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(m);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(CheckpointError::Code::Io, "cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointError::Code::Io, "write failed for " + path.string());
}

inline Model load_checkpoint(const std::filesystem::path& path, std::optional<ModelKind> expected = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Code::Io, "cannot open checkpoint " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(buf, expected);
}

}  // namespace mammo
