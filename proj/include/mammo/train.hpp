// Loss, AdamW, step-decay schedule and the epoch loop with best-validation
// model selection.
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "mammo/data.hpp"
#include "mammo/enhance.hpp"
#include "mammo/models.hpp"
#include "mammo/random.hpp"
#include "mammo/tensor.hpp"

namespace mammo {

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr0 = 1e-3;
  double gamma = 0.1;
  std::size_t step = 7;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 42;
  /// Per-class loss weights; empty means unweighted.
  std::vector<double> class_weights;

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(lr0 > 0)) throw ConfigError("train: lr0 must be > 0");
    if (!(gamma > 0 && gamma <= 1)) throw ConfigError("train: gamma must be in (0, 1]");
    if (step < 1) throw ConfigError("train: step must be >= 1");
    if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("train: betas must be in [0, 1)");
    if (!(eps > 0)) throw ConfigError("train: eps must be > 0");
    if (!class_weights.empty() && class_weights.size() != 2) throw ConfigError("train: class_weights needs two entries");
  }
};

/// η_t = η₀·γ^⌊t/s⌋, t counted in epochs from 0.
inline double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  return cfg.lr0 * std::pow(cfg.gamma, static_cast<double>(epoch / cfg.step));
}

/// Mean negative log-likelihood of the true class under softmax(logits).
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels, std::span<const double> class_weights = {}) {
  if (logits.rank() != 2 || logits.dim(1) != 2) throw ShapeError("cross_entropy: expected logits [B,2], got " + shape_str(logits.shape()));
  for (int y : labels) {
    if (y != 0 && y != 1) throw AttributeError("cross_entropy: label " + std::to_string(y) + " out of range {0,1}");
  }
  return ops::softmax_cross_entropy(logits, labels, class_weights);
}

using GradientMap = std::map<std::string, std::vector<double>>;

template <typename T>
GradientMap collect_gradients(const BasicModel<T>& m) {
  GradientMap g;
  for (const auto& p : m.params) {
    if (!p.trainable || !p.tensor.has_grad()) continue;
    g[p.name].assign(p.tensor.grad().begin(), p.tensor.grad().end());
  }
  return g;
}

struct AdamWState {
  std::map<std::string, std::vector<double>> m, v;
  std::size_t step = 0;
};

/// One decoupled-weight-decay Adam update. Decay touches only parameters
/// flagged as weight matrices or kernels.
template <typename T>
void adamw_step(BasicModel<T>& model, const GradientMap& grads, AdamWState& state, double lr, const TrainConfig& cfg) {
  for (const auto& p : model.params) {
    if (p.trainable && !grads.contains(p.name)) throw GraphError("adamw_step: no gradient for trainable parameter " + p.name);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& p : model.params) {
    if (!p.trainable) continue;
    const auto& g = grads.at(p.name);
    auto data = p.tensor.mutable_data();
    if (g.size() != data.size()) throw ShapeError("adamw_step: gradient size mismatch for " + p.name);
    auto& m = state.m[p.name];
    auto& v = state.v[p.name];
    if (m.empty()) {
      m.assign(data.size(), 0.0);
      v.assign(data.size(), 0.0);
    }
    const double decay = p.decay ? lr * cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g[i] * g[i];
      double w = static_cast<double>(data[i]);
      w -= decay * w;
      w -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
      data[i] = static_cast<T>(w);
    }
  }
}

// ---------------------------------------------------------------------------
// Prepared (enhanced, resized, normalised) splits

struct PreparedSplit {
  std::size_t side = 0;
  std::vector<float> inputs;  // N × side × side
  std::vector<int> labels;
  std::vector<std::string> ids;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  Tensor batch(std::span<const std::size_t> idx) const {
    const std::size_t per = side * side;
    std::vector<float> data(idx.size() * per);
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy_n(inputs.begin() + static_cast<long>(idx[i] * per), per, data.begin() + static_cast<long>(i * per));
    return Tensor::from({idx.size(), 1, side, side}, std::move(data));
  }
  Tensor item(std::size_t i) const {
    const std::size_t one[1] = {i};
    return batch(one);
  }
};

struct PreparedData {
  PreparedSplit train, val, test;
  Normalization norm;
  EnhancementKind enhancement = EnhancementKind::Original;
};

/// Enhances every image, derives normalisation from the enhanced train split
/// and converts all splits to model inputs.
inline PreparedData prepare_data(const Dataset& ds, EnhancementKind kind, std::size_t side, const EnhanceConfig& ecfg = {}) {
  PreparedData out;
  out.enhancement = kind;
  auto enh = [&](const std::vector<LabeledImage>& v) {
    std::vector<ImageGray> r;
    r.reserve(v.size());
    for (const auto& li : v) r.push_back(enhance(li.image, kind, ecfg));
    return r;
  };
  const auto tr = enh(ds.train), va = enh(ds.val), te = enh(ds.test);
  std::vector<const ImageGray*> ptrs;
  for (const auto& i : tr) ptrs.push_back(&i);
  out.norm = compute_normalization(ptrs, side);
  auto conv = [&](const std::vector<LabeledImage>& src, const std::vector<ImageGray>& imgs, PreparedSplit& dst) {
    dst.side = side;
    dst.inputs.reserve(imgs.size() * side * side);
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      const auto t = to_model_input(imgs[i], side, out.norm);
      dst.inputs.insert(dst.inputs.end(), t.data().begin(), t.data().end());
      dst.labels.push_back(static_cast<int>(src[i].label));
      dst.ids.push_back(src[i].id);
    }
  };
  conv(ds.train, tr, out.train);
  conv(ds.val, va, out.val);
  conv(ds.test, te, out.test);
  return out;
}

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<double> prob_malignant;
  std::vector<int> preds;
};

/// Batched inference without graph recording.
template <typename T>
EvalResult evaluate(const BasicModel<T>& model, const PreparedSplit& split, std::size_t batch_size = 64,
                    std::span<const double> class_weights = {}) {
  NoGradGuard guard;
  EvalResult r;
  double loss_sum = 0.0, weight_sum = 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(split.size(), start + batch_size); ++i) idx.push_back(i);
    auto x = split.batch(idx);
    auto logits = forward(model, x.template cast<T>());
    const auto l = logits.data();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const double z0 = l[2 * b], z1 = l[2 * b + 1];
      const double mx = std::max(z0, z1);
      const double lse = mx + std::log(std::exp(z0 - mx) + std::exp(z1 - mx));
      const int y = split.labels[idx[b]];
      const double w = class_weights.empty() ? 1.0 : class_weights[static_cast<std::size_t>(y)];
      loss_sum += w * (lse - (y == 1 ? z1 : z0));
      weight_sum += w;
      const double p1 = std::exp(z1 - lse);
      r.prob_malignant.push_back(p1);
      const int pred = z1 > z0 ? 1 : 0;
      r.preds.push_back(pred);
      correct += pred == y;
    }
  }
  if (!split.empty()) {
    r.loss = loss_sum / weight_sum;
    r.accuracy = static_cast<double>(correct) / static_cast<double>(split.size());
  }
  return r;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0, train_loss = 0, train_acc = 0, val_loss = 0, val_acc = 0;
  bool operator==(const EpochRecord&) const = default;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
  bool operator==(const TrainHistory&) const = default;
};

struct TrainResult {
  Model model;  // weights from the best validation epoch
  TrainHistory history;
};

/// Index of the first maximum (ties resolve to the earlier epoch).
inline std::size_t select_best_epoch(const std::vector<double>& val_acc) {
  if (val_acc.empty()) throw DataError("select_best_epoch: no epochs");
  std::size_t best = 0;
  for (std::size_t i = 1; i < val_acc.size(); ++i)
    if (val_acc[i] > val_acc[best]) best = i;
  return best;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

inline TrainResult train(Model model, const PreparedData& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.train.empty()) throw DataError("train: empty train split");
  if (data.val.empty()) throw DataError("train: empty val split");
  if (data.train.side != model.config.input_side) throw ShapeError("train: data side does not match model input_side");
  const std::span<const double> cw(cfg.class_weights);
  AdamWState state;
  TrainResult result{model.clone(), {}};
  std::vector<double> val_history;
  std::vector<std::size_t> order(data.train.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(hash_combine(cfg.seed, epoch));
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(data.train.labels[i]);
      auto logits = forward(model, data.train.batch(idx));
      auto loss = cross_entropy(logits, std::span<const int>(labels), cw);
      if (!std::isfinite(loss.item())) {
        throw NumericalError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(start / cfg.batch_size));
      }
      model.zero_grad();
      backward(loss);
      adamw_step(model, collect_gradients(model), state, lr, cfg);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
      for (std::size_t b = 0; b < idx.size(); ++b) correct += (logits.at(2 * b + 1) > logits.at(2 * b) ? 1 : 0) == labels[b];
    }
    model.zero_grad();
    const auto val = evaluate(model, data.val, 64, cw);
    if (!std::isfinite(val.loss)) throw NumericalError("train: non-finite validation loss at epoch " + std::to_string(epoch));
    EpochRecord rec{epoch, lr, loss_sum / static_cast<double>(order.size()), static_cast<double>(correct) / static_cast<double>(order.size()),
                    val.loss, val.accuracy};
    result.history.epochs.push_back(rec);
    val_history.push_back(val.accuracy);
    if (select_best_epoch(val_history) == epoch) result.model = model.clone();
    if (on_epoch) on_epoch(rec);
  }
  result.history.best_epoch = select_best_epoch(val_history);
  result.history.best_val_accuracy = val_history[result.history.best_epoch];
  return result;
}

/// Convenience overload: enhances and normalises `ds` first.
inline TrainResult train(Model model, const Dataset& ds, const TrainConfig& cfg, EnhancementKind kind = EnhancementKind::Original,
                         const EnhanceConfig& ecfg = {}) {
  auto data = prepare_data(ds, kind, model.config.input_side, ecfg);
  return train(std::move(model), data, cfg);
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_history_csv(const std::filesystem::path& path, const TrainHistory& h) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,lr,train_loss,train_acc,val_loss,val_acc\n";
  for (const auto& e : h.epochs) {
    out << e.epoch << ',' << format_double(e.lr) << ',' << format_double(e.train_loss) << ',' << format_double(e.train_acc) << ','
        << format_double(e.val_loss) << ',' << format_double(e.val_acc) << '\n';
  }
}

/// Stores preprocessing metadata in the model config so a checkpoint is
/// self-describing.
inline void attach_metadata(Model& m, const PreparedData& data, const TrainHistory& h) {
  m.config.meta["enhancement"] = std::string(enhancement_name(data.enhancement));
  m.config.meta["norm_mean"] = format_double(data.norm.mean);
  m.config.meta["norm_std"] = format_double(data.norm.std);
  m.config.meta["best_epoch"] = std::to_string(h.best_epoch);
  m.config.meta["val_accuracy"] = format_double(h.best_val_accuracy);
}

inline Normalization normalization_of(const Model& m) {
  Normalization n;
  if (auto it = m.config.meta.find("norm_mean"); it != m.config.meta.end()) n.mean = std::stod(it->second);
  if (auto it = m.config.meta.find("norm_std"); it != m.config.meta.end()) n.std = std::stod(it->second);
  return n;
}

inline EnhancementKind enhancement_of(const Model& m) {
  auto it = m.config.meta.find("enhancement");
  return it == m.config.meta.end() ? EnhancementKind::Original : parse_enhancement(it->second);
}

}  // namespace mammo
