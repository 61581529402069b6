// Tiered ensemble: a primary member decides confident cases alone; cases in
// the escalation band go to every member, probabilities are fused by
// weighted mean and wide disagreement is flagged for human review.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mammo/data.hpp"
#include "mammo/enhance.hpp"
#include "mammo/image.hpp"
#include "mammo/models.hpp"
#include "mammo/train.hpp"

namespace mammo {

class EnsembleError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct EnsembleMember {
  std::string name;
  /// Malignant probability for a raw (unenhanced) image.
  std::function<double(const ImageGray&)> predict;
  std::shared_ptr<std::atomic<std::size_t>> calls = std::make_shared<std::atomic<std::size_t>>(0);

  double operator()(const ImageGray& img) const {
    calls->fetch_add(1);
    return predict(img);
  }
};

enum class Tier { Primary, FullEnsemble };

inline std::string_view tier_name(Tier t) { return t == Tier::Primary ? "primary" : "full_ensemble"; }

struct EnsembleConfig {
  /// members[0] is the primary classifier.
  std::vector<EnsembleMember> members;
  /// Empty: equal weights.
  std::vector<double> weights;
  double divergence_threshold = 0.3;
  double band_lo = 0.2, band_hi = 0.8;

  void validate() const {
    if (members.empty()) throw EnsembleError("ensemble: at least one member required");
    if (!weights.empty() && weights.size() != members.size()) throw EnsembleError("ensemble: one weight per member required");
    double s = 0.0;
    for (double w : weights) {
      if (!(w >= 0) || !std::isfinite(w)) throw EnsembleError("ensemble: weights must be finite and >= 0");
      s += w;
    }
    if (!weights.empty() && !(s > 0)) throw EnsembleError("ensemble: weights must not all be zero");
    if (!(divergence_threshold > 0 && divergence_threshold <= 1)) throw EnsembleError("ensemble: divergence_threshold must be in (0, 1]");
    if (!(band_lo >= 0 && band_lo <= band_hi && band_hi <= 1)) throw EnsembleError("ensemble: escalation band must satisfy 0 <= lo <= hi <= 1");
  }
  double weight(std::size_t i) const { return weights.empty() ? 1.0 : weights[i]; }
};

struct EnsembleDecision {
  int label = 0;
  double fused_prob = 0.0;
  /// Probability per member; members not run (tier 1) hold std::nullopt.
  std::vector<std::optional<double>> member_probs;
  bool flagged = false;
  Tier tier = Tier::Primary;
};

/// Weighted mean over members with positive weight, and the flag rule
/// (max − min over those members > threshold).
inline EnsembleDecision fuse(const std::vector<double>& probs, const std::vector<double>& weights, double threshold) {
  if (probs.size() != weights.size() || probs.empty()) throw EnsembleError("fuse: probabilities and weights must align");
  double num = 0.0, den = 0.0, lo = 1.0, hi = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!(weights[i] > 0)) continue;
    num += weights[i] * probs[i];
    den += weights[i];
    lo = std::min(lo, probs[i]);
    hi = std::max(hi, probs[i]);
    ++used;
  }
  if (!(den > 0)) throw EnsembleError("fuse: weights must not all be zero");
  EnsembleDecision d;
  d.tier = Tier::FullEnsemble;
  d.fused_prob = used == 1 ? lo : num / den;
  d.label = d.fused_prob >= 0.5 ? 1 : 0;
  d.flagged = hi - lo > threshold;
  d.member_probs.assign(probs.begin(), probs.end());
  return d;
}

/// Closed band: a primary probability equal to either edge escalates.
inline bool in_escalation_band(const EnsembleConfig& cfg, double p) { return p >= cfg.band_lo && p <= cfg.band_hi; }

inline EnsembleDecision predict(const EnsembleConfig& cfg, const ImageGray& img) {
  cfg.validate();
  const double p0 = cfg.members[0](img);
  if (!std::isfinite(p0)) throw NumericalError("ensemble: primary member produced a non-finite probability");
  if (!in_escalation_band(cfg, p0)) {
    EnsembleDecision d;
    d.tier = Tier::Primary;
    d.fused_prob = p0;
    d.label = p0 >= 0.5 ? 1 : 0;
    d.member_probs.assign(cfg.members.size(), std::nullopt);
    d.member_probs[0] = p0;
    return d;
  }
  std::vector<double> probs{p0}, weights;
  for (std::size_t i = 1; i < cfg.members.size(); ++i) {
    const double p = cfg.members[i](img);
    if (!std::isfinite(p)) throw NumericalError("ensemble: member " + cfg.members[i].name + " produced a non-finite probability");
    probs.push_back(p);
  }
  for (std::size_t i = 0; i < cfg.members.size(); ++i) weights.push_back(cfg.weight(i));
  return fuse(probs, weights, cfg.divergence_threshold);
}

/// Validation accuracies normalised to sum 1.
inline std::vector<double> calibrate_weights(const std::vector<double>& accuracies) {
  if (accuracies.empty()) throw EnsembleError("calibrate_weights: no members");
  double s = 0.0;
  for (double a : accuracies) {
    if (!(a >= 0 && a <= 1)) throw EnsembleError("calibrate_weights: accuracy outside [0, 1]");
    s += a;
  }
  if (!(s > 0)) throw EnsembleError("calibrate_weights: all members have zero accuracy");
  std::vector<double> w;
  for (double a : accuracies) w.push_back(a / s);
  return w;
}

/// Accuracy of each member (threshold 0.5) on a labelled split, normalised.
inline std::vector<double> calibrate_weights(const std::vector<EnsembleMember>& members, const std::vector<LabeledImage>& val) {
  if (val.empty()) throw EnsembleError("calibrate_weights: empty validation split");
  std::vector<double> acc;
  for (const auto& m : members) {
    std::size_t correct = 0;
    for (const auto& li : val) correct += ((m(li.image) >= 0.5 ? 1 : 0) == static_cast<int>(li.label));
    acc.push_back(static_cast<double>(correct) / static_cast<double>(val.size()));
  }
  return calibrate_weights(acc);
}

/// Member backed by a checkpoint: applies the model's own enhancement and
/// normalisation, then softmax over the logits.
inline EnsembleMember model_member(std::string name, Model model, const EnhanceConfig& ecfg = {}) {
  auto m = std::make_shared<const Model>(std::move(model));
  EnsembleMember member;
  member.name = std::move(name);
  member.predict = [m, ecfg](const ImageGray& img) {
    NoGradGuard g;
    const auto x = to_model_input(enhance(img, enhancement_of(*m), ecfg), m->config.input_side, normalization_of(*m));
    const auto l = forward(*m, x);
    const double z0 = l.at(0), z1 = l.at(1), mx = std::max(z0, z1);
    return std::exp(z1 - mx) / (std::exp(z0 - mx) + std::exp(z1 - mx));
  };
  return member;
}

}  // namespace mammo
