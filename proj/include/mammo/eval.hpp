// Binary classification metrics with Malignant (1) as the positive class.
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mammo {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ConfusionMatrix {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
  bool operator==(const ConfusionMatrix&) const = default;
};

/// Each field is std::nullopt when its denominator is zero.
struct Metrics {
  std::optional<double> accuracy, precision, recall, f1;
};

inline ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) {
    throw MetricError("confusion: " + std::to_string(preds.size()) + " predictions vs " + std::to_string(labels.size()) + " labels");
  }
  if (preds.empty()) throw MetricError("confusion: empty input");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if ((preds[i] != 0 && preds[i] != 1) || (labels[i] != 0 && labels[i] != 1)) throw MetricError("confusion: classes must be 0 or 1");
    const bool p = preds[i] == 1, y = labels[i] == 1;
    if (p && y) ++cm.tp;
    else if (p) ++cm.fp;
    else if (y) ++cm.fn;
    else ++cm.tn;
  }
  return cm;
}

inline Metrics metrics(const ConfusionMatrix& cm) {
  auto ratio = [](std::size_t a, std::size_t b) -> std::optional<double> {
    if (b == 0) return std::nullopt;
    return static_cast<double>(a) / static_cast<double>(b);
  };
  Metrics m;
  m.accuracy = ratio(cm.tp + cm.tn, cm.total());
  m.precision = ratio(cm.tp, cm.tp + cm.fp);
  m.recall = ratio(cm.tp, cm.tp + cm.fn);
  if (m.precision && m.recall && *m.precision + *m.recall > 0) {
    m.f1 = 2.0 * *m.precision * *m.recall / (*m.precision + *m.recall);
  }
  return m;
}

struct RocPoint {
  double threshold;  // predict positive when score >= threshold
  double fpr, tpr;
};

struct RocResult {
  std::vector<RocPoint> curve;  // from (0,0) to (1,1)
  double auc = 0.0;
};

namespace detail {

inline void check_scores(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw MetricError("curve: scores and labels differ in length");
  for (int y : labels) {
    if (y != 0 && y != 1) throw MetricError("curve: labels must be 0 or 1");
  }
}

/// Indices sorted by descending score.
inline std::vector<std::size_t> descending(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace detail

/// Threshold sweep over unique scores; equal scores form a single step, so
/// ties contribute a diagonal segment.
inline RocResult roc_auc(std::span<const double> scores, std::span<const int> labels) {
  detail::check_scores(scores, labels);
  const auto P = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t N = labels.size() - P;
  if (P == 0 || N == 0) throw MetricError("roc_auc: undefined with a single class present");
  const auto idx = detail::descending(scores);
  RocResult r;
  r.curve.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    const double s = scores[idx[i]];
    while (i < idx.size() && scores[idx[i]] == s) {
      (labels[idx[i]] == 1 ? tp : fp) += 1;
      ++i;
    }
    const RocPoint prev = r.curve.back();
    const RocPoint cur{s, static_cast<double>(fp) / static_cast<double>(N), static_cast<double>(tp) / static_cast<double>(P)};
    r.auc += (cur.fpr - prev.fpr) * (cur.tpr + prev.tpr) / 2.0;
    r.curve.push_back(cur);
  }
  return r;
}

/// Mann–Whitney estimate P(score⁺ > score⁻) + ½·P(tie), by direct pair count.
inline double rank_statistic_auc(std::span<const double> scores, std::span<const int> labels) {
  detail::check_scores(scores, labels);
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      wins += scores[i] > scores[j] ? 1.0 : (scores[i] == scores[j] ? 0.5 : 0.0);
    }
  }
  if (pairs == 0) throw MetricError("rank_statistic_auc: undefined with a single class present");
  return wins / static_cast<double>(pairs);
}

struct PrPoint {
  double threshold;
  double recall, precision;
};

/// One point per unique score, thresholds ascending (recall nonincreasing).
inline std::vector<PrPoint> pr_curve(std::span<const double> scores, std::span<const int> labels) {
  detail::check_scores(scores, labels);
  const auto P = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (P == 0) throw MetricError("pr_curve: no positive samples");
  const auto idx = detail::descending(scores);
  std::vector<PrPoint> pts;
  std::size_t tp = 0, predicted = 0;
  for (std::size_t i = 0; i < idx.size();) {
    const double s = scores[idx[i]];
    while (i < idx.size() && scores[idx[i]] == s) {
      tp += labels[idx[i]] == 1;
      ++predicted;
      ++i;
    }
    pts.push_back({s, static_cast<double>(tp) / static_cast<double>(P), static_cast<double>(tp) / static_cast<double>(predicted)});
  }
  std::reverse(pts.begin(), pts.end());
  return pts;
}

/// "0.9833" or "n/a".
inline std::string format_metric(const std::optional<double>& v, int digits = 4) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, *v);
  return buf;
}

}  // namespace mammo
