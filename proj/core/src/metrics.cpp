#include "hsicomp/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "hsicomp/error.hpp"

namespace hsicomp {

ConfusionMatrix::ConfusionMatrix(int classes) : k_(classes) {
  if (classes <= 0)
    throw DimensionError("class count must be positive, got " +
                         std::to_string(classes));
  m_.assign(static_cast<size_t>(k_) * k_, 0);
}

uint64_t ConfusionMatrix::total() const {
  uint64_t t = 0;
  for (uint64_t v : m_) t += v;
  return t;
}

uint64_t ConfusionMatrix::gt_count(int c) const {
  uint64_t t = 0;
  for (int p = 0; p < k_; ++p) t += m_[idx(c, p)];
  return t;
}

uint64_t ConfusionMatrix::pred_count(int c) const {
  uint64_t t = 0;
  for (int g = 0; g < k_; ++g) t += m_[idx(g, c)];
  return t;
}

void ConfusionMatrix::add(int gt, int pred, uint64_t n) {
  if (gt < 0 || gt >= k_ || pred < 0 || pred >= k_)
    throw LabelError("confusion cell (" + std::to_string(gt) + "," +
                     std::to_string(pred) + ") outside " + std::to_string(k_) +
                     " classes");
  m_[idx(gt, pred)] += n;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& o) {
  if (o.k_ != k_)
    throw DimensionError("cannot merge confusion matrices of " +
                         std::to_string(k_) + " and " + std::to_string(o.k_) +
                         " classes");
  for (size_t i = 0; i < m_.size(); ++i) m_[i] += o.m_[i];
  return *this;
}

void accumulate_into(ConfusionMatrix& cm, std::span<const uint8_t> pred,
                     std::span<const uint8_t> gt) {
  if (pred.size() != gt.size())
    throw DimensionError("prediction/ground-truth size mismatch: " +
                         std::to_string(pred.size()) + " vs " +
                         std::to_string(gt.size()));
  const int k = cm.classes();
  const uint8_t ignore = ignore_label(k);
  for (size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore) continue;
    if (gt[i] > ignore)
      throw LabelError("ground-truth label " + std::to_string(gt[i]) +
                       " at pixel " + std::to_string(i) + " exceeds " +
                       std::to_string(k) + " classes");
    if (pred[i] >= k)
      throw LabelError("predicted label " + std::to_string(pred[i]) +
                       " at pixel " + std::to_string(i) + " exceeds " +
                       std::to_string(k) + " classes");
    cm.add(gt[i], pred[i]);
  }
}

ConfusionMatrix accumulate(std::span<const uint8_t> pred,
                           std::span<const uint8_t> gt, int classes) {
  ConfusionMatrix cm(classes);
  accumulate_into(cm, pred, gt);
  return cm;
}

ClassScores iou(const ConfusionMatrix& cm) {
  const int k = cm.classes();
  ClassScores s;
  s.iou.assign(k, std::numeric_limits<double>::quiet_NaN());
  s.precision.assign(k, std::numeric_limits<double>::quiet_NaN());
  s.recall.assign(k, std::numeric_limits<double>::quiet_NaN());
  s.defined.assign(k, false);
  for (int c = 0; c < k; ++c) {
    const double tp = static_cast<double>(cm.count(c, c));
    const double fn = static_cast<double>(cm.gt_count(c)) - tp;
    const double fp = static_cast<double>(cm.pred_count(c)) - tp;
    const double denom = tp + fp + fn;
    if (denom <= 0) continue;
    s.defined[c] = true;
    s.iou[c] = tp / denom;
    s.precision[c] = (tp + fp) > 0 ? tp / (tp + fp)
                                   : std::numeric_limits<double>::quiet_NaN();
    s.recall[c] = (tp + fn) > 0 ? tp / (tp + fn)
                                : std::numeric_limits<double>::quiet_NaN();
  }
  return s;
}

Aggregates aggregate(const ConfusionMatrix& cm) {
  const int k = cm.classes();
  const ClassScores s = iou(cm);
  const double total = static_cast<double>(cm.total());

  Aggregates a;
  for (int c = 0; c < k; ++c)
    if (s.defined[c]) ++a.defined_classes;
  if (a.defined_classes == 0 || total == 0) return a;

  double inv_sum = 0.0;
  for (int c = 0; c < k; ++c) {
    const double f = static_cast<double>(cm.gt_count(c)) / total;
    if (f > 0) {
      a.giou += f * s.iou[c];
      inv_sum += 1.0 / f;
    }
  }
  if (inv_sum > 0) {
    for (int c = 0; c < k; ++c) {
      const double f = static_cast<double>(cm.gt_count(c)) / total;
      if (f > 0) a.wiou += (1.0 / f) / inv_sum * s.iou[c];
    }
  }
  return a;
}

std::string metrics_report(const ConfusionMatrix& cm,
                           const std::vector<std::string>& class_names) {
  const ClassScores s = iou(cm);
  const Aggregates a = aggregate(cm);
  const double total = static_cast<double>(cm.total());
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-12s %10s %10s %10s %10s\n", "class",
                "IoU", "precision", "recall", "gt-freq");
  out << line;
  for (int c = 0; c < cm.classes(); ++c) {
    std::string name = c < static_cast<int>(class_names.size())
                           ? class_names[c]
                           : ("class_" + std::to_string(c));
    const double f = total > 0 ? cm.gt_count(c) / total : 0.0;
    if (!s.defined[c]) {
      std::snprintf(line, sizeof line, "%-12s %10s %10s %10s %9.4f%%\n",
                    name.c_str(), "--", "--", "--", 100.0 * f);
    } else {
      std::snprintf(line, sizeof line,
                    "%-12s %9.2f%% %9.2f%% %9.2f%% %9.4f%%\n", name.c_str(),
                    100.0 * s.iou[c], 100.0 * s.precision[c],
                    100.0 * s.recall[c], 100.0 * f);
    }
    out << line;
  }
  std::snprintf(line, sizeof line, "%-12s %9.2f%%   (weighted %.2f%%)\n",
                "global", 100.0 * a.giou, 100.0 * a.wiou);
  out << line;
  return out.str();
}

}  // namespace hsicomp
