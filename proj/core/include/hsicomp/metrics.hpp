#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace hsicomp {

// Per-pixel class ids; `ignore_label(K)` pixels are excluded from every
// metric.
struct LabelMap {
  int height = 0, width = 0;
  std::vector<uint8_t> data;

  LabelMap() = default;
  LabelMap(int h, int w) : height(h), width(w), data(size_t(h) * w, 0) {}
  uint8_t& at(int r, int c) { return data[static_cast<size_t>(r) * width + c]; }
  uint8_t at(int r, int c) const {
    return data[static_cast<size_t>(r) * width + c];
  }
  size_t size() const { return data.size(); }
};

inline uint8_t ignore_label(int class_count) {
  return static_cast<uint8_t>(class_count);
}

// Rows index ground truth, columns prediction. Additive across images.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes);

  int classes() const { return k_; }
  uint64_t count(int gt, int pred) const { return m_[idx(gt, pred)]; }
  uint64_t total() const;
  uint64_t gt_count(int c) const;    // row sum
  uint64_t pred_count(int c) const;  // column sum

  void add(int gt, int pred, uint64_t n = 1);
  ConfusionMatrix& operator+=(const ConfusionMatrix& o);

 private:
  size_t idx(int gt, int pred) const {
    return static_cast<size_t>(gt) * k_ + pred;
  }
  int k_;
  std::vector<uint64_t> m_;
};

// Joint counts over non-ignored pixels. Labels must be < K or the ignore
// value; anything else raises LabelError.
ConfusionMatrix accumulate(std::span<const uint8_t> pred,
                           std::span<const uint8_t> gt, int classes);
void accumulate_into(ConfusionMatrix& cm, std::span<const uint8_t> pred,
                     std::span<const uint8_t> gt);

// A class with zero (TP+FP+FN) has no defined IoU and is excluded from the
// aggregates.
struct ClassScores {
  std::vector<double> iou, precision, recall;  // NaN where undefined
  std::vector<bool> defined;
};

ClassScores iou(const ConfusionMatrix& cm);

// giou weights per-class IoU by ground-truth pixel frequency; wiou weights by
// normalized inverse frequency, restricted to classes present in the ground
// truth.
struct Aggregates {
  double giou = 0.0;
  double wiou = 0.0;
  int defined_classes = 0;
};

Aggregates aggregate(const ConfusionMatrix& cm);

// Table-style text report: one row per class plus the aggregate row.
std::string metrics_report(const ConfusionMatrix& cm,
                           const std::vector<std::string>& class_names = {});

}  // namespace hsicomp
