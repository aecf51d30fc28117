#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "hsicomp/error.hpp"
#include "hsicomp/metrics.hpp"

using namespace hsicomp;

namespace {

// Two classes, 1000 pixels: class 0 holds 900, class 1 holds 100. Class 0
// predicted perfectly; class 1 predicted right half the time with the
// misses landing on extra class-1 predictions being absent (FN only kept
// balanced so IoU_1 = 50/(50+0+50) = 0.5).
ConfusionMatrix worked_example() {
  ConfusionMatrix cm(2);
  cm.add(0, 0, 900);
  cm.add(1, 1, 50);
  cm.add(1, 0, 50);
  return cm;
}

}  // namespace

TEST_CASE("per-class IoU on the worked example") {
  ConfusionMatrix cm = worked_example();
  ClassScores s = iou(cm);
  // class 0: TP 900, FP 50, FN 0 -> 900/950
  CHECK(s.iou[0] == doctest::Approx(900.0 / 950.0).epsilon(1e-12));
  CHECK(s.iou[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s.defined[0]);
  CHECK(s.defined[1]);
  CHECK(s.precision[0] == doctest::Approx(900.0 / 950.0));
  CHECK(s.recall[0] == doctest::Approx(1.0));
  CHECK(s.recall[1] == doctest::Approx(0.5));
}

TEST_CASE("worked aggregate example: frequencies 0.9/0.1, IoUs 1.0/0.5") {
  // three classes, class 2 absent from ground truth: gt-frequency weights
  // and inverse-frequency weights run over present classes only
  ConfusionMatrix cm(3);
  cm.add(0, 0, 900);  // class 0 perfect: IoU 1.0
  cm.add(1, 1, 50);
  cm.add(1, 2, 50);  // class 1 misses predicted as class 2: IoU 0.5
  ClassScores s = iou(cm);
  CHECK(s.iou[0] == doctest::Approx(1.0));
  CHECK(s.iou[1] == doctest::Approx(0.5));
  // class 2: TP 0, FP 50, FN 0 -> defined with IoU 0
  CHECK(s.defined[2]);
  CHECK(s.iou[2] == doctest::Approx(0.0));

  Aggregates a = aggregate(cm);
  // gIoU over gt-present mass: 0.9 * 1.0 + 0.1 * 0.5 (class 2 has no gt
  // pixels, zero weight)
  CHECK(a.giou == doctest::Approx(0.95).epsilon(1e-12));
  // wIoU: weights proportional to 1/0.9 and 1/0.1 -> 0.1 and 0.9
  CHECK(a.wiou == doctest::Approx(0.55).epsilon(1e-12));
}

TEST_CASE("classes with no evidence are excluded from aggregates") {
  ConfusionMatrix cm(3);
  cm.add(0, 0, 10);
  cm.add(1, 0, 5);  // class 1 all missed
  ClassScores s = iou(cm);
  CHECK_FALSE(s.defined[2]);  // never seen anywhere
  CHECK(std::isnan(s.iou[2]));
  Aggregates a = aggregate(cm);
  CHECK(a.defined_classes == 2);
  // class 0 picks up the 5 missed pixels as false positives: IoU 10/15
  CHECK(a.giou == doctest::Approx((10.0 / 15.0) * (10.0 / 15.0) +
                                  (5.0 / 15.0) * 0.0));
}

TEST_CASE("accumulate skips ignore pixels and rejects junk labels") {
  std::vector<uint8_t> gt = {0, 1, 2, 3, 1};  // 3 = ignore for 3 classes
  std::vector<uint8_t> pred = {0, 1, 2, 0, 0};
  ConfusionMatrix cm = accumulate(pred, gt, 3);
  CHECK(cm.total() == 4);  // ignore pixel dropped
  CHECK(cm.count(0, 0) == 1);
  CHECK(cm.count(1, 1) == 1);
  CHECK(cm.count(1, 0) == 1);

  std::vector<uint8_t> bad = {7, 0, 0, 0, 0};
  CHECK_THROWS_AS(accumulate(pred, bad, 3), LabelError);
  std::vector<uint8_t> badpred = {0, 0, 9, 0, 0};
  CHECK_THROWS_AS(accumulate(badpred, gt, 3), LabelError);
  std::vector<uint8_t> shorter = {0, 1};
  CHECK_THROWS_AS(accumulate(shorter, gt, 3), Error);
}

TEST_CASE("confusion matrices add across images") {
  std::vector<uint8_t> gt1 = {0, 1}, pred1 = {0, 0};
  std::vector<uint8_t> gt2 = {1, 1}, pred2 = {1, 0};
  ConfusionMatrix a = accumulate(pred1, gt1, 2);
  accumulate_into(a, pred2, gt2);
  ConfusionMatrix b = accumulate(pred1, gt1, 2);
  ConfusionMatrix c = accumulate(pred2, gt2, 2);
  b += c;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(a.count(i, j) == b.count(i, j));
  CHECK(a.gt_count(1) == 3);
  CHECK(a.pred_count(0) == 3);
}

TEST_CASE("report includes every class and the aggregates") {
  ConfusionMatrix cm(2);
  cm.add(0, 0, 9);
  cm.add(1, 1, 1);
  std::string rep = metrics_report(cm, {"sky", "grass"});
  CHECK(rep.find("sky") != std::string::npos);
  CHECK(rep.find("grass") != std::string::npos);
  CHECK(rep.find("global") != std::string::npos);
  CHECK(rep.find("weighted") != std::string::npos);
}
