#include "hsicomp/eval.hpp"

#include "hsicomp/error.hpp"

namespace hsicomp {

EvalResult evaluate(const NetGraph& g, std::span<const Sample> samples) {
  if (samples.empty()) throw TrainingError("evaluation set is empty");
  const int k = g.class_count();
  ConfusionMatrix cm(k);
  for (const Sample& s : samples) {
    LabelMap pred = predict(g, s.cube);
    if (pred.height != s.labels.height || pred.width != s.labels.width)
      throw DimensionError("prediction " + std::to_string(pred.height) + "x" +
                           std::to_string(pred.width) +
                           " does not match labels " +
                           std::to_string(s.labels.height) + "x" +
                           std::to_string(s.labels.width));
    accumulate_into(cm, pred.data, s.labels.data);
  }
  return EvalResult{cm, iou(cm), aggregate(cm)};
}

double evaluate_wiou(const NetGraph& g, std::span<const Sample> samples) {
  return evaluate(g, samples).agg.wiou;
}

}  // namespace hsicomp
