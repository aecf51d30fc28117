#pragma once

#include <span>

#include "hsicomp/metrics.hpp"
#include "hsicomp/netgraph.hpp"
#include "hsicomp/training.hpp"

namespace hsicomp {

struct EvalResult {
  ConfusionMatrix cm;
  ClassScores per_class;
  Aggregates agg;
};

// Inference forward over every sample, confusion accumulated additively.
EvalResult evaluate(const NetGraph& g, std::span<const Sample> samples);

// Shorthand for the pruning gates and early stopping.
double evaluate_wiou(const NetGraph& g, std::span<const Sample> samples);

}  // namespace hsicomp
