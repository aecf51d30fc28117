#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hsicomp/complexity.hpp"
#include "hsicomp/netgraph.hpp"
#include "hsicomp/training.hpp"

namespace hsicomp {

// Per-layer pruning ratios on the 0.1 grid, capped at 0.9. The conv feeding
// the softmax head keeps the class count and may never appear here.
struct PruningScheme {
  std::map<std::string, float> ratios;

  float ratio_of(const std::string& id) const {
    auto it = ratios.find(id);
    return it == ratios.end() ? 0.0f : it->second;
  }
  // Grid, cap and layer-id checks against a concrete graph; SchemeError.
  void validate(const NetGraph& g) const;

  void save(const std::string& path) const;
  static PruningScheme load(const std::string& path);
};

// Kept output-filter indices (ascending) for every conv-kind layer after
// apply_scheme; unpruned layers list all filters.
struct ChannelMask {
  std::map<std::string, std::vector<int>> kept;
};

// Metric value per layer per ratio step; values[0] is the shared baseline
// (ratio 0, untouched model).
struct SensitivityCurve {
  std::vector<float> ratios;  // the probe grid, 0.0 .. 0.9
  double baseline = 0.0;
  std::map<std::string, std::vector<double>> values;

  void save(const std::string& path) const;
  static SensitivityCurve load(const std::string& path);
};

// Output filters sorted by ascending L1 norm of their weights (bias
// excluded), ties broken toward the lower index.
std::vector<int> rank_filters_l1(const LayerNode& layer);

// Prunable conv layers: every conv kind except the softmax head's producer.
std::vector<std::string> prunable_layers(const NetGraph& g);

struct ApplyResult {
  NetGraph graph;
  ChannelMask mask;
};

// Removes each pruned layer's round(ratio * o_f) lowest-L1 filters (one
// filter always survives) and masks every consumer consistently: BN and
// depthwise rows follow their conv, pools/ReLU/dropout pass masks through,
// concat consumers see the producer's offset within the joined range.
ApplyResult apply_scheme(const NetGraph& g, const PruningScheme& scheme);

// Eq. 1 conv FLOPS the graph would have after apply_scheme, computed by
// propagating kept-channel counts (no weight copies).
uint64_t scheme_conv_flops(const NetGraph& g, int input_h, int input_w,
                           const PruningScheme& scheme);

// wIoU of every single-layer prune at every ratio step, rest of the model
// frozen. Probes are independent and run in parallel.
SensitivityCurve sensitivity_analysis(const NetGraph& g,
                                      std::span<const Sample> eval_set);

struct SearchResult {
  PruningScheme scheme;
  uint64_t flops = 0;           // Eq. 1 conv FLOPS after the scheme
  double achieved_ratio = 0.0;  // flops / unpruned flops
  double budget = 0.0;          // degradation budget the search settled on
};

// Constrained binary search over a shared degradation budget t: each layer
// takes the largest ratio whose metric drop from baseline stays within t
// (layers already dropping more than exclusion_threshold at ratio 0.1 are
// excluded), and t is bisected until the scheme's FLOPS meet
// (1 - overall_pr) * total from below as closely as the ratio grid allows.
// Throws InfeasibleError (reporting the maximum achievable overall ratio)
// when even the all-0.9 scheme stays above target.
SearchResult search_scheme(const NetGraph& g, int input_h, int input_w,
                           const SensitivityCurve& curves, double overall_pr,
                           double exclusion_threshold = 0.05);

struct IterationConfig {
  double overall_pr = 0.5;
  double exclusion_threshold = 0.05;  // wIoU drop at ratio 0.1 (0.01 = 1 point)
  double layer_gate = 0.0025;         // max per-layer drop at its chosen ratio
  double locked_gate = 0.25;          // max fraction of layers at the 0.9 cap
  double model_gate = 0.01;           // max post-finetune wIoU drop
  int max_retries = 3;
  double retry_step = 0.05;           // overall_pr reduction per retry
  int sensitivity_samples = 0;        // probe-set cap, 0 = whole eval set
  TrainConfig finetune;               // finetune epochs/lr, desk-scaled
};

struct IterationReport {
  PruningScheme scheme;
  double budget = 0.0;
  uint64_t flops_before = 0, flops_after = 0;
  uint64_t params_before = 0, params_after = 0;
  double achieved_ratio = 0.0;
  double wiou_before = 0.0, wiou_pruned = 0.0, wiou_finetuned = 0.0;
  int locked = 0, prunable = 0;
  int retries = 0;
  double overall_pr_used = 0.0;
  std::vector<std::string> log;
};

std::string format_iteration_report(const IterationReport& rep);

// One pruning iteration: sensitivity analysis, scheme search, gate checks
// (per-layer drop, locked fraction, post-finetune model drop), finetune.
// Gate failures retry with a reduced overall_pr; running out of retries
// throws InfeasibleError with the gate log.
IterationReport run_iteration(NetGraph& g, std::span<const Sample> train_set,
                              std::span<const Sample> val_set,
                              const IterationConfig& cfg);

struct InitPruneReport {
  PruningScheme scheme;
  uint64_t flops_before = 0, flops_after = 0;
  uint64_t params_before = 0, params_after = 0;
  double achieved_ratio = 0.0;
  TrainHistory history;
};

// Pre-training pruning: sensitivity and search run on the freshly
// initialized model, the scheme is applied, and only then is the network
// trained. No gates; the scheme comparison across seeds is the product.
InitPruneReport prune_at_init(NetGraph& g, std::span<const Sample> train_set,
                              std::span<const Sample> val_set,
                              double overall_pr, const IterationConfig& cfg);

}  // namespace hsicomp
