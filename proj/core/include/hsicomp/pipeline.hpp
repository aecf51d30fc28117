#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hsicomp/netgraph.hpp"
#include "hsicomp/preprocess.hpp"
#include "hsicomp/tensor.hpp"

namespace hsicomp {

// One frame moving through the staged executor. Steps hand content along
// through whichever field fits their stage of the chain.
struct FrameJob {
  int index = 0;
  RawFrame raw;
  Plane plane;
  Tensor cube;
};

struct PipelineStep {
  std::string name;
  std::function<void(FrameJob&)> run;
};

// Stage s executes steps [cuts[s], cuts[s+1]); cuts must start at 0, end at
// the step count, and ascend strictly.
struct StagePlan {
  std::vector<int> cuts;
  int stage_count() const { return static_cast<int>(cuts.size()) - 1; }
};

// The production chain: load, reflectance, demosaic, align | crop, to_bip,
// clip_pn | infer. Stage plans: 3 stages split at the bars, 2 stages merge
// the first two groups, 1 stage runs everything sequentially.
StagePlan production_plan(int stage_count);

// Builds the production steps around a frame source. The model should accept
// the clipped PN cube directly (normalization fused). The returned closures
// keep references to `model` only; everything else is copied.
std::vector<PipelineStep> production_steps(const PreprocessConfig& cfg,
                                           const CalibrationPair& calib,
                                           const ChannelStats& stats,
                                           const NetGraph& model,
                                           std::function<RawFrame(int)> source);

struct StepStats {
  std::string name;
  int stage = 0;
  double mean_ms = 0.0;
  double stddev_ms = 0.0;
};

struct StageProfile {
  std::vector<StepStats> steps;
  std::vector<double> stage_mean_ms;  // per-stage busy time per frame
  double longest_task_ms = 0.0;
  double throughput_fps = 0.0;  // steady-state output rate
  int executions = 0;           // frames in the means (warm-up excluded)
  int warmup = 0;
};

// Runs `frames` jobs through the staged executor: one worker per stage,
// two-slot handoff buffers between stages (a producer blocks rather than
// overwrite a slot its consumer has not read), outputs delivered to `sink`
// in input order. Outputs are bitwise identical for every plan because the
// steps are pure. A step failure aborts the run and resurfaces as
// PipelineError carrying the frame index and step name. warmup < 0 picks
// the default (3, shrunk for tiny runs).
StageProfile run_pipeline(const std::vector<PipelineStep>& steps,
                          const StagePlan& plan, int frames,
                          const std::function<void(const FrameJob&)>& sink = {},
                          int warmup = -1);

// Table-shaped text: per-step means and spread, stage totals, longest task,
// throughput. Throws ConfigError when the profile holds no measured frames.
std::string profile_report(const StageProfile& p);

struct BenchRun {
  std::string variant;
  int stages = 1;
  StageProfile profile;
};

struct BenchEntry {
  std::string variant;
  int stages = 1;
  double throughput_fps = 0.0;
  double ratio = 1.0;        // throughput relative to the slowest run
  double last_step_ms = 0.0;  // inference step in the production chain
};

std::vector<BenchEntry> bench_matrix(std::span<const BenchRun> runs);
std::string format_bench_matrix(std::span<const BenchEntry> entries);

}  // namespace hsicomp
