#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <chrono>
#include <cmath>
#include <string>
#include <thread>
#include <vector>

#include "doctest.h"
#include "hsicomp/data.hpp"
#include "hsicomp/error.hpp"
#include "hsicomp/netgraph.hpp"
#include "hsicomp/pipeline.hpp"
#include "support.hpp"

using namespace hsicomp;
using namespace testsup;

namespace {

PipelineStep sleeper(std::string name, int ms) {
  return {std::move(name), [ms](FrameJob&) {
            std::this_thread::sleep_for(std::chrono::milliseconds(ms));
          }};
}

}  // namespace

TEST_CASE("production plans split at the documented seams") {
  CHECK(production_plan(1).cuts == std::vector<int>{0, 8});
  CHECK(production_plan(2).cuts == std::vector<int>{0, 7, 8});
  CHECK(production_plan(3).cuts == std::vector<int>{0, 4, 7, 8});
  CHECK(production_plan(1).stage_count() == 1);
  CHECK(production_plan(2).stage_count() == 2);
  CHECK(production_plan(3).stage_count() == 3);
  CHECK_THROWS_AS(production_plan(0), ConfigError);
  CHECK_THROWS_AS(production_plan(4), ConfigError);
  CHECK_THROWS_AS(production_plan(-1), ConfigError);
}

TEST_CASE("every stage plan yields bitwise identical frames in input order") {
  const LoadedDataset& ds = mini_dataset();
  std::vector<size_t> idx = {0, 1, 2, 3};
  ChannelStats stats = fit_channel_stats(ds, idx);
  NetGraph fused = fuse_symmetric_norm(
      build_unet(1, 4, ds.bands, ds.classes),
      NormalizationParams::from_stats(stats));

  auto source = [&](int i) { return ds.samples[i % ds.samples.size()].raw; };
  std::vector<PipelineStep> steps =
      production_steps(ds.preprocess, ds.calib, stats, fused, source);
  REQUIRE(steps.size() == 8);
  const char* names[] = {"load",  "reflectance", "demosaic", "align",
                         "crop",  "to_bip",      "clip_pn",  "infer"};
  for (size_t i = 0; i < 8; ++i) CHECK(steps[i].name == names[i]);

  const int frames = 6;
  std::vector<std::vector<Tensor>> outs(4);
  std::vector<std::vector<int>> orders(4);
  for (int sc = 1; sc <= 3; ++sc) {
    StageProfile prof = run_pipeline(
        steps, production_plan(sc), frames,
        [&](const FrameJob& j) {
          outs[sc].push_back(j.cube);
          orders[sc].push_back(j.index);
        });
    CHECK(prof.executions + prof.warmup == frames);
    CHECK(prof.throughput_fps > 0.0);
    CHECK(int(prof.stage_mean_ms.size()) == sc);
    REQUIRE(prof.steps.size() == 8);
    for (const StepStats& s : prof.steps) {
      CHECK(s.stage >= 0);
      CHECK(s.stage < sc);
    }
  }

  for (int sc = 1; sc <= 3; ++sc) {
    REQUIRE(int(outs[sc].size()) == frames);
    CHECK(orders[sc] == std::vector<int>{0, 1, 2, 3, 4, 5});
  }

  // the probability cubes match the scene geometry
  CHECK(outs[1][0].height() == ds.samples[0].gt.height);
  CHECK(outs[1][0].width() == ds.samples[0].gt.width);
  CHECK(outs[1][0].bands() == ds.classes);

  // pure steps: identical bits no matter how the chain is cut
  for (int sc = 2; sc <= 3; ++sc)
    for (int f = 0; f < frames; ++f) {
      const Tensor& a = outs[1][f];
      const Tensor& b = outs[sc][f];
      REQUIRE(a.same_shape(b));
      for (int r = 0; r < a.height(); ++r)
        for (int c = 0; c < a.width(); ++c)
          for (int k = 0; k < a.bands(); ++k)
            CHECK(a.at(r, c, k) == b.at(r, c, k));
    }
}

TEST_CASE("throughput follows the slowest stage once the chain is split") {
  std::vector<PipelineStep> steps;
  steps.push_back(sleeper("stage_a", 20));
  steps.push_back(sleeper("stage_b", 12));
  steps.push_back(sleeper("stage_c", 8));

  const int frames = 12;
  StageProfile seq =
      run_pipeline(steps, StagePlan{{0, 3}}, frames, {}, 2);
  StageProfile par =
      run_pipeline(steps, StagePlan{{0, 1, 2, 3}}, frames, {}, 2);

  // sequential period = 40 ms, pipelined period = the 20 ms bottleneck
  CHECK(seq.throughput_fps == doctest::Approx(1000.0 / 40.0).epsilon(0.25));
  CHECK(par.throughput_fps == doctest::Approx(1000.0 / 20.0).epsilon(0.25));
  CHECK(par.throughput_fps > 1.5 * seq.throughput_fps);

  // per-step means track their sleeps (sleep_for may overshoot, never undercut)
  for (const StageProfile* p : {&seq, &par}) {
    REQUIRE(p->steps.size() == 3);
    CHECK(p->steps[0].mean_ms >= 19.0);
    CHECK(p->steps[0].mean_ms <= 35.0);
    CHECK(p->steps[2].mean_ms >= 7.0);
    CHECK(p->steps[2].mean_ms <= 23.0);
    CHECK(p->longest_task_ms >= p->steps[0].mean_ms);
  }
  CHECK(seq.executions == frames - 2);
  CHECK(seq.warmup == 2);
}

TEST_CASE("a failing step names the frame and step in a pipeline error") {
  std::vector<PipelineStep> steps;
  steps.push_back({"fill", [](FrameJob& j) { j.cube = Tensor(); }});
  steps.push_back({"boom", [](FrameJob& j) {
                     if (j.index == 3) throw std::runtime_error("bad frame");
                   }});

  bool threw = false;
  try {
    run_pipeline(steps, StagePlan{{0, 1, 2}}, 6);
  } catch (const PipelineError& e) {
    threw = true;
    const std::string what = e.what();
    CHECK(what.find("frame 3") != std::string::npos);
    CHECK(what.find("boom") != std::string::npos);
    CHECK(what.find("bad frame") != std::string::npos);
    CHECK(std::string(e.category()) == "pipeline");
  }
  CHECK(threw);
}

TEST_CASE("pipeline inputs are validated before any thread starts") {
  std::vector<PipelineStep> steps;
  steps.push_back(sleeper("only", 1));

  CHECK_THROWS_AS(run_pipeline({}, StagePlan{{0, 0}}, 2), ConfigError);
  CHECK_THROWS_AS(run_pipeline(steps, StagePlan{{0, 1}}, 0), ConfigError);
  CHECK_THROWS_AS(run_pipeline(steps, StagePlan{{0, 2}}, 2), ConfigError);
  CHECK_THROWS_AS(run_pipeline(steps, StagePlan{{1, 1}}, 2), ConfigError);
  CHECK_THROWS_AS(run_pipeline(steps, StagePlan{{0}}, 2), ConfigError);

  const LoadedDataset& ds = mini_dataset();
  ChannelStats stats = fit_channel_stats(ds, {0});
  NetGraph fused = fuse_symmetric_norm(
      build_unet(1, 4, ds.bands, ds.classes),
      NormalizationParams::from_stats(stats));
  CHECK_THROWS_AS(
      production_steps(ds.preprocess, ds.calib, stats, fused, nullptr),
      ConfigError);
}

TEST_CASE("profile and bench tables demand measured runs") {
  CHECK_THROWS_AS(profile_report(StageProfile{}), ConfigError);

  std::vector<PipelineStep> steps;
  steps.push_back(sleeper("a", 2));
  steps.push_back(sleeper("b", 1));
  StageProfile prof = run_pipeline(steps, StagePlan{{0, 2}}, 5, {}, 1);
  std::string txt = profile_report(prof);
  CHECK(txt.find("throughput") != std::string::npos);
  CHECK(txt.find("a") != std::string::npos);
  CHECK(txt.find("b") != std::string::npos);

  CHECK_THROWS_AS(bench_matrix({}), ConfigError);

  BenchRun fast;
  fast.variant = "pruned";
  fast.stages = 3;
  fast.profile = prof;
  fast.profile.throughput_fps = 50.0;
  BenchRun slow;
  slow.variant = "baseline";
  slow.stages = 1;
  slow.profile = prof;
  slow.profile.throughput_fps = 25.0;

  std::vector<BenchRun> runs = {fast, slow};
  std::vector<BenchEntry> m = bench_matrix(runs);
  REQUIRE(m.size() == 2);
  CHECK(m[0].ratio == doctest::Approx(2.0));
  CHECK(m[1].ratio == doctest::Approx(1.0));
  CHECK(m[0].throughput_fps == 50.0);
  CHECK(m[0].last_step_ms == doctest::Approx(prof.steps.back().mean_ms));

  std::string table = format_bench_matrix(m);
  CHECK(table.find("pruned") != std::string::npos);
  CHECK(table.find("baseline") != std::string::npos);
  CHECK(table.find("ratio") != std::string::npos);

  BenchRun dead;
  dead.variant = "empty";
  dead.profile.throughput_fps = 0.0;
  std::vector<BenchRun> bad = {dead};
  CHECK_THROWS_AS(bench_matrix(bad), ConfigError);
}
