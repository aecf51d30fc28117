#include "hsicomp/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <exception>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>
#include <utility>

#include "hsicomp/error.hpp"

namespace hsicomp {

namespace {

using Clock = std::chrono::steady_clock;

double ms_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

// Two-slot handoff: push blocks while both slots hold unread frames, so a
// producer can never overwrite data its consumer still needs. close() lets
// the consumer drain what is queued; abort() wakes everyone for shutdown.
class Handoff {
 public:
  bool push(FrameJob job) {
    std::unique_lock lk(m_);
    cv_.wait(lk, [&] { return q_.size() < 2 || aborted_; });
    if (aborted_) return false;
    q_.push_back(std::move(job));
    cv_.notify_all();
    return true;
  }

  std::optional<FrameJob> pop() {
    std::unique_lock lk(m_);
    cv_.wait(lk, [&] { return !q_.empty() || closed_ || aborted_; });
    if (aborted_ || q_.empty()) return std::nullopt;
    FrameJob out = std::move(q_.front());
    q_.pop_front();
    cv_.notify_all();
    return out;
  }

  void close() {
    std::lock_guard lk(m_);
    closed_ = true;
    cv_.notify_all();
  }

  void abort() {
    std::lock_guard lk(m_);
    aborted_ = true;
    q_.clear();
    cv_.notify_all();
  }

 private:
  std::mutex m_;
  std::condition_variable cv_;
  std::deque<FrameJob> q_;
  bool closed_ = false;
  bool aborted_ = false;
};

void check_plan(const StagePlan& plan, int nsteps) {
  if (plan.cuts.size() < 2 || plan.cuts.front() != 0 ||
      plan.cuts.back() != nsteps)
    throw ConfigError("stage plan does not cover the step list");
  for (size_t i = 1; i < plan.cuts.size(); ++i)
    if (plan.cuts[i] <= plan.cuts[i - 1])
      throw ConfigError("stage plan cuts must ascend");
}

}  // namespace

StagePlan production_plan(int stage_count) {
  switch (stage_count) {
    case 1: return StagePlan{{0, 8}};
    case 2: return StagePlan{{0, 7, 8}};
    case 3: return StagePlan{{0, 4, 7, 8}};
    default:
      throw ConfigError("stage count must be 1, 2 or 3, got " +
                        std::to_string(stage_count));
  }
}

std::vector<PipelineStep> production_steps(
    const PreprocessConfig& cfg, const CalibrationPair& calib,
    const ChannelStats& stats, const NetGraph& model,
    std::function<RawFrame(int)> source) {
  if (!source) throw ConfigError("pipeline needs a frame source");
  // Calibration planes are static; crop them once instead of per frame.
  CalibrationPair cropped;
  cropped.dark = plane_crop(calib.dark, cfg.crop_top, cfg.crop_left,
                            cfg.active_height, cfg.active_width);
  cropped.flat = plane_crop(calib.flat, cfg.crop_top, cfg.crop_left,
                            cfg.active_height, cfg.active_width);
  const MosaicGeometry geom = cfg.geometry();
  const NetGraph* net = &model;

  std::vector<PipelineStep> steps;
  steps.push_back({"load", [source = std::move(source)](FrameJob& j) {
                     j.raw = source(j.index);
                   }});
  steps.push_back({"reflectance", [cfg, cropped](FrameJob& j) {
                     const RawFrame active = crop_and_clip(j.raw, cfg);
                     j.plane = reflectance_correct(active, cropped);
                     j.raw = RawFrame();
                   }});
  steps.push_back({"demosaic", [geom](FrameJob& j) {
                     j.cube = demosaic(j.plane, geom);
                     j.plane = Plane();
                   }});
  steps.push_back({"align", [geom, align = cfg.align](FrameJob& j) {
                     if (align) j.cube = align_bands(j.cube, geom);
                   }});
  steps.push_back({"crop", [depth = cfg.depth](FrameJob& j) {
                     j.cube = crop_to_multiple(j.cube, depth);
                   }});
  steps.push_back({"to_bip", [](FrameJob& j) {
                     j.cube = convert_layout(j.cube, Layout::BIP);
                   }});
  steps.push_back({"clip_pn", [stats](FrameJob& j) {
                     j.cube = clip_channels(pixel_normalize(j.cube), stats);
                   }});
  steps.push_back({"infer", [net](FrameJob& j) {
                     j.cube = forward(*net, j.cube);
                   }});
  return steps;
}

StageProfile run_pipeline(const std::vector<PipelineStep>& steps,
                          const StagePlan& plan, int frames,
                          const std::function<void(const FrameJob&)>& sink,
                          int warmup) {
  const int nsteps = static_cast<int>(steps.size());
  if (nsteps == 0) throw ConfigError("pipeline has no steps");
  check_plan(plan, nsteps);
  if (frames < 1) throw ConfigError("pipeline needs at least one frame");
  if (warmup < 0) warmup = frames > 8 ? 3 : frames / 4;
  if (warmup >= frames) warmup = frames - 1;

  const int nstages = plan.stage_count();
  std::vector<double> dur(static_cast<size_t>(frames) * nsteps, 0.0);
  std::vector<Clock::time_point> done(frames);

  std::vector<Handoff> buffers(nstages > 1 ? nstages - 1 : 0);
  std::atomic<bool> failed{false};
  std::mutex err_m;
  std::exception_ptr err;

  auto fail = [&](std::exception_ptr e) {
    {
      std::lock_guard lk(err_m);
      if (!err) err = std::move(e);
    }
    failed.store(true);
    for (Handoff& b : buffers) b.abort();
  };

  auto run_stage_steps = [&](FrameJob& job, int s) {
    for (int k = plan.cuts[s]; k < plan.cuts[s + 1]; ++k) {
      const Clock::time_point t0 = Clock::now();
      try {
        steps[k].run(job);
      } catch (const std::exception& e) {
        throw PipelineError("frame " + std::to_string(job.index) + ", step '" +
                            steps[k].name + "': " + e.what());
      }
      dur[static_cast<size_t>(job.index) * nsteps + k] =
          ms_between(t0, Clock::now());
    }
  };

  auto finish = [&](FrameJob& job) {
    done[job.index] = Clock::now();
    if (sink) sink(job);
  };

  auto worker = [&](int s) {
    try {
      if (s == 0) {
        for (int i = 0; i < frames && !failed.load(); ++i) {
          FrameJob job;
          job.index = i;
          run_stage_steps(job, 0);
          if (nstages == 1)
            finish(job);
          else if (!buffers[0].push(std::move(job)))
            break;
        }
        if (nstages > 1) buffers[0].close();
      } else {
        while (std::optional<FrameJob> job = buffers[s - 1].pop()) {
          run_stage_steps(*job, s);
          if (s == nstages - 1)
            finish(*job);
          else if (!buffers[s].push(std::move(*job)))
            break;
        }
        if (s < nstages - 1) buffers[s].close();
      }
    } catch (...) {
      fail(std::current_exception());
    }
  };

  std::vector<std::thread> pool;
  pool.reserve(nstages);
  for (int s = 0; s < nstages; ++s) pool.emplace_back(worker, s);
  for (std::thread& t : pool) t.join();
  if (err) std::rethrow_exception(err);

  StageProfile prof;
  prof.executions = frames - warmup;
  prof.warmup = warmup;
  prof.stage_mean_ms.assign(nstages, 0.0);
  for (int k = 0; k < nsteps; ++k) {
    double sum = 0.0, sq = 0.0;
    for (int i = warmup; i < frames; ++i) {
      const double d = dur[static_cast<size_t>(i) * nsteps + k];
      sum += d;
      sq += d * d;
    }
    const double mean = sum / prof.executions;
    const double var = std::max(0.0, sq / prof.executions - mean * mean);
    int stage = 0;
    while (k >= plan.cuts[stage + 1]) ++stage;
    prof.steps.push_back({steps[k].name, stage, mean, std::sqrt(var)});
    prof.stage_mean_ms[stage] += mean;
  }
  prof.longest_task_ms =
      *std::max_element(prof.stage_mean_ms.begin(), prof.stage_mean_ms.end());
  if (prof.executions >= 2) {
    const double span_ms = ms_between(done[warmup], done[frames - 1]);
    if (span_ms > 0.0)
      prof.throughput_fps = 1000.0 * (prof.executions - 1) / span_ms;
  }
  return prof;
}

std::string profile_report(const StageProfile& p) {
  if (p.executions <= 0 || p.steps.empty())
    throw ConfigError("profile covers no measured frames");
  std::ostringstream os;
  char line[128];
  std::snprintf(line, sizeof line, "%-14s %5s %10s %10s\n", "step", "stage",
                "mean ms", "sd ms");
  os << line;
  for (const StepStats& s : p.steps) {
    std::snprintf(line, sizeof line, "%-14s %5d %10.3f %10.3f\n",
                  s.name.c_str(), s.stage + 1, s.mean_ms, s.stddev_ms);
    os << line;
  }
  os << "stage means:";
  for (size_t s = 0; s < p.stage_mean_ms.size(); ++s) {
    std::snprintf(line, sizeof line, "%s %.3f", s ? " |" : "",
                  p.stage_mean_ms[s]);
    os << line;
  }
  os << " ms\n";
  std::snprintf(line, sizeof line, "longest task: %.3f ms\n",
                p.longest_task_ms);
  os << line;
  std::snprintf(line, sizeof line,
                "throughput: %.3f frames/s (%d frames measured, %d warm-up)\n",
                p.throughput_fps, p.executions, p.warmup);
  os << line;
  return os.str();
}

std::vector<BenchEntry> bench_matrix(std::span<const BenchRun> runs) {
  if (runs.empty()) throw ConfigError("bench matrix needs at least one run");
  double slowest = 0.0;
  for (const BenchRun& r : runs) {
    if (r.profile.throughput_fps <= 0.0)
      throw ConfigError("run '" + r.variant + "' has no measured throughput");
    slowest = slowest == 0.0 ? r.profile.throughput_fps
                             : std::min(slowest, r.profile.throughput_fps);
  }
  std::vector<BenchEntry> out;
  out.reserve(runs.size());
  for (const BenchRun& r : runs) {
    BenchEntry e;
    e.variant = r.variant;
    e.stages = r.stages;
    e.throughput_fps = r.profile.throughput_fps;
    e.ratio = r.profile.throughput_fps / slowest;
    e.last_step_ms =
        r.profile.steps.empty() ? 0.0 : r.profile.steps.back().mean_ms;
    out.push_back(std::move(e));
  }
  return out;
}

std::string format_bench_matrix(std::span<const BenchEntry> entries) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-24s %6s %12s %7s %12s\n", "variant",
                "stages", "frames/s", "ratio", "last step ms");
  os << line;
  for (const BenchEntry& e : entries) {
    std::snprintf(line, sizeof line, "%-24s %6d %12.3f %7.2f %12.3f\n",
                  e.variant.c_str(), e.stages, e.throughput_fps, e.ratio,
                  e.last_step_ms);
    os << line;
  }
  return os.str();
}

}  // namespace hsicomp
