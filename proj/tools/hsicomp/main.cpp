// hsicomp: command-line front end for the hyperspectral segmentation
// toolkit. Subcommands cover the whole artifact chain: synthetic dataset
// generation, preprocessing, training, complexity analysis, sensitivity,
// structured pruning, post-training quantization, evaluation and staged
// pipeline benchmarking. Artifacts land under --workdir; inputs are never
// mutated, so every command is idempotent for a fixed seed.

#include <algorithm>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hsicomp/complexity.hpp"
#include "hsicomp/data.hpp"
#include "hsicomp/error.hpp"
#include "hsicomp/eval.hpp"
#include "hsicomp/kvfile.hpp"
#include "hsicomp/metrics.hpp"
#include "hsicomp/netgraph.hpp"
#include "hsicomp/pipeline.hpp"
#include "hsicomp/preprocess.hpp"
#include "hsicomp/pruning.hpp"
#include "hsicomp/quantization.hpp"
#include "hsicomp/tensor.hpp"
#include "hsicomp/tensor_io.hpp"
#include "hsicomp/training.hpp"

namespace fs = std::filesystem;
using namespace hsicomp;

namespace {

std::string sfmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  vsnprintf(buf, sizeof(buf), f, ap);
  va_end(ap);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("short write to " + path.string());
}

// Effective option value: an explicitly passed flag wins, then the config
// file, then the built-in default the bound variable started with.
struct Merge {
  const KvFile* cfg = nullptr;

  int i(const CLI::Option* o, int bound, const char* key) const {
    if (o->count() == 0 && cfg && cfg->has(key))
      return static_cast<int>(cfg->get_int(key));
    return bound;
  }
  double d(const CLI::Option* o, double bound, const char* key) const {
    if (o->count() == 0 && cfg && cfg->has(key)) return cfg->get_double(key);
    return bound;
  }
  uint64_t u(const CLI::Option* o, uint64_t bound, const char* key) const {
    if (o->count() == 0 && cfg && cfg->has(key))
      return static_cast<uint64_t>(cfg->get_int(key));
    return bound;
  }
  std::string s(const CLI::Option* o, const std::string& bound,
                const char* key) const {
    if (o->count() == 0 && cfg && cfg->has(key)) return cfg->get(key);
    return bound;
  }
};

// Every key the config file may carry; anything else is a typo and the
// parser refuses the file.
const std::vector<std::string> kConfigKeys = {
    "seed",        "workdir",          "dataset",
    "model",       "calib",            "frames",
    "out",         "scene",            "count",
    "depth",       "filters",          "dropout",
    "epochs",      "batch",            "lr",
    "patience",    "folds",            "round",
    "overall_pr",  "iterations",       "exclusion_threshold",
    "layer_gate",  "locked_gate",      "model_gate",
    "max_retries", "retry_step",       "sensitivity_samples",
    "finetune_epochs", "finetune_lr",  "cle_passes",
    "mse_window",  "samples",          "seeds",
    "stages",      "repeat",           "warmup",
};

struct GlobalOpts {
  uint64_t seed = 1;
  std::string config;
  std::string workdir = ".";
};

// All subcommand-bound variables live here so the dispatch code can reach
// them after parsing. Defaults are desk-scale: depth-3/16F network on the
// synthetic benchmark scene.
struct Opts {
  // gen-data
  std::string scene = "benchmark";
  int count = 200;
  // shared paths (resolved against workdir when left empty)
  std::string data, model, out, calib, frames, quant;
  // network
  int depth = 3;
  int filters = 16;
  double dropout = 0.2;
  // training
  int epochs = 60;
  int batch = 8;
  double lr = 1e-3;
  int patience = 10;
  int folds = 5;
  int round = 0;
  bool verbose = false;
  // analyze
  std::string input_dims;
  bool exact = false;
  // sensitivity / pruning
  int samples = 0;
  double overall_pr = 0.5;
  int iterations = 1;
  double exclusion_threshold = 0.05;
  double layer_gate = 0.0025;
  double locked_gate = 0.25;
  double model_gate = 0.01;
  int max_retries = 3;
  double retry_step = 0.05;
  int finetune_epochs = 12;
  double finetune_lr = 5e-4;
  int seeds = 3;
  // quantization
  int cle_passes = 1;
  int mse_window = 4;
  // bench
  std::vector<int> stages;
  int repeat = 100;
  int warmup = -1;
};

std::string resolve(const std::string& value, const fs::path& workdir,
                    const char* fallback) {
  return value.empty() ? (workdir / fallback).string() : value;
}

bool has_fused_norm(const NetGraph& g) {
  for (const auto& n : g.nodes())
    if (n.kind == LayerKind::DepthwiseNorm) return true;
  return false;
}

LabelMap argmax_map(const Tensor& probs) {
  LabelMap m(probs.height(), probs.width());
  for (int r = 0; r < probs.height(); ++r)
    for (int c = 0; c < probs.width(); ++c) {
      int best = 0;
      for (int b = 1; b < probs.bands(); ++b)
        if (probs.at(r, c, b) > probs.at(r, c, best)) best = b;
      m.at(r, c) = static_cast<uint8_t>(best);
    }
  return m;
}

struct SplitSamples {
  ChannelStats stats;
  std::vector<Sample> train, val, test;
  int classes = 0;
};

// The shared dataset plumbing: stratified folds, rotation split, clip stats
// fitted on the training split only, cubes preprocessed per split. When a
// model directory is given its stored stats are reused instead (they must
// match what the model was trained with).
SplitSamples prepare_splits(const LoadedDataset& ds, int k, int round,
                            const std::string& stats_dir, bool symmetric_norm,
                            bool want_test = false) {
  SplitSamples out;
  out.classes = ds.classes;
  auto folds = stratified_folds(ds.samples, ds.classes, k);
  auto split = fold_split(folds, k, round);
  if (!stats_dir.empty())
    out.stats = ChannelStats::load((fs::path(stats_dir) / "channel_stats").string());
  else
    out.stats = fit_channel_stats(ds, split.train);
  out.train = to_samples(ds, out.stats, split.train, symmetric_norm);
  out.val = to_samples(ds, out.stats, split.val, symmetric_norm);
  if (want_test) out.test = to_samples(ds, out.stats, split.test, symmetric_norm);
  return out;
}

std::vector<Tensor> load_calib_cubes(const std::string& dir) {
  std::vector<fs::path> paths;
  std::error_code ec;
  for (const auto& e : fs::directory_iterator(dir, ec))
    if (e.path().extension() == ".hscb") paths.push_back(e.path());
  if (ec) throw IoError("cannot list " + dir + ": " + ec.message());
  if (paths.empty()) throw ConfigError("no .hscb cubes in " + dir);
  std::sort(paths.begin(), paths.end());
  std::vector<Tensor> cubes;
  cubes.reserve(paths.size());
  for (const auto& p : paths) cubes.push_back(read_hscb(p.string()));
  return cubes;
}

int cmd_gen_data(const GlobalOpts& g, const Opts& o) {
  SceneSpec spec =
      o.scene == "mini" ? mini_scene_spec(g.seed) : benchmark_scene_spec(g.seed);
  Dataset ds = generate(spec, g.seed, o.count);
  fs::path dir = fs::path(g.workdir) / "dataset";
  save_dataset(dir.string(), spec, ds);
  const auto& gt = ds.samples.front().gt;
  std::cout << sfmt("wrote %d frames (%s scene, %dx%d raw, %dx%d cube, %d classes) to %s\n",
                    o.count, o.scene.c_str(), spec.raw_height, spec.raw_width,
                    gt.height, gt.width, spec.class_count, dir.c_str());
  return 0;
}

int cmd_train(const GlobalOpts& g, const Opts& o) {
  fs::path wd(g.workdir);
  LoadedDataset ds = load_dataset(resolve(o.data, wd, "dataset"));
  SplitSamples sp = prepare_splits(ds, o.folds, o.round, "", true);

  UnetSpec spec;
  spec.depth = o.depth;
  spec.init_filters = o.filters;
  spec.in_bands = ds.bands;
  spec.classes = ds.classes;
  spec.dropout = static_cast<float>(o.dropout);
  spec.seed = g.seed;
  NetGraph net = build_unet(spec);

  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch = o.batch;
  tc.lr = static_cast<float>(o.lr);
  tc.patience = o.patience;
  tc.seed = g.seed;
  tc.verbose = o.verbose;
  TrainHistory h = train(net, sp.train, sp.val, tc);

  fs::path mdir = wd / "model";
  save_model(net, mdir.string());
  sp.stats.save((mdir / "channel_stats").string());

  std::ostringstream rep;
  rep << sfmt("depth %d  filters %d  bands %d  classes %d  seed %llu\n",
              o.depth, o.filters, ds.bands, ds.classes,
              static_cast<unsigned long long>(g.seed));
  rep << sfmt("train %zu  val %zu  folds %d  round %d\n", sp.train.size(),
              sp.val.size(), o.folds, o.round);
  rep << "epoch  train_loss  val_giou  val_wiou\n";
  for (size_t e = 0; e < h.epochs.size(); ++e)
    rep << sfmt("%5zu  %10.6f  %8.4f  %8.4f\n", e + 1, h.epochs[e].train_loss,
                h.epochs[e].val_giou, h.epochs[e].val_wiou);
  rep << sfmt("best epoch %d  best val wIoU %.4f%s\n", h.best_epoch + 1,
              h.best_wiou, h.early_stopped ? "  (early stop)" : "");
  write_text(wd / "train_report.txt", rep.str());

  std::cout << sfmt("trained %zu epochs; best val wIoU %.4f at epoch %d\n",
                    h.epochs.size(), h.best_wiou, h.best_epoch + 1)
            << "model -> " << mdir.string() << "\n";
  return 0;
}

int cmd_preprocess(const GlobalOpts& g, const Opts& o) {
  fs::path wd(g.workdir);
  LoadedDataset ds = load_dataset(resolve(o.data, wd, "dataset"));
  ChannelStats stats;
  if (!o.model.empty()) {
    stats = ChannelStats::load((fs::path(o.model) / "channel_stats").string());
  } else {
    std::vector<size_t> all(ds.samples.size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = i;
    stats = fit_channel_stats(ds, all);
  }

  fs::path out = resolve(o.out, wd, "cubes");
  fs::create_directories(out);
  int h = 0, w = 0;
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    Tensor pn = preprocess_to_pn(ds.samples[i].raw, ds.calib, ds.preprocess);
    Tensor clipped = clip_channels(pn, stats);
    h = clipped.height();
    w = clipped.width();
    write_hscb((out / sfmt("%04zu.hscb", i)).string(), clipped);
  }
  stats.save((out / "channel_stats").string());
  std::cout << sfmt("wrote %zu clipped cubes (%dx%dx%d, %s) to %s\n",
                    ds.samples.size(), h, w, ds.bands, "pixel-normalized",
                    out.c_str());
  return 0;
}

int cmd_analyze(const GlobalOpts& g, const Opts& o) {
  NetGraph net = load_model(o.model);
  int h = 0, w = 0, b = 0;
  if (sscanf(o.input_dims.c_str(), "%dx%dx%d", &h, &w, &b) != 3 || h <= 0 ||
      w <= 0 || b <= 0)
    throw ConfigError("--input must be HxWxB, got '" + o.input_dims + "'");
  if (b != net.in_bands())
    throw ConfigError(sfmt("input has %d bands but the model expects %d", b,
                           net.in_bands()));

  ComplexityReport rep = analyze(net, h, w);
  std::cout << format_report(rep);
  if (o.exact) {
    ExactOps ex = exact_op_count(net, h, w);
    std::cout << sfmt("exact conv flops   %llu\n",
                      static_cast<unsigned long long>(ex.conv_flops))
              << sfmt("exact other ops    %llu\n",
                      static_cast<unsigned long long>(ex.other_ops));
  }
  fs::path records = fs::path(g.workdir) / "analyze.records";
  write_text(records, report_records(rep));
  std::cout << "records -> " << records.string() << "\n";
  return 0;
}

int cmd_sensitivity(const GlobalOpts& g, const Opts& o) {
  fs::path wd(g.workdir);
  std::string mdir = resolve(o.model, wd, "model");
  NetGraph net = load_model(mdir);
  LoadedDataset ds = load_dataset(resolve(o.data, wd, "dataset"));
  SplitSamples sp =
      prepare_splits(ds, o.folds, o.round, mdir, !has_fused_norm(net));
  std::vector<Sample> probe = std::move(sp.val);
  if (o.samples > 0 && static_cast<size_t>(o.samples) < probe.size())
    probe.resize(o.samples);

  SensitivityCurve curve = sensitivity_analysis(net, probe);
  curve.save((wd / "sensitivity.curve").string());

  std::ostringstream rep;
  rep << sfmt("baseline wIoU %.4f over %zu cubes\n", curve.baseline,
              probe.size());
  rep << sfmt("%-12s", "layer");
  for (float r : curve.ratios) rep << sfmt("  r=%.1f ", r);
  rep << "\n";
  for (const auto& [id, vals] : curve.values) {
    rep << sfmt("%-12s", id.c_str());
    for (double v : vals) rep << sfmt("  %6.4f", v);
    rep << "\n";
  }
  write_text(wd / "sensitivity.txt", rep.str());
  std::cout << rep.str() << "curve -> " << (wd / "sensitivity.curve").string()
            << "\n";
  return 0;
}

IterationConfig iteration_config(const GlobalOpts& g, const Opts& o) {
  IterationConfig ic;
  ic.overall_pr = o.overall_pr;
  ic.exclusion_threshold = o.exclusion_threshold;
  ic.layer_gate = o.layer_gate;
  ic.locked_gate = o.locked_gate;
  ic.model_gate = o.model_gate;
  ic.max_retries = o.max_retries;
  ic.retry_step = o.retry_step;
  ic.sensitivity_samples = o.samples;
  ic.finetune.epochs = o.finetune_epochs;
  ic.finetune.batch = o.batch;
  ic.finetune.lr = static_cast<float>(o.finetune_lr);
  ic.finetune.patience = o.patience;
  ic.finetune.seed = g.seed;
  ic.finetune.verbose = o.verbose;
  return ic;
}

int cmd_prune(const GlobalOpts& g, const Opts& o) {
  fs::path wd(g.workdir);
  std::string mdir = resolve(o.model, wd, "model");
  NetGraph net = load_model(mdir);
  LoadedDataset ds = load_dataset(resolve(o.data, wd, "dataset"));
  SplitSamples sp = prepare_splits(ds, o.folds, o.round, mdir, true);
  IterationConfig ic = iteration_config(g, o);

  fs::create_directories(wd / "prune");
  std::ostringstream rep;
  uint64_t flops_first = 0, flops_last = 0;
  for (int it = 0; it < o.iterations; ++it) {
    IterationReport r = run_iteration(net, sp.train, sp.val, ic);
    if (it == 0) flops_first = r.flops_before;
    flops_last = r.flops_after;
    r.scheme.save((wd / "prune" / sfmt("scheme_%d", it + 1)).string());
    rep << sfmt("== iteration %d ==\n", it + 1) << format_iteration_report(r);
    std::cout << sfmt(
        "iteration %d: ratio %.4f  wIoU %.4f -> %.4f (finetuned %.4f)%s\n",
        it + 1, r.achieved_ratio, r.wiou_before, r.wiou_pruned,
        r.wiou_finetuned, r.retries ? sfmt("  [%d retries]", r.retries).c_str() : "");
  }
  double cumulative =
      flops_first ? static_cast<double>(flops_last) / flops_first : 1.0;
  rep << sfmt("cumulative conv FLOPS ratio %.4f (%llu -> %llu)\n", cumulative,
              static_cast<unsigned long long>(flops_first),
              static_cast<unsigned long long>(flops_last));

  fs::path pdir = wd / "pruned";
  save_model(net, pdir.string());
  sp.stats.save((pdir / "channel_stats").string());
  write_text(wd / "prune_report.txt", rep.str());
  std::cout << sfmt("cumulative conv FLOPS ratio %.4f\n", cumulative)
            << "model -> " << pdir.string() << "\n";
  return 0;
}

int cmd_prune_at_init(const GlobalOpts& g, const Opts& o) {
  fs::path wd(g.workdir);
  LoadedDataset ds = load_dataset(resolve(o.data, wd, "dataset"));
  SplitSamples sp = prepare_splits(ds, o.folds, o.round, "", true);
  IterationConfig ic = iteration_config(g, o);
  ic.finetune.epochs = o.epochs;
  ic.finetune.lr = static_cast<float>(o.lr);

  std::ostringstream rep;
  std::vector<InitPruneReport> reports;
  for (int s = 0; s < o.seeds; ++s) {
    UnetSpec spec;
    spec.depth = o.depth;
    spec.init_filters = o.filters;
    spec.in_bands = ds.bands;
    spec.classes = ds.classes;
    spec.dropout = static_cast<float>(o.dropout);
    spec.seed = g.seed + static_cast<uint64_t>(s);
    NetGraph net = build_unet(spec);
    InitPruneReport r = prune_at_init(net, sp.train, sp.val, o.overall_pr, ic);

    fs::path sdir = wd / "init_pruned" / sfmt("seed%llu",
        static_cast<unsigned long long>(spec.seed));
    save_model(net, sdir.string());
    sp.stats.save((sdir / "channel_stats").string());
    r.scheme.save((sdir / "scheme").string());
    std::string line =
        sfmt("seed %llu: ratio %.4f  flops %llu -> %llu  best wIoU %.4f\n",
             static_cast<unsigned long long>(spec.seed), r.achieved_ratio,
             static_cast<unsigned long long>(r.flops_before),
             static_cast<unsigned long long>(r.flops_after),
             r.history.best_wiou);
    rep << line;
    std::cout << line;
    reports.push_back(std::move(r));
  }

  // chosen-ratio matrix across seeds, one row per prunable layer
  std::vector<std::string> layers;
  for (const auto& r : reports)
    for (const auto& [id, ratio] : r.scheme.ratios)
      if (std::find(layers.begin(), layers.end(), id) == layers.end())
        layers.push_back(id);
  std::sort(layers.begin(), layers.end());
  rep << sfmt("%-12s", "layer");
  for (int s = 0; s < o.seeds; ++s) rep << sfmt("  seed+%d", s);
  rep << "\n";
  for (const auto& id : layers) {
    rep << sfmt("%-12s", id.c_str());
    for (const auto& r : reports) rep << sfmt("  %6.1f", r.scheme.ratio_of(id));
    rep << "\n";
  }
  write_text(wd / "init_prune_report.txt", rep.str());
  std::cout << "report -> " << (wd / "init_prune_report.txt").string() << "\n";
  return 0;
}

int cmd_quantize(const GlobalOpts& g, const Opts& o) {
  fs::path wd(g.workdir);
  std::string mdir = resolve(o.model, wd, "model");
  NetGraph base = load_model(mdir);
  ChannelStats stats =
      ChannelStats::load((fs::path(mdir) / "channel_stats").string());
  if (has_fused_norm(base))
    throw ConfigError("model already carries a fused normalization layer");

  NetGraph explicit_g = cross_layer_equalize(fold_bn(base), o.cle_passes);
  NetGraph fused =
      fuse_symmetric_norm(explicit_g, NormalizationParams::from_stats(stats));

  std::vector<Tensor> cubes = load_calib_cubes(resolve(o.calib, wd, "cubes"));

  CalibrationPolicy pol_fused;
  pol_fused.input = {QuantMode::Affine, RangeFit::MinMax};
  pol_fused.mse_exponents_below = o.mse_window;
  QuantParamMap params_fused = calibrate(fused, cubes, pol_fused);

  std::vector<Tensor> normed;
  normed.reserve(cubes.size());
  for (const auto& c : cubes) normed.push_back(symmetric_normalize(c, stats));
  CalibrationPolicy pol_explicit;
  pol_explicit.mse_exponents_below = o.mse_window;
  QuantParamMap params_explicit = calibrate(explicit_g, normed, pol_explicit);

  DriftReport drift = requantization_drift(explicit_g, fused, params_explicit,
                                           params_fused, cubes);

  fs::path qdir = wd / "quant";
  save_model(fused, (qdir / "model").string());
  stats.save((qdir / "model" / "channel_stats").string());
  save_quant_params(params_fused, (qdir / "params").string());
  save_quant_params(params_explicit, (qdir / "params_explicit").string());

  double worst = 0.0;
  for (double d : drift.per_image) worst = std::max(worst, d);
  std::ostringstream rep;
  rep << sfmt("model %s  calib cubes %zu  cle passes %d\n", mdir.c_str(),
              cubes.size(), o.cle_passes);
  rep << sfmt("quantized tensors %zu\n", params_fused.size());
  rep << sfmt("argmax drift fused vs explicit: mean %.4f%%  worst %.4f%%\n",
              100.0 * drift.mean_changed, 100.0 * worst);
  std::string ike = explicit_g.input_id() + ".out";
  std::string ikf = fused.input_id() + ".out";
  rep << sfmt("input exponent explicit %d  fused %d\n",
              params_explicit.at(ike).exponent, params_fused.at(ikf).exponent);
  write_text(wd / "quant_report.txt", rep.str());

  std::cout << rep.str() << "model -> " << (qdir / "model").string()
            << "\nparams -> " << (qdir / "params").string() << "\n";
  return 0;
}

int cmd_eval(const GlobalOpts& g, const Opts& o) {
  fs::path wd(g.workdir);
  NetGraph net = load_model(o.model);
  LoadedDataset ds = load_dataset(o.data);
  bool fused = has_fused_norm(net);
  SplitSamples sp =
      prepare_splits(ds, o.folds, o.round, o.model, !fused, true);

  EvalResult r = evaluate(net, sp.test);
  std::ostringstream rep;
  rep << sfmt("test cubes %zu (fold round %d)\n", sp.test.size(), o.round);
  rep << metrics_report(r.cm);

  if (!o.quant.empty()) {
    QuantParamMap params = load_quant_params(o.quant);
    ConfusionMatrix qcm(ds.classes);
    uint64_t agree = 0, pixels = 0;
    for (const auto& s : sp.test) {
      Tensor qprob = quantized_forward(net, s.cube, params);
      LabelMap qpred = argmax_map(qprob);
      accumulate_into(qcm, qpred.data, s.labels.data);
      LabelMap fpred = predict(net, s.cube);
      for (size_t i = 0; i < qpred.data.size(); ++i)
        agree += qpred.data[i] == fpred.data[i];
      pixels += qpred.data.size();
    }
    rep << "\nint8 simulation\n" << metrics_report(qcm);
    rep << sfmt("float/int8 argmax agreement %.4f%%\n",
                pixels ? 100.0 * agree / pixels : 0.0);
  }

  write_text(wd / "eval.txt", rep.str());
  std::cout << rep.str();
  return 0;
}

int cmd_bench(const GlobalOpts& g, const Opts& o) {
  fs::path wd(g.workdir);
  LoadedDataset ds = load_dataset(resolve(o.frames, wd, "dataset"));
  std::string mdir = resolve(o.model, wd, "model");
  NetGraph net = load_model(mdir);
  ChannelStats stats =
      ChannelStats::load((fs::path(mdir) / "channel_stats").string());
  if (!has_fused_norm(net))
    net = fuse_symmetric_norm(net, NormalizationParams::from_stats(stats));

  std::vector<RawFrame> raws;
  raws.reserve(ds.samples.size());
  for (const auto& s : ds.samples) raws.push_back(s.raw);
  auto source = [&raws](int i) {
    return raws[static_cast<size_t>(i) % raws.size()];
  };

  std::vector<int> stages = o.stages;
  if (stages.empty()) stages = {1, 2, 3};
  std::ostringstream rep;
  std::vector<BenchRun> runs;
  for (int s : stages) {
    auto steps = production_steps(ds.preprocess, ds.calib, stats, net, source);
    StageProfile p =
        run_pipeline(steps, production_plan(s), o.repeat, {}, o.warmup);
    rep << sfmt("== %d stage(s), %d frames ==\n", s, o.repeat)
        << profile_report(p) << "\n";
    runs.push_back(BenchRun{sfmt("%d-stage", s), s, std::move(p)});
  }
  std::string matrix = format_bench_matrix(bench_matrix(runs));
  rep << matrix;
  write_text(wd / "bench.txt", rep.str());
  std::cout << rep.str() << "report -> " << (wd / "bench.txt").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hyperspectral segmentation co-design toolkit"};
  app.require_subcommand(1);

  GlobalOpts g;
  Opts o;
  app.add_option("--seed", g.seed, "global RNG seed")->capture_default_str();
  app.add_option("--config", g.config, "key = value config file");
  app.add_option("--workdir", g.workdir, "artifact output directory")
      ->capture_default_str();

  const CLI::Validator unit_ratio(
      [](std::string& s) -> std::string {
        double v = 0.0;
        try {
          v = std::stod(s);
        } catch (...) {
          return "not a number: " + s;
        }
        if (!(v >= 0.0 && v < 1.0)) return "must lie in [0, 1): " + s;
        return {};
      },
      "RATIO");

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->fallthrough();
  auto* gen_scene = gen->add_option("--scene", o.scene, "benchmark or mini")
                        ->check(CLI::IsMember({"benchmark", "mini"}))
                        ->capture_default_str();
  auto* gen_count =
      gen->add_option("--count", o.count, "frames to generate")
          ->check(CLI::PositiveNumber)
          ->capture_default_str();

  auto* tr = app.add_subcommand("train", "train a U-Net on a dataset");
  tr->fallthrough();
  auto* tr_data = tr->add_option("--data", o.data, "dataset directory");
  auto* tr_depth = tr->add_option("--depth", o.depth)->capture_default_str();
  auto* tr_filters =
      tr->add_option("--filters", o.filters)->capture_default_str();
  auto* tr_dropout =
      tr->add_option("--dropout", o.dropout)->capture_default_str();
  auto* tr_epochs = tr->add_option("--epochs", o.epochs)->capture_default_str();
  auto* tr_batch = tr->add_option("--batch", o.batch)->capture_default_str();
  auto* tr_lr = tr->add_option("--lr", o.lr)->capture_default_str();
  auto* tr_pat =
      tr->add_option("--patience", o.patience)->capture_default_str();
  auto* tr_folds = tr->add_option("--folds", o.folds)->capture_default_str();
  auto* tr_round =
      tr->add_option("--round", o.round, "fold rotation")->capture_default_str();
  tr->add_flag("--verbose", o.verbose, "per-epoch progress on stderr");

  auto* pp = app.add_subcommand(
      "preprocess", "raw frames to clipped pixel-normalized cubes");
  pp->fallthrough();
  auto* pp_data = pp->add_option("--data", o.data, "dataset directory");
  auto* pp_out = pp->add_option("--out", o.out, "cube output directory");
  auto* pp_model = pp->add_option(
      "--model", o.model, "reuse this model's channel stats (default: refit)");

  auto* an = app.add_subcommand("analyze", "static complexity of a model");
  an->fallthrough();
  an->add_option("model", o.model, "model directory")->required();
  an->add_option("--input", o.input_dims, "input dims as HxWxB")->required();
  an->add_flag("--exact", o.exact, "also count every arithmetic op exactly");

  auto* se = app.add_subcommand("sensitivity",
                                "per-layer pruning sensitivity curves");
  se->fallthrough();
  auto* se_data = se->add_option("--data", o.data, "dataset directory");
  auto* se_model = se->add_option("--model", o.model, "model directory");
  auto* se_samples = se->add_option("--samples", o.samples,
                                    "probe-set cap, 0 = whole val fold")
                         ->capture_default_str();
  auto* se_folds = se->add_option("--folds", o.folds)->capture_default_str();
  auto* se_round = se->add_option("--round", o.round)->capture_default_str();

  auto* pr = app.add_subcommand("prune", "iterative structured pruning");
  pr->fallthrough();
  auto* pr_data = pr->add_option("--data", o.data, "dataset directory");
  auto* pr_model = pr->add_option("--model", o.model, "model directory");
  auto* pr_pr = pr->add_option("--overall-pr", o.overall_pr,
                               "FLOPS fraction to remove per iteration")
                    ->check(unit_ratio)
                    ->capture_default_str();
  auto* pr_iters =
      pr->add_option("--iterations", o.iterations)->check(CLI::PositiveNumber)
          ->capture_default_str();
  auto* pr_excl = pr->add_option("--exclusion-threshold", o.exclusion_threshold)
                      ->capture_default_str();
  auto* pr_lgate =
      pr->add_option("--layer-gate", o.layer_gate)->capture_default_str();
  auto* pr_kgate =
      pr->add_option("--locked-gate", o.locked_gate)->capture_default_str();
  auto* pr_mgate =
      pr->add_option("--model-gate", o.model_gate)->capture_default_str();
  auto* pr_retries =
      pr->add_option("--max-retries", o.max_retries)->capture_default_str();
  auto* pr_rstep =
      pr->add_option("--retry-step", o.retry_step)->capture_default_str();
  auto* pr_samples = pr->add_option("--sensitivity-samples", o.samples)
                         ->capture_default_str();
  auto* pr_fte = pr->add_option("--finetune-epochs", o.finetune_epochs)
                     ->capture_default_str();
  auto* pr_ftl =
      pr->add_option("--finetune-lr", o.finetune_lr)->capture_default_str();
  auto* pr_batch = pr->add_option("--batch", o.batch)->capture_default_str();
  auto* pr_pat =
      pr->add_option("--patience", o.patience)->capture_default_str();
  auto* pr_folds = pr->add_option("--folds", o.folds)->capture_default_str();
  auto* pr_round = pr->add_option("--round", o.round)->capture_default_str();
  pr->add_flag("--verbose", o.verbose, "per-epoch finetune progress");

  auto* pi = app.add_subcommand("prune-at-init",
                                "prune untrained models, then train");
  pi->fallthrough();
  auto* pi_data = pi->add_option("--data", o.data, "dataset directory");
  auto* pi_seeds = pi->add_option("--seeds", o.seeds, "model seeds to compare")
                       ->check(CLI::PositiveNumber)
                       ->capture_default_str();
  auto* pi_pr = pi->add_option("--overall-pr", o.overall_pr)
                    ->check(unit_ratio)
                    ->capture_default_str();
  auto* pi_depth = pi->add_option("--depth", o.depth)->capture_default_str();
  auto* pi_filters =
      pi->add_option("--filters", o.filters)->capture_default_str();
  auto* pi_dropout =
      pi->add_option("--dropout", o.dropout)->capture_default_str();
  auto* pi_epochs =
      pi->add_option("--epochs", o.epochs)->capture_default_str();
  auto* pi_batch = pi->add_option("--batch", o.batch)->capture_default_str();
  auto* pi_lr = pi->add_option("--lr", o.lr)->capture_default_str();
  auto* pi_pat =
      pi->add_option("--patience", o.patience)->capture_default_str();
  auto* pi_samples = pi->add_option("--sensitivity-samples", o.samples)
                         ->capture_default_str();
  auto* pi_folds = pi->add_option("--folds", o.folds)->capture_default_str();
  auto* pi_round = pi->add_option("--round", o.round)->capture_default_str();

  auto* qz = app.add_subcommand("quantize",
                                "power-of-two int8 post-training quantization");
  qz->fallthrough();
  auto* qz_model = qz->add_option("--model", o.model, "model directory");
  auto* qz_calib =
      qz->add_option("--calib", o.calib, "directory of calibration .hscb cubes");
  auto* qz_passes =
      qz->add_option("--passes", o.cle_passes, "cross-layer equalization passes")
          ->capture_default_str();
  auto* qz_window = qz->add_option("--window", o.mse_window,
                                   "min-MSE exponent search width")
                        ->capture_default_str();

  auto* ev = app.add_subcommand("eval", "per-class IoU report on the test fold");
  ev->fallthrough();
  ev->add_option("model", o.model, "model directory")->required();
  ev->add_option("dataset", o.data, "dataset directory")->required();
  auto* ev_quant = ev->add_option(
      "--quant", o.quant, "quantization params file; adds an int8 report");
  auto* ev_folds = ev->add_option("--folds", o.folds)->capture_default_str();
  auto* ev_round = ev->add_option("--round", o.round)->capture_default_str();

  auto* be = app.add_subcommand("bench", "staged pipeline throughput");
  be->fallthrough();
  auto* be_frames =
      be->add_option("--frames", o.frames, "dataset directory with raw frames");
  auto* be_model = be->add_option("--model", o.model, "model directory");
  auto* be_stages = be->add_option("--stages", o.stages, "stage counts to run")
                        ->check(CLI::Range(1, 3));
  auto* be_repeat =
      be->add_option("--repeat", o.repeat, "frames per run")
          ->check(CLI::PositiveNumber)
          ->capture_default_str();
  auto* be_warmup = be->add_option("--warmup", o.warmup,
                                   "frames excluded from stats, -1 = auto")
                        ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    KvFile cfg;
    Merge m;
    if (!g.config.empty()) {
      cfg = KvFile::load(g.config);
      cfg.require_known(kConfigKeys);
      m.cfg = &cfg;
      // globals obey the same precedence as everything else
      g.seed = m.u(app.get_option("--seed"), g.seed, "seed");
      g.workdir = m.s(app.get_option("--workdir"), g.workdir, "workdir");
    }
    fs::create_directories(g.workdir);

    if (app.got_subcommand(gen)) {
      o.scene = m.s(gen_scene, o.scene, "scene");
      o.count = m.i(gen_count, o.count, "count");
      return cmd_gen_data(g, o);
    }
    if (app.got_subcommand(tr)) {
      o.data = m.s(tr_data, o.data, "dataset");
      o.depth = m.i(tr_depth, o.depth, "depth");
      o.filters = m.i(tr_filters, o.filters, "filters");
      o.dropout = m.d(tr_dropout, o.dropout, "dropout");
      o.epochs = m.i(tr_epochs, o.epochs, "epochs");
      o.batch = m.i(tr_batch, o.batch, "batch");
      o.lr = m.d(tr_lr, o.lr, "lr");
      o.patience = m.i(tr_pat, o.patience, "patience");
      o.folds = m.i(tr_folds, o.folds, "folds");
      o.round = m.i(tr_round, o.round, "round");
      return cmd_train(g, o);
    }
    if (app.got_subcommand(pp)) {
      o.data = m.s(pp_data, o.data, "dataset");
      o.out = m.s(pp_out, o.out, "out");
      o.model = m.s(pp_model, o.model, "model");
      return cmd_preprocess(g, o);
    }
    if (app.got_subcommand(an)) return cmd_analyze(g, o);
    if (app.got_subcommand(se)) {
      o.data = m.s(se_data, o.data, "dataset");
      o.model = m.s(se_model, o.model, "model");
      o.samples = m.i(se_samples, o.samples, "samples");
      o.folds = m.i(se_folds, o.folds, "folds");
      o.round = m.i(se_round, o.round, "round");
      return cmd_sensitivity(g, o);
    }
    if (app.got_subcommand(pr)) {
      o.data = m.s(pr_data, o.data, "dataset");
      o.model = m.s(pr_model, o.model, "model");
      o.overall_pr = m.d(pr_pr, o.overall_pr, "overall_pr");
      o.iterations = m.i(pr_iters, o.iterations, "iterations");
      o.exclusion_threshold =
          m.d(pr_excl, o.exclusion_threshold, "exclusion_threshold");
      o.layer_gate = m.d(pr_lgate, o.layer_gate, "layer_gate");
      o.locked_gate = m.d(pr_kgate, o.locked_gate, "locked_gate");
      o.model_gate = m.d(pr_mgate, o.model_gate, "model_gate");
      o.max_retries = m.i(pr_retries, o.max_retries, "max_retries");
      o.retry_step = m.d(pr_rstep, o.retry_step, "retry_step");
      o.samples = m.i(pr_samples, o.samples, "sensitivity_samples");
      o.finetune_epochs = m.i(pr_fte, o.finetune_epochs, "finetune_epochs");
      o.finetune_lr = m.d(pr_ftl, o.finetune_lr, "finetune_lr");
      o.batch = m.i(pr_batch, o.batch, "batch");
      o.patience = m.i(pr_pat, o.patience, "patience");
      o.folds = m.i(pr_folds, o.folds, "folds");
      o.round = m.i(pr_round, o.round, "round");
      return cmd_prune(g, o);
    }
    if (app.got_subcommand(pi)) {
      o.data = m.s(pi_data, o.data, "dataset");
      o.seeds = m.i(pi_seeds, o.seeds, "seeds");
      o.overall_pr = m.d(pi_pr, o.overall_pr, "overall_pr");
      o.depth = m.i(pi_depth, o.depth, "depth");
      o.filters = m.i(pi_filters, o.filters, "filters");
      o.dropout = m.d(pi_dropout, o.dropout, "dropout");
      o.epochs = m.i(pi_epochs, o.epochs, "epochs");
      o.batch = m.i(pi_batch, o.batch, "batch");
      o.lr = m.d(pi_lr, o.lr, "lr");
      o.patience = m.i(pi_pat, o.patience, "patience");
      o.samples = m.i(pi_samples, o.samples, "sensitivity_samples");
      o.folds = m.i(pi_folds, o.folds, "folds");
      o.round = m.i(pi_round, o.round, "round");
      return cmd_prune_at_init(g, o);
    }
    if (app.got_subcommand(qz)) {
      o.model = m.s(qz_model, o.model, "model");
      o.calib = m.s(qz_calib, o.calib, "calib");
      o.cle_passes = m.i(qz_passes, o.cle_passes, "cle_passes");
      o.mse_window = m.i(qz_window, o.mse_window, "mse_window");
      return cmd_quantize(g, o);
    }
    if (app.got_subcommand(ev)) {
      (void)ev_quant;
      o.folds = m.i(ev_folds, o.folds, "folds");
      o.round = m.i(ev_round, o.round, "round");
      return cmd_eval(g, o);
    }
    if (app.got_subcommand(be)) {
      o.frames = m.s(be_frames, o.frames, "frames");
      o.model = m.s(be_model, o.model, "model");
      if (be_stages->count() == 0 && m.cfg && m.cfg->has("stages")) {
        o.stages.clear();
        for (int64_t s : m.cfg->get_ints("stages"))
          o.stages.push_back(static_cast<int>(s));
      }
      o.repeat = m.i(be_repeat, o.repeat, "repeat");
      o.warmup = m.i(be_warmup, o.warmup, "warmup");
      return cmd_bench(g, o);
    }
    return 2;  // unreachable with require_subcommand(1)
  } catch (const Error& e) {
    std::cerr << "error: " << e.category() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
}
