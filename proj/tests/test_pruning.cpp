#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <vector>

#include "doctest.h"
#include "hsicomp/complexity.hpp"
#include "hsicomp/data.hpp"
#include "hsicomp/error.hpp"
#include "hsicomp/eval.hpp"
#include "hsicomp/kvfile.hpp"
#include "hsicomp/netgraph.hpp"
#include "hsicomp/pruning.hpp"
#include "support.hpp"

using namespace hsicomp;
using namespace testsup;

namespace {

LayerNode conv_node_raw(std::string id, std::string input, int in_ch,
                        int out_ch, int k) {
  LayerNode n;
  n.id = std::move(id);
  n.kind = LayerKind::Conv2D;
  n.inputs = {std::move(input)};
  n.in_ch = in_ch;
  n.out_ch = out_ch;
  n.kh = n.kw = k;
  n.weight.assign(n.weight_count(), 0.0f);
  n.bias.assign(out_ch, 0.0f);
  return n;
}

int expected_kept(float ratio, int out_ch) {
  if (ratio <= 0.0f) return out_ch;
  int removed = static_cast<int>(std::lround(double(ratio) * out_ch));
  removed = std::min(removed, out_ch - 1);
  return out_ch - removed;
}

// Random scheme over the prunable layers, ratios on the 0.1 grid.
PruningScheme random_scheme(std::mt19937_64& rng, const NetGraph& g) {
  PruningScheme s;
  std::uniform_int_distribution<int> step(1, 9);
  std::bernoulli_distribution touch(0.6);
  for (const std::string& id : prunable_layers(g))
    if (touch(rng)) s.ratios[id] = 0.1f * step(rng);
  return s;
}

// Smooth synthetic sensitivity: wIoU falls quadratically with the ratio,
// amplitude varying per layer.
SensitivityCurve synthetic_curves(const NetGraph& g, double baseline) {
  SensitivityCurve c;
  for (int k = 0; k < 10; ++k) c.ratios.push_back(0.1f * k);
  c.baseline = baseline;
  int l = 0;
  for (const std::string& id : prunable_layers(g)) {
    const double amp = 0.01 + 0.015 * (l++ % 7);
    auto& v = c.values[id];
    for (float r : c.ratios) v.push_back(baseline - amp * double(r) * r);
  }
  return c;
}

}  // namespace

TEST_CASE("filter ranking is ascending L1 with ties toward the lower index") {
  LayerNode n = conv_node_raw("c", "in", 2, 4, 1);
  auto set = [&](int f, float a, float b) {
    n.weight[n.widx(f, 0, 0, 0)] = a;
    n.weight[n.widx(f, 0, 0, 1)] = b;
  };
  set(0, 1.5f, -1.5f);   // L1 = 3
  set(1, 0.25f, -0.25f); // L1 = 0.5
  set(2, -3.0f, 0.0f);   // L1 = 3, ties with filter 0
  set(3, 1.0f, 0.0f);    // L1 = 1
  n.bias = {0.0f, 100.0f, 0.0f, 0.0f};  // bias never counts

  CHECK(rank_filters_l1(n) == std::vector<int>{1, 3, 0, 2});

  LayerNode relu;
  relu.id = "r";
  relu.kind = LayerKind::ReLU;
  CHECK_THROWS_AS(rank_filters_l1(relu), SchemeError);
}

TEST_CASE("prunable layers are every conv kind except the class head") {
  NetGraph g = build_unet(2, 4, 3, 2);
  std::vector<std::string> conv_ids;
  for (const LayerNode& n : g.nodes())
    if (is_conv_kind(n.kind)) conv_ids.push_back(n.id);

  std::vector<std::string> p = prunable_layers(g);
  CHECK(p.size() == conv_ids.size() - 1);
  CHECK(std::find(p.begin(), p.end(), "cnv_out") == p.end());
  for (const std::string& id : p) {
    CHECK(is_conv_kind(g.node(id).kind));
    CHECK(std::find(conv_ids.begin(), conv_ids.end(), id) != conv_ids.end());
  }
}

TEST_CASE("scheme validation rejects off-grid, capped, unknown and head layers") {
  NetGraph g = build_unet(1, 4, 3, 2);
  const std::string any = prunable_layers(g).front();
  std::string relu_id;
  for (const LayerNode& n : g.nodes())
    if (n.kind == LayerKind::ReLU) {
      relu_id = n.id;
      break;
    }
  REQUIRE(!relu_id.empty());

  PruningScheme ok;
  ok.ratios[any] = 0.3f;
  CHECK_NOTHROW(ok.validate(g));
  ok.ratios[any] = 0.9f;
  CHECK_NOTHROW(ok.validate(g));

  PruningScheme bad;
  bad.ratios[any] = 0.35f;
  CHECK_THROWS_AS(bad.validate(g), SchemeError);
  bad.ratios[any] = 1.0f;
  CHECK_THROWS_AS(bad.validate(g), SchemeError);
  bad.ratios[any] = -0.1f;
  CHECK_THROWS_AS(bad.validate(g), SchemeError);

  PruningScheme unknown;
  unknown.ratios["nope"] = 0.1f;
  CHECK_THROWS_AS(unknown.validate(g), SchemeError);

  PruningScheme nonconv;
  nonconv.ratios[relu_id] = 0.1f;
  CHECK_THROWS_AS(nonconv.validate(g), SchemeError);

  PruningScheme head;
  head.ratios["cnv_out"] = 0.1f;
  CHECK_THROWS_AS(head.validate(g), SchemeError);
}

TEST_CASE("apply_scheme keeps the high-L1 complement with one survivor floor") {
  NetGraph g = build_unet(2, 4, 3, 2);
  std::vector<std::string> p = prunable_layers(g);
  REQUIRE(p.size() >= 3);

  PruningScheme s;
  s.ratios[p[0]] = 0.5f;
  s.ratios[p[1]] = 0.9f;
  s.ratios[p[2]] = 0.1f;

  ApplyResult res = apply_scheme(g, s);

  for (const std::string& id : p) {
    const LayerNode& before = g.node(id);
    const LayerNode& after = res.graph.node(id);
    const int want = expected_kept(s.ratio_of(id), before.out_ch);
    CHECK(after.out_ch == want);

    const auto& kept = res.mask.kept.at(id);
    CHECK(int(kept.size()) == want);
    CHECK(std::is_sorted(kept.begin(), kept.end()));

    // survivors are exactly the complement of the lowest-L1 prefix
    std::vector<int> order = rank_filters_l1(before);
    std::vector<int> expect(order.begin() + (before.out_ch - want),
                            order.end());
    std::sort(expect.begin(), expect.end());
    CHECK(kept == expect);
  }

  // a 0.9 ratio on a 4-filter layer rounds to removing all four; the floor
  // keeps one
  CHECK(res.graph.node(p[1]).out_ch >= 1);
  if (g.node(p[1]).out_ch == 4) CHECK(res.graph.node(p[1]).out_ch == 1);

  // BN rows follow their conv
  for (const LayerNode& n : res.graph.nodes())
    if (n.kind == LayerKind::BatchNorm) {
      CHECK(n.out_ch == res.graph.node(n.inputs[0]).out_ch);
      CHECK(int(n.gamma.size()) == n.out_ch);
    }

  // the head keeps the class count and the net still runs
  CHECK(res.graph.class_count() == 2);
  std::mt19937_64 rng(5);
  Tensor cube = random_cube(rng, 8, 8, 3, -1.0f, 1.0f);
  Tensor probs = forward(res.graph, cube);
  CHECK(probs.bands() == 2);
}

TEST_CASE("pruning equals zeroing the dropped channels in place") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    NetGraph g = random_unet(rng, 2);
    PruningScheme scheme = random_scheme(rng, g);

    ApplyResult applied = apply_scheme(g, scheme);

    // flops bookkeeping must agree with the rebuilt graph exactly
    CHECK(scheme_conv_flops(g, 8, 8, scheme) ==
          analyze(applied.graph, 8, 8).flops);

    NetGraph zeroed = g;
    for (const auto& [id, ratio] : scheme.ratios) {
      const LayerNode& orig = g.node(id);
      const int removed = orig.out_ch - expected_kept(ratio, orig.out_ch);
      std::vector<int> order = rank_filters_l1(orig);
      std::vector<int> dropped(order.begin(), order.begin() + removed);

      LayerNode& zn = zeroed.node(id);
      for (int f : dropped) {
        for (int dy = 0; dy < zn.kh; ++dy)
          for (int dx = 0; dx < zn.kw; ++dx)
            for (int ic = 0; ic < zn.in_ch; ++ic)
              zn.weight[zn.widx(f, dy, dx, ic)] = 0.0f;
        zn.bias[f] = 0.0f;
      }
      for (const std::string& cid : zeroed.consumers(id)) {
        LayerNode& c = zeroed.node(cid);
        if (c.kind == LayerKind::BatchNorm)
          for (int f : dropped) {
            c.gamma[f] = 0.0f;
            c.beta[f] = 0.0f;
          }
        if (c.kind == LayerKind::DepthwiseNorm)
          for (int f : dropped) {
            c.weight[f] = 0.0f;
            c.bias[f] = 0.0f;
          }
      }
    }

    Tensor cube = random_cube(rng, 8, 8, g.in_bands(), -1.0f, 1.0f);
    Tensor pa = forward(applied.graph, cube);
    Tensor pz = forward(zeroed, cube);
    REQUIRE(pa.same_shape(pz));
    float worst = 0.0f;
    for (int r = 0; r < pa.height(); ++r)
      for (int c = 0; c < pa.width(); ++c)
        for (int b = 0; b < pa.bands(); ++b)
          worst = std::max(worst, std::abs(pa.at(r, c, b) - pz.at(r, c, b)));
    CHECK(worst <= 1e-5f);
  }
}

TEST_CASE("empty scheme leaves the flop count untouched") {
  NetGraph g = build_unet(2, 4, 3, 2);
  CHECK(scheme_conv_flops(g, 16, 16, PruningScheme{}) ==
        analyze(g, 16, 16).flops);
}

TEST_CASE("scheme and sensitivity curve files round-trip exactly") {
  TempDir td("pruning");
  std::mt19937_64 rng(23);

  PruningScheme s;
  s.ratios["enc0_cnv1"] = 0.3f;
  s.ratios["base_cnv2"] = 0.9f;
  s.save(td.str("scheme"));
  PruningScheme s2 = PruningScheme::load(td.str("scheme"));
  CHECK(s2.ratios == s.ratios);

  SensitivityCurve c;
  for (int k = 0; k < 10; ++k) c.ratios.push_back(0.1f * k);
  c.baseline = 0.8123456789012345;
  std::uniform_real_distribution<double> u(-0.2, 0.9);
  for (const char* id : {"a", "b"}) {
    auto& v = c.values[id];
    for (size_t k = 0; k < c.ratios.size(); ++k) v.push_back(u(rng));
  }
  c.save(td.str("curve"));
  SensitivityCurve c2 = SensitivityCurve::load(td.str("curve"));
  CHECK(c2.ratios == c.ratios);
  CHECK(c2.baseline == c.baseline);
  CHECK(c2.values == c.values);

  // stray keys and size mismatches are parse failures, not silent repairs
  KvFile stray;
  stray.set_double("ratio.x", 0.1);
  stray.set_double("bogus", 1.0);
  stray.save(td.str("stray"));
  CHECK_THROWS_AS(PruningScheme::load(td.str("stray")), ParseError);

  KvFile noratios;
  noratios.set_double("baseline", 0.5);
  noratios.save(td.str("noratios"));
  CHECK_THROWS_AS(SensitivityCurve::load(td.str("noratios")), ParseError);

  KvFile shortcurve;
  shortcurve.set_doubles("ratios", {0.0, 0.1, 0.2});
  shortcurve.set_double("baseline", 0.5);
  shortcurve.set_doubles("curve.a", {0.5, 0.4});
  shortcurve.save(td.str("short"));
  CHECK_THROWS_AS(SensitivityCurve::load(td.str("short")), ParseError);
}

TEST_CASE("budget search meets the target within half a ratio step") {
  NetGraph g = build_unet(2, 8, 3, 2);
  const int h = 16, w = 16;
  const uint64_t total = analyze(g, h, w).flops;
  SensitivityCurve curves = synthetic_curves(g, 0.85);

  for (double pr : {0.3, 0.5, 0.7}) {
    SearchResult res = search_scheme(g, h, w, curves, pr);
    CHECK_NOTHROW(res.scheme.validate(g));

    CHECK(res.flops == scheme_conv_flops(g, h, w, res.scheme));
    CHECK(res.flops == analyze(apply_scheme(g, res.scheme).graph, h, w).flops);
    CHECK(res.achieved_ratio ==
          doctest::Approx(double(res.flops) / double(total)).epsilon(1e-12));

    // lands within half a grid step of the requested ratio
    CHECK(std::abs(res.achieved_ratio - (1.0 - pr)) <= 0.05 + 1e-9);

    // every chosen ratio is feasible under the settled budget
    for (const auto& [id, r] : res.scheme.ratios) {
      const int step = int(std::lround(r * 10.0f));
      const double drop = curves.baseline - curves.values.at(id)[step];
      CHECK(drop <= res.budget + 1e-9);
    }
  }

  SearchResult zero = search_scheme(g, h, w, curves, 0.0);
  CHECK(zero.scheme.ratios.empty());
  CHECK(zero.flops == total);
  CHECK(zero.achieved_ratio == 1.0);

  CHECK_THROWS_AS(search_scheme(g, h, w, curves, 1.0), ConfigError);
  CHECK_THROWS_AS(search_scheme(g, h, w, curves, -0.1), ConfigError);
}

TEST_CASE("layers dropping hard at the first step are excluded from search") {
  NetGraph g = build_unet(2, 8, 3, 2);
  const int h = 16, w = 16;
  const uint64_t total = analyze(g, h, w).flops;
  std::vector<std::string> p = prunable_layers(g);

  // every layer craters at ratio 0.1 except one; only that one is searchable
  const std::string allowed = p.front();
  SensitivityCurve curves = synthetic_curves(g, 0.85);
  for (const std::string& id : p) {
    if (id == allowed) continue;
    for (size_t k = 1; k < curves.ratios.size(); ++k)
      curves.values[id][k] = curves.baseline - 0.2;
  }

  // deepest reachable scheme prunes just the allowed layer at the cap
  PruningScheme floor_scheme;
  floor_scheme.ratios[allowed] = 0.9f;
  const uint64_t floor_flops = scheme_conv_flops(g, h, w, floor_scheme);
  const double floor_ratio = double(floor_flops) / double(total);
  REQUIRE(floor_ratio > 0.6);  // one layer cannot carry a deep target

  // a target just above the floor stays feasible and touches only that layer
  const double pr_easy = (1.0 - floor_ratio) * 0.5;
  SearchResult res = search_scheme(g, h, w, curves, pr_easy, 0.05);
  for (const auto& [id, r] : res.scheme.ratios) CHECK(id == allowed);
  CHECK(double(res.flops) <= (1.0 - pr_easy) * double(total) + 1e-6);

  // a deep target below the floor is infeasible and says so
  CHECK_THROWS_AS(search_scheme(g, h, w, curves, 0.5, 0.05), InfeasibleError);
}

TEST_CASE("sensitivity probes reproduce single-layer prunes bitwise") {
  const LoadedDataset& ds = mini_dataset();
  std::vector<size_t> idx = {0, 1};
  ChannelStats stats = fit_channel_stats(ds, idx);
  std::vector<Sample> eval_set = to_samples(ds, stats, idx, true);

  NetGraph g = build_unet(2, 4, ds.bands, ds.classes);
  SensitivityCurve sc = sensitivity_analysis(g, eval_set);

  REQUIRE(sc.ratios.size() == 10);
  for (int k = 0; k < 10; ++k) CHECK(sc.ratios[k] == doctest::Approx(0.1 * k));
  CHECK(sc.baseline == evaluate_wiou(g, eval_set));

  std::vector<std::string> p = prunable_layers(g);
  REQUIRE(sc.values.size() == p.size());
  for (const std::string& id : p) {
    REQUIRE(sc.values.count(id) == 1);
    CHECK(sc.values.at(id)[0] == sc.baseline);
  }

  // one probe recomputed independently must match bitwise
  const std::string& probe_id = p[p.size() / 2];
  PruningScheme one;
  one.ratios[probe_id] = 0.5f;
  ApplyResult pruned = apply_scheme(g, one);
  CHECK(sc.values.at(probe_id)[5] == evaluate_wiou(pruned.graph, eval_set));
}

TEST_CASE("a pruning iteration rebuilds the model and reports matching flops") {
  const LoadedDataset& ds = mini_dataset();
  std::vector<size_t> tr_idx = {0, 1, 2, 3, 4, 5};
  std::vector<size_t> va_idx = {6, 7};
  ChannelStats stats = fit_channel_stats(ds, tr_idx);
  std::vector<Sample> tr = to_samples(ds, stats, tr_idx, true);
  std::vector<Sample> va = to_samples(ds, stats, va_idx, true);

  NetGraph g = build_unet(2, 6, ds.bands, ds.classes);
  const NetGraph before = g;
  const uint64_t flops0 = analyze(g, 16, 16).flops;

  IterationConfig cfg;
  cfg.overall_pr = 0.4;
  cfg.exclusion_threshold = 1.0;  // gates wide open: this is a plumbing test
  cfg.layer_gate = 10.0;
  cfg.locked_gate = 10.0;
  cfg.model_gate = 10.0;
  cfg.max_retries = 0;
  cfg.sensitivity_samples = 1;
  cfg.finetune.epochs = 1;
  cfg.finetune.batch = 4;
  cfg.finetune.seed = 7;

  IterationReport rep = run_iteration(g, tr, va, cfg);

  CHECK(rep.retries == 0);
  CHECK(rep.overall_pr_used == 0.4);
  CHECK(rep.prunable == int(prunable_layers(before).size()));
  CHECK(rep.flops_before == flops0);
  CHECK_NOTHROW(rep.scheme.validate(before));
  CHECK(rep.flops_after == scheme_conv_flops(before, 16, 16, rep.scheme));
  CHECK(rep.flops_after == analyze(g, 16, 16).flops);  // g mutated in place
  CHECK(rep.params_after == analyze(g, 16, 16).params);
  CHECK(rep.achieved_ratio ==
        doctest::Approx(double(rep.flops_after) / double(flops0)));
  CHECK(rep.achieved_ratio <= 0.6 + 0.05 + 1e-9);
  CHECK(rep.locked <= rep.prunable);

  std::string txt = format_iteration_report(rep);
  CHECK(txt.find("flops") != std::string::npos);
  CHECK(txt.find("wIoU") != std::string::npos);

  CHECK_THROWS_AS(run_iteration(g, tr, std::span<const Sample>{}, cfg),
                  TrainingError);
}

TEST_CASE("prune-at-init carves the net before training, deterministically") {
  const LoadedDataset& ds = mini_dataset();
  std::vector<size_t> tr_idx = {0, 1, 2, 3};
  std::vector<size_t> va_idx = {4, 5};
  ChannelStats stats = fit_channel_stats(ds, tr_idx);
  std::vector<Sample> tr = to_samples(ds, stats, tr_idx, true);
  std::vector<Sample> va = to_samples(ds, stats, va_idx, true);

  IterationConfig cfg;
  cfg.exclusion_threshold = 1.0;
  cfg.sensitivity_samples = 1;
  cfg.finetune.epochs = 2;
  cfg.finetune.batch = 4;
  cfg.finetune.seed = 3;

  UnetSpec spec;
  spec.depth = 1;
  spec.init_filters = 6;
  spec.in_bands = ds.bands;
  spec.classes = ds.classes;
  spec.seed = 11;

  NetGraph g = build_unet(spec);
  const NetGraph fresh = g;
  InitPruneReport rep = prune_at_init(g, tr, va, 0.3, cfg);

  CHECK(rep.flops_after < rep.flops_before);
  CHECK(rep.achieved_ratio <= 0.7 + 0.05 + 1e-9);
  CHECK_NOTHROW(rep.scheme.validate(fresh));
  CHECK(rep.flops_after == analyze(g, 16, 16).flops);
  CHECK(int(rep.history.epochs.size()) == 2);

  // same seed, same data: the carved scheme is identical
  NetGraph g2 = build_unet(spec);
  InitPruneReport rep2 = prune_at_init(g2, tr, va, 0.3, cfg);
  CHECK(rep2.scheme.ratios == rep.scheme.ratios);
}
