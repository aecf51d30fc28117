#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "hsicomp/data.hpp"
#include "hsicomp/eval.hpp"
#include "hsicomp/metrics.hpp"
#include "hsicomp/netgraph.hpp"
#include "hsicomp/training.hpp"
#include "support.hpp"

using namespace hsicomp;

namespace {

std::vector<Sample> mini_samples(size_t count) {
  const auto& ds = testsup::mini_dataset();
  std::vector<size_t> idx;
  for (size_t i = 0; i < count; ++i) idx.push_back(i);
  ChannelStats st = fit_channel_stats(ds, idx);
  return to_samples(ds, st, idx);
}

double loss_of(NetGraph& g, const Sample& s, uint64_t seed) {
  FeatureMap x = tensor_to_features(s.cube);
  Gradients grads;
  std::vector<const LabelMap*> labels{&s.labels};
  return backward(g, x, labels, grads, seed);
}

}  // namespace

TEST_CASE("analytic gradients match central finite differences") {
  std::mt19937_64 rng(301);
  UnetSpec spec;
  spec.depth = 1;
  spec.init_filters = 4;
  spec.in_bands = 3;
  spec.classes = 2;
  spec.seed = 5;
  NetGraph g = build_unet(spec);

  Sample s;
  s.cube = testsup::random_cube(rng, 8, 8, 3);
  s.labels = LabelMap(8, 8);
  for (auto& v : s.labels.data) v = uint8_t(rng() % 2);

  FeatureMap x = tensor_to_features(s.cube);
  Gradients grads;
  std::vector<const LabelMap*> labels{&s.labels};
  const uint64_t seed = 99;
  backward(g, x, labels, grads, seed);

  auto check_coord = [&](std::vector<float>& param, float grad) {
    // probe against (L(+h) - L(-h)) / 2h with the same dropout mask
    const float h = 1e-3f;
    for (float& p : param) {
      const float saved = p;
      p = saved + h;
      const double lp = loss_of(g, s, seed);
      p = saved - h;
      const double lm = loss_of(g, s, seed);
      p = saved;
      const double fd = (lp - lm) / (2.0 * h);
      CHECK(std::abs(fd - double(grad)) <= 2e-3 + 0.05 * std::abs(fd));
      break;  // first coordinate only; the slice below picks the rest
    }
  };

  for (auto& n : g.nodes()) {
    if (grads.weight.count(n.id)) {
      auto& gw = grads.weight.at(n.id);
      // probe three spread-out coordinates per tensor
      for (size_t k : {size_t(0), gw.size() / 2, gw.size() - 1}) {
        const float h = 1e-3f;
        const float saved = n.weight[k];
        n.weight[k] = saved + h;
        const double lp = loss_of(g, s, seed);
        n.weight[k] = saved - h;
        const double lm = loss_of(g, s, seed);
        n.weight[k] = saved;
        const double fd = (lp - lm) / (2.0 * h);
        CHECK(std::abs(fd - double(gw[k])) <= 2e-3 + 0.05 * std::abs(fd));
      }
      check_coord(n.bias, grads.bias.at(n.id)[0]);
    }
    if (grads.gamma.count(n.id)) {
      check_coord(n.gamma, grads.gamma.at(n.id)[0]);
      check_coord(n.beta, grads.beta.at(n.id)[0]);
    }
  }
}

TEST_CASE("loss averages cross entropy over non-ignored pixels only") {
  std::mt19937_64 rng(307);
  UnetSpec spec;
  spec.depth = 1;
  spec.init_filters = 4;
  spec.in_bands = 3;
  spec.classes = 3;
  spec.seed = 5;
  spec.dropout = 0.0f;  // keep the training forward deterministic
  NetGraph g = build_unet(spec);

  Sample s;
  s.cube = testsup::random_cube(rng, 8, 8, 3);
  s.labels = LabelMap(8, 8);
  for (auto& v : s.labels.data) v = ignore_label(3);
  s.labels.at(3, 5) = 1;  // a single counted pixel

  const double loss_a = loss_of(g, s, 1);

  // the surviving pixel matters
  s.labels.at(3, 5) = 2;
  CHECK(loss_of(g, s, 1) != loss_a);
  s.labels.at(3, 5) = 1;

  // averaging over the valid count: a map with two valid pixels must score
  // the mean of the two single-pixel maps (dropout off, same forward)
  Sample t = s;
  t.labels.at(3, 5) = ignore_label(3);
  t.labels.at(6, 2) = 2;
  const double loss_b = loss_of(g, t, 1);

  Sample both = s;
  both.labels.at(6, 2) = 2;
  CHECK(loss_of(g, both, 1) ==
        doctest::Approx(0.5 * (loss_a + loss_b)).epsilon(1e-9));
}

TEST_CASE("training reduces the loss and keeps the best validation weights") {
  auto samples = mini_samples(12);
  std::vector<Sample> train_set(samples.begin(), samples.begin() + 9);
  std::vector<Sample> val_set(samples.begin() + 9, samples.end());

  UnetSpec spec;
  spec.depth = 2;
  spec.init_filters = 6;
  spec.in_bands = 25;
  spec.classes = 5;
  spec.seed = 3;
  NetGraph g = build_unet(spec);

  TrainConfig tc;
  tc.epochs = 8;
  tc.batch = 4;
  tc.lr = 2e-3f;
  tc.patience = 8;
  tc.seed = 11;
  TrainHistory h = train(g, train_set, val_set, tc);

  REQUIRE(h.epochs.size() >= 2);
  CHECK(h.epochs.back().train_loss < h.epochs.front().train_loss);

  double best = 0.0;
  for (const auto& e : h.epochs) best = std::max(best, e.val_wiou);
  CHECK(h.best_wiou == doctest::Approx(best).epsilon(1e-12));
  CHECK(h.best_epoch >= 0);
  CHECK(h.epochs[size_t(h.best_epoch)].val_wiou ==
        doctest::Approx(h.best_wiou).epsilon(1e-12));

  // the graph must hold the snapshot of the best epoch, not the last one
  CHECK(evaluate_wiou(g, val_set) == doctest::Approx(h.best_wiou).epsilon(1e-9));
}

TEST_CASE("training is bitwise deterministic in the seed") {
  auto samples = mini_samples(8);
  std::vector<Sample> train_set(samples.begin(), samples.begin() + 6);
  std::vector<Sample> val_set(samples.begin() + 6, samples.end());

  UnetSpec spec;
  spec.depth = 1;
  spec.init_filters = 4;
  spec.in_bands = 25;
  spec.classes = 5;
  spec.seed = 3;

  TrainConfig tc;
  tc.epochs = 3;
  tc.batch = 3;
  tc.seed = 17;

  NetGraph a = build_unet(spec), b = build_unet(spec);
  train(a, train_set, val_set, tc);
  train(b, train_set, val_set, tc);
  for (size_t i = 0; i < a.nodes().size(); ++i) {
    REQUIRE(a.nodes()[i].weight == b.nodes()[i].weight);
    REQUIRE(a.nodes()[i].bias == b.nodes()[i].bias);
  }
}

TEST_CASE("early stopping fires when no improvement clears min_delta") {
  auto samples = mini_samples(8);
  std::vector<Sample> train_set(samples.begin(), samples.begin() + 6);
  std::vector<Sample> val_set(samples.begin() + 6, samples.end());

  UnetSpec spec;
  spec.depth = 1;
  spec.init_filters = 4;
  spec.in_bands = 25;
  spec.classes = 5;
  NetGraph g = build_unet(spec);

  TrainConfig tc;
  tc.epochs = 50;
  tc.batch = 3;
  tc.patience = 1;
  tc.min_delta = 10.0;  // unreachable improvement
  TrainHistory h = train(g, train_set, val_set, tc);
  CHECK(h.early_stopped);
  CHECK(h.epochs.size() < 50);
}

TEST_CASE("zero epochs is a no-op") {
  auto samples = mini_samples(4);
  std::vector<Sample> train_set(samples.begin(), samples.begin() + 3);
  std::vector<Sample> val_set(samples.begin() + 3, samples.end());
  NetGraph g = build_unet(1, 4, 25, 5);
  NetGraph before = g;
  TrainConfig tc;
  tc.epochs = 0;
  TrainHistory h = train(g, train_set, val_set, tc);
  CHECK(h.epochs.empty());
  for (size_t i = 0; i < g.nodes().size(); ++i)
    CHECK(g.nodes()[i].weight == before.nodes()[i].weight);
}
