#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <fstream>
#include <random>
#include <vector>

#include "doctest.h"
#include "hsicomp/error.hpp"
#include "hsicomp/netgraph.hpp"
#include "support.hpp"

using namespace hsicomp;

TEST_CASE("the reference network carries the expected conv parameter count") {
  NetGraph g = build_unet(5, 32, 25, 5);
  g.validate();
  uint64_t conv_params = 0;
  int convs = 0, bns = 0, pools = 0, tconvs = 0, concats = 0;
  for (const auto& n : g.nodes()) {
    if (is_conv_kind(n.kind)) conv_params += n.weight_count();
    convs += n.kind == LayerKind::Conv2D;
    tconvs += n.kind == LayerKind::TransposedConv2D;
    bns += n.kind == LayerKind::BatchNorm;
    pools += n.kind == LayerKind::MaxPool2D;
    concats += n.kind == LayerKind::Concat;
  }
  CHECK(conv_params == 31093952);
  CHECK(convs == 23);  // 22 3x3 blocks + 1x1 head
  CHECK(tconvs == 5);
  CHECK(pools == 5);
  CHECK(concats == 5);
  CHECK(bns == 22);
  CHECK(g.in_bands() == 25);
  CHECK(g.class_count() == 5);
}

TEST_CASE("forward agrees with a plain-loop reference on random networks") {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 6; ++trial) {
    NetGraph g = testsup::random_unet(rng, 2);
    const int side = 8 * (1 + int(rng() % 2));
    Tensor x = testsup::random_cube(rng, side, side, g.in_bands());

    Tensor got = forward(g, x);
    testsup::RefMap want = testsup::ref_forward(g, x);

    REQUIRE(got.height() == want.h);
    REQUIRE(got.width() == want.w);
    REQUIRE(got.bands() == want.c);
    double max_abs = 0.0;
    auto gv = got.f32();
    for (size_t i = 0; i < gv.size(); ++i)
      max_abs = std::max(max_abs, std::abs(double(gv[i]) - want.v[i]));
    CHECK(max_abs <= 1e-5);
  }
}

TEST_CASE("probabilities form a distribution per pixel") {
  std::mt19937_64 rng(103);
  NetGraph g = testsup::random_unet(rng, 2);
  Tensor x = testsup::random_cube(rng, 8, 8, g.in_bands());
  Tensor p = forward(g, x);
  for (int r = 0; r < p.height(); ++r)
    for (int c = 0; c < p.width(); ++c) {
      double sum = 0.0;
      for (int b = 0; b < p.bands(); ++b) {
        CHECK(p.at(r, c, b) >= 0.0f);
        sum += p.at(r, c, b);
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("predict takes the first best class on ties") {
  // feed a constant cube through an untouched softmax: all probabilities
  // equal, argmax must settle on class 0 everywhere
  NetGraph g;
  LayerNode in;
  in.id = "input";
  in.kind = LayerKind::Input;
  in.out_ch = 3;
  g.add(in);
  LayerNode sm;
  sm.id = "softmax";
  sm.kind = LayerKind::Softmax;
  sm.inputs = {"input"};
  sm.out_ch = 3;
  sm.in_ch = 3;
  g.add(sm);
  g.validate();

  Tensor x(4, 4, 3, Layout::BIP);
  for (float& v : x.f32()) v = 0.25f;
  LabelMap m = predict(g, x);
  for (uint8_t v : m.data) CHECK(v == 0);
}

TEST_CASE("model directories round trip bitwise") {
  testsup::TempDir td("model");
  std::mt19937_64 rng(107);
  NetGraph g = testsup::random_unet(rng, 3);
  save_model(g, td.str("m"));
  NetGraph r = load_model(td.str("m"));

  REQUIRE(r.nodes().size() == g.nodes().size());
  for (size_t i = 0; i < g.nodes().size(); ++i) {
    const auto& a = g.nodes()[i];
    const auto& b = r.nodes()[i];
    CHECK(a.id == b.id);
    CHECK(a.kind == b.kind);
    CHECK(a.inputs == b.inputs);
    CHECK(a.weight == b.weight);
    CHECK(a.bias == b.bias);
    CHECK(a.gamma == b.gamma);
    CHECK(a.beta == b.beta);
    CHECK(a.running_mean == b.running_mean);
    CHECK(a.running_var == b.running_var);
  }

  Tensor x = testsup::random_cube(rng, 16, 16, g.in_bands());
  auto pa = forward(g, x).f32(), pb = forward(r, x).f32();
  for (size_t i = 0; i < pa.size(); ++i) REQUIRE(pa[i] == pb[i]);
}

TEST_CASE("corrupt model directories raise typed errors") {
  testsup::TempDir td("badmodel");
  std::mt19937_64 rng(109);
  NetGraph g = testsup::random_unet(rng, 1);
  save_model(g, td.str("m"));

  SUBCASE("missing weights") {
    std::filesystem::remove(td.str("m") + "/weights.bin");
    CHECK_THROWS_AS(load_model(td.str("m")), Error);
  }
  SUBCASE("truncated weights") {
    std::filesystem::resize_file(td.str("m") + "/weights.bin", 10);
    CHECK_THROWS_AS(load_model(td.str("m")), Error);
  }
  SUBCASE("mangled manifest") {
    std::ofstream(td.str("m") + "/graph", std::ios::app)
        << "zz = not-a-layer\n";
    CHECK_THROWS_AS(load_model(td.str("m")), Error);
  }
  SUBCASE("absent directory") {
    CHECK_THROWS_AS(load_model(td.str("nowhere")), Error);
  }
}

TEST_CASE("glorot initialization is seed-deterministic and seed-sensitive") {
  UnetSpec spec;
  spec.depth = 2;
  spec.init_filters = 8;
  spec.in_bands = 9;
  spec.classes = 3;
  spec.seed = 42;
  NetGraph a = build_unet(spec), b = build_unet(spec);
  spec.seed = 43;
  NetGraph c = build_unet(spec);

  bool any_diff = false;
  for (size_t i = 0; i < a.nodes().size(); ++i) {
    CHECK(a.nodes()[i].weight == b.nodes()[i].weight);
    any_diff |= a.nodes()[i].weight != c.nodes()[i].weight;
  }
  CHECK(any_diff);
}

TEST_CASE("fused normalization accepts raw cubes") {
  std::mt19937_64 rng(113);
  NetGraph g = testsup::random_unet(rng, 2);
  const int bands = g.in_bands();

  ChannelStats st;
  st.th.resize(bands);
  st.min.resize(bands);
  st.max.resize(bands);
  for (int b = 0; b < bands; ++b) {
    st.min[b] = 0.0f;
    st.max[b] = 0.5f + 0.01f * float(b);
    st.th[b] = st.max[b];
  }

  NetGraph fused = fuse_symmetric_norm(g, NormalizationParams::from_stats(st));
  REQUIRE(fused.nodes().size() == g.nodes().size() + 1);
  CHECK(fused.has("norm"));
  CHECK(fused.node("norm").kind == LayerKind::DepthwiseNorm);

  Tensor raw = testsup::random_cube(rng, 8, 8, bands, 0.0f, 0.5f);
  Tensor wanted = forward(g, symmetric_normalize(raw, st));
  Tensor got = forward(fused, raw);
  auto a = wanted.f32(), b2 = got.f32();
  double max_abs = 0.0;
  for (size_t i = 0; i < a.size(); ++i)
    max_abs = std::max(max_abs, std::abs(double(a[i]) - double(b2[i])));
  CHECK(max_abs <= 1e-6);
}

TEST_CASE("structural validation names the offender") {
  NetGraph g;
  LayerNode in;
  in.id = "input";
  in.kind = LayerKind::Input;
  in.out_ch = 4;
  g.add(in);
  LayerNode conv;
  conv.id = "c";
  conv.kind = LayerKind::Conv2D;
  conv.inputs = {"ghost"};
  conv.out_ch = 2;
  conv.in_ch = 4;
  conv.kh = conv.kw = 3;
  conv.weight.resize(conv.weight_count());
  conv.bias.resize(2);
  CHECK_THROWS_AS(g.add(conv), StructureError);  // unresolved input

  LayerNode dup;
  dup.id = "input";
  dup.kind = LayerKind::ReLU;
  dup.inputs = {"input"};
  dup.out_ch = 4;
  dup.in_ch = 4;
  CHECK_THROWS_AS(g.add(dup), StructureError);  // duplicate id
}
