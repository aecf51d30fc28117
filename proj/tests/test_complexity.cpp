#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <chrono>
#include <random>
#include <sstream>

#include "doctest.h"
#include "hsicomp/complexity.hpp"
#include "hsicomp/error.hpp"
#include "hsicomp/netgraph.hpp"
#include "support.hpp"

using namespace hsicomp;

TEST_CASE("single conv layer prices out by hand") {
  NetGraph g;
  LayerNode in;
  in.id = "input";
  in.kind = LayerKind::Input;
  in.out_ch = 25;
  g.add(in);
  LayerNode c;
  c.id = "cnv";
  c.kind = LayerKind::Conv2D;
  c.inputs = {"input"};
  c.in_ch = 25;
  c.out_ch = 32;
  c.kh = c.kw = 3;
  c.weight.resize(c.weight_count());
  c.bias.resize(32);
  g.add(c);
  LayerNode sm;
  sm.id = "softmax";
  sm.kind = LayerKind::Softmax;
  sm.inputs = {"cnv"};
  sm.in_ch = sm.out_ch = 32;
  g.add(sm);

  ComplexityReport rep = analyze(g, 192, 384);
  // 192 * 384 * 32 * 3 * 3 * 25 * 2
  CHECK(rep.flops == 1061683200ULL);
  CHECK(rep.params == 32ULL * 3 * 3 * 25);
  CHECK(rep.size_bytes == rep.params * 4);
}

TEST_CASE("transposed convolutions count a quarter of the nominal product") {
  NetGraph g;
  LayerNode in;
  in.id = "input";
  in.kind = LayerKind::Input;
  in.out_ch = 8;
  g.add(in);
  LayerNode t;
  t.id = "up";
  t.kind = LayerKind::TransposedConv2D;
  t.inputs = {"input"};
  t.in_ch = 8;
  t.out_ch = 4;
  t.kh = t.kw = 2;
  t.weight.resize(t.weight_count());
  t.bias.resize(4);
  g.add(t);
  LayerNode sm;
  sm.id = "softmax";
  sm.kind = LayerKind::Softmax;
  sm.inputs = {"up"};
  sm.in_ch = sm.out_ch = 4;
  g.add(sm);

  ComplexityReport rep = analyze(g, 10, 12);
  // output grid 20x24; (20*24*4*2*2*8*2) / 4
  CHECK(rep.flops == (20ULL * 24 * 4 * 2 * 2 * 8 * 2) / 4);
  const auto& up = rep.layers[1];
  CHECK(up.o_h == 20);
  CHECK(up.o_w == 24);
}

TEST_CASE("reference network totals stay pinned") {
  NetGraph g = build_unet(5, 32, 25, 5);
  auto t0 = std::chrono::steady_clock::now();
  ComplexityReport rep = analyze(g, 192, 384);
  auto ms = std::chrono::duration<double, std::milli>(
                std::chrono::steady_clock::now() - t0)
                .count();
  CHECK(rep.params == 31093952ULL);
  CHECK(rep.flops == 34530656256ULL);
  CHECK(ms < 1000.0);
}

TEST_CASE("totals equal the loop-nest MAC oracle on random graphs") {
  std::mt19937_64 rng(211);
  for (int trial = 0; trial < 12; ++trial) {
    NetGraph g = testsup::random_unet(rng, 3);
    const int h = 8 << (rng() % 2), w = 8 << (rng() % 2);
    CHECK(analyze(g, h, w).flops == testsup::loopnest_conv_flops(g, h, w));
  }
}

TEST_CASE("shape propagation rejects impossible inputs") {
  NetGraph g = build_unet(3, 8, 5, 3);
  CHECK_THROWS_AS(analyze(g, 10, 16), DimensionError);  // 10 not / 4
  CHECK_THROWS_AS(analyze(g, 0, 16), DimensionError);
  analyze(g, 16, 16);  // sanity: the aligned case resolves
}

TEST_CASE("exact operation counting splits conv MACs from the rest") {
  NetGraph g = build_unet(2, 4, 3, 2);
  const int h = 8, w = 8;
  ComplexityReport rep = analyze(g, h, w);
  ExactOps ex = exact_op_count(g, h, w);
  CHECK(ex.conv_flops == rep.flops);
  CHECK(ex.other_ops > 0);

  // every non-conv op scales with the pixel count; doubling the area must
  // exactly double the non-conv share
  ExactOps ex2 = exact_op_count(g, h, 2 * w);
  CHECK(ex2.other_ops == 2 * ex.other_ops);
}

TEST_CASE("record emission is one parseable line per layer") {
  NetGraph g = build_unet(2, 4, 3, 2);
  ComplexityReport rep = analyze(g, 8, 8);
  std::istringstream lines(report_records(rep));
  std::string line;
  size_t n = 0;
  while (std::getline(lines, line)) {
    std::istringstream f(line);
    std::string id, kind;
    long long oh, ow, of, kh, kw, ic, flops, params;
    REQUIRE((f >> id >> kind >> oh >> ow >> of >> kh >> kw >> ic >> flops >>
             params));
    CHECK(id == rep.layers[n].id);
    CHECK(uint64_t(flops) == rep.layers[n].flops);
    ++n;
  }
  CHECK(n == rep.layers.size());

  std::string table = format_report(rep);
  CHECK(table.find("total") != std::string::npos);
}
