#include "hsicomp/complexity.hpp"

#include <cstdio>
#include <unordered_map>

#include "engine.hpp"
#include "hsicomp/error.hpp"

namespace hsicomp {

uint64_t layer_flops(const LayerRecord& r) {
  if (!is_conv_kind(r.kind)) return 0;
  if (r.o_h <= 0 || r.o_w <= 0 || r.o_f <= 0 || r.i_c <= 0)
    throw DimensionError("unresolved shape for layer '" + r.id + "'");
  uint64_t macs = static_cast<uint64_t>(r.o_h) * r.o_w * r.o_f * r.k_h *
                  r.k_w * r.i_c;
  if (r.kind == LayerKind::TransposedConv2D) macs /= 4;
  return macs * 2;
}

uint64_t layer_params(const LayerRecord& r) {
  if (!is_conv_kind(r.kind)) return 0;
  if (r.o_f <= 0 || r.i_c <= 0)
    throw DimensionError("unresolved shape for layer '" + r.id + "'");
  return static_cast<uint64_t>(r.o_f) * r.k_h * r.k_w * r.i_c;
}

namespace {

std::unordered_map<std::string, engine::Shape3> propagate(const NetGraph& g,
                                                          int input_h,
                                                          int input_w) {
  if (input_h <= 0 || input_w <= 0)
    throw DimensionError("input dims must be positive");
  std::unordered_map<std::string, engine::Shape3> shapes;
  for (const LayerNode& n : g.nodes()) {
    if (n.kind == LayerKind::Input) {
      shapes[n.id] = engine::Shape3{input_h, input_w, n.out_ch};
      continue;
    }
    std::vector<engine::Shape3> ins;
    ins.reserve(n.inputs.size());
    for (const std::string& in : n.inputs) ins.push_back(shapes.at(in));
    shapes[n.id] = engine::node_out_shape(n, ins);
  }
  return shapes;
}

}  // namespace

ComplexityReport analyze(const NetGraph& g, int input_h, int input_w) {
  g.validate();
  auto shapes = propagate(g, input_h, input_w);
  ComplexityReport rep;
  rep.layers.reserve(g.nodes().size());
  for (const LayerNode& n : g.nodes()) {
    const engine::Shape3& s = shapes.at(n.id);
    LayerRecord r;
    r.id = n.id;
    r.kind = n.kind;
    r.o_h = s.h;
    r.o_w = s.w;
    r.o_f = s.c;
    if (is_conv_kind(n.kind)) {
      r.k_h = n.kh;
      r.k_w = n.kw;
      r.i_c = n.in_ch;
      r.flops = layer_flops(r);
      r.params = layer_params(r);
    }
    rep.flops += r.flops;
    rep.params += r.params;
    rep.layers.push_back(std::move(r));
  }
  rep.size_bytes = rep.params * 4;
  return rep;
}

ExactOps exact_op_count(const NetGraph& g, int input_h, int input_w) {
  g.validate();
  auto shapes = propagate(g, input_h, input_w);
  ExactOps ops;
  for (const LayerNode& n : g.nodes()) {
    const engine::Shape3& s = shapes.at(n.id);
    const uint64_t elems = static_cast<uint64_t>(s.h) * s.w * s.c;
    const uint64_t pixels = static_cast<uint64_t>(s.h) * s.w;
    switch (n.kind) {
      case LayerKind::Conv2D:
        ops.conv_flops += elems * n.kh * n.kw * n.in_ch * 2;
        ops.other_ops += elems;  // bias add per output element
        break;
      case LayerKind::TransposedConv2D:
        ops.conv_flops += elems * n.kh * n.kw * n.in_ch * 2 / 4;
        ops.other_ops += elems;
        break;
      case LayerKind::BatchNorm:
      case LayerKind::DepthwiseNorm:
        ops.other_ops += elems * 2;  // per-channel scale and shift
        break;
      case LayerKind::ReLU:
        ops.other_ops += elems;  // one compare
        break;
      case LayerKind::MaxPool2D:
        ops.other_ops += elems * 3;  // three compares per 2x2 window
        break;
      case LayerKind::Softmax:
        // max scan, subtract, exp, sum scan, divide per pixel row
        ops.other_ops += pixels * (5 * static_cast<uint64_t>(s.c) - 2);
        break;
      case LayerKind::Input:
      case LayerKind::Dropout:
      case LayerKind::Concat:
        break;  // copies only
    }
  }
  return ops;
}

std::string format_report(const ComplexityReport& rep) {
  std::string out;
  char line[192];
  std::snprintf(line, sizeof line, "%-12s %-16s %5s %5s %5s %3s %3s %5s %16s %12s\n",
                "layer", "kind", "o_h", "o_w", "o_f", "k_h", "k_w", "i_c",
                "flops", "params");
  out += line;
  for (const LayerRecord& r : rep.layers) {
    if (!is_conv_kind(r.kind)) continue;
    std::snprintf(line, sizeof line,
                  "%-12s %-16s %5d %5d %5d %3d %3d %5d %16llu %12llu\n",
                  r.id.c_str(), kind_name(r.kind), r.o_h, r.o_w, r.o_f, r.k_h,
                  r.k_w, r.i_c, static_cast<unsigned long long>(r.flops),
                  static_cast<unsigned long long>(r.params));
    out += line;
  }
  std::snprintf(line, sizeof line,
                "total: %.4f GFLOPS, %.4f M params, %.2f MiB (f32) / %.2f MiB "
                "(int8)\n",
                static_cast<double>(rep.flops) * 1e-9,
                static_cast<double>(rep.params) * 1e-6, rep.size_mib(4),
                rep.size_mib(1));
  out += line;
  return out;
}

std::string report_records(const ComplexityReport& rep) {
  std::string out;
  char line[192];
  for (const LayerRecord& r : rep.layers) {
    std::snprintf(line, sizeof line, "%s %s %d %d %d %d %d %d %llu %llu\n",
                  r.id.c_str(), kind_name(r.kind), r.o_h, r.o_w, r.o_f, r.k_h,
                  r.k_w, r.i_c, static_cast<unsigned long long>(r.flops),
                  static_cast<unsigned long long>(r.params));
    out += line;
  }
  return out;
}

}  // namespace hsicomp
