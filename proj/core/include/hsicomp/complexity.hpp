#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hsicomp/netgraph.hpp"

namespace hsicomp {

// Shape-resolved cost record for one node. Convolution kinds carry the
// multiply-accumulate counting model (1 MAC = 2 FLOPS, transposed convs
// touch each output once so their nominal product is divided by 4);
// everything else counts as zero here.
struct LayerRecord {
  std::string id;
  LayerKind kind = LayerKind::Input;
  int o_h = 0, o_w = 0, o_f = 0;
  int k_h = 0, k_w = 0, i_c = 0;
  uint64_t flops = 0;
  uint64_t params = 0;
};

uint64_t layer_flops(const LayerRecord& r);
uint64_t layer_params(const LayerRecord& r);

struct ComplexityReport {
  std::vector<LayerRecord> layers;  // graph order
  uint64_t flops = 0;               // conv MAC model only
  uint64_t params = 0;              // conv weights only, bias excluded
  uint64_t size_bytes = 0;          // params x 4 (f32)

  double size_mib(int bytes_per_param = 4) const {
    return static_cast<double>(params) * bytes_per_param / (1024.0 * 1024.0);
  }
};

// Propagates shapes from the input node through the graph and prices every
// layer. Throws DimensionError naming the first node whose shape cannot be
// resolved (odd spatial dims ahead of a pool, channel mismatches).
ComplexityReport analyze(const NetGraph& g, int input_h, int input_w);

// Every arithmetic operation in the inference loops, split into the conv
// MAC share and the rest (bias adds, normalization affine ops, ReLU and
// pool comparisons, softmax). The conv share equals the report total.
struct ExactOps {
  uint64_t conv_flops = 0;
  uint64_t other_ops = 0;
};
ExactOps exact_op_count(const NetGraph& g, int input_h, int input_w);

// Aligned human-readable table with totals.
std::string format_report(const ComplexityReport& rep);
// One record per line for external plotting:
// id kind o_h o_w o_f k_h k_w i_c flops params
std::string report_records(const ComplexityReport& rep);

}  // namespace hsicomp
