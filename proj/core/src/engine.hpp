#pragma once

// Internal execution kernels shared by inference, training and the
// quantized simulation. Not installed.

#include <cstdint>
#include <random>
#include <unordered_map>
#include <vector>

#include "hsicomp/netgraph.hpp"

namespace hsicomp::engine {

// Per-node state saved during a training-mode forward for the backward pass.
struct NodeCache {
  FeatureMap out;
  std::vector<uint8_t> pool_argmax;  // 0..3 quadrant index per output elem
  std::vector<uint8_t> drop_mask;    // 1 = kept
  std::vector<float> bn_xhat;
  std::vector<float> bn_istd;        // per channel
};

struct ExecState {
  bool training = false;
  float bn_momentum = 0.1f;
  std::mt19937_64 rng;  // dropout masks
};

// Forward kernels. Output maps are allocated by the caller via out_shape.
void conv2d_forward(const LayerNode& n, const FeatureMap& in, FeatureMap& out);
void tconv_forward(const LayerNode& n, const FeatureMap& in, FeatureMap& out);
void depthwise_forward(const LayerNode& n, const FeatureMap& in,
                       FeatureMap& out);
void bn_forward_inference(const LayerNode& n, const FeatureMap& in,
                          FeatureMap& out);
void bn_forward_training(LayerNode& n, const FeatureMap& in, FeatureMap& out,
                         float momentum, NodeCache& cache);
void relu_forward(const FeatureMap& in, FeatureMap& out);
void maxpool_forward(const FeatureMap& in, FeatureMap& out,
                     std::vector<uint8_t>* argmax);
void dropout_forward_training(const LayerNode& n, const FeatureMap& in,
                              FeatureMap& out, std::mt19937_64& rng,
                              std::vector<uint8_t>& mask);
void concat_forward(const FeatureMap& a, const FeatureMap& b, FeatureMap& out);
void softmax_forward(const FeatureMap& in, FeatureMap& out);

// Parameter gradients for one node, accumulated across calls.
struct ParamGrads {
  std::vector<float> weight, bias, gamma, beta;
};

// Backward kernels: given the upstream gradient dout (w.r.t. the node's
// output), accumulate into din (w.r.t. its input) and into grads.
void conv2d_backward(const LayerNode& n, const FeatureMap& in,
                     const FeatureMap& dout, FeatureMap& din, ParamGrads& g);
void tconv_backward(const LayerNode& n, const FeatureMap& in,
                    const FeatureMap& dout, FeatureMap& din, ParamGrads& g);
void depthwise_backward(const LayerNode& n, const FeatureMap& dout,
                        FeatureMap& din);
void bn_backward(const LayerNode& n, const NodeCache& cache,
                 const FeatureMap& dout, FeatureMap& din, ParamGrads& g);
void relu_backward(const FeatureMap& out, const FeatureMap& dout,
                   FeatureMap& din);
void maxpool_backward(const std::vector<uint8_t>& argmax,
                      const FeatureMap& dout, FeatureMap& din);
void dropout_backward(const LayerNode& n, const std::vector<uint8_t>& mask,
                      const FeatureMap& dout, FeatureMap& din);
void concat_backward(const FeatureMap& dout, FeatureMap& da, FeatureMap& db);

// Shape of a node's output given its (already shaped) inputs.
struct Shape3 {
  int h = 0, w = 0, c = 0;
};
Shape3 node_out_shape(const LayerNode& n, const std::vector<Shape3>& ins);

// Training-mode forward over the whole graph, filling a cache per node.
// Mutates BN running statistics.
void forward_training(NetGraph& g, const FeatureMap& x, ExecState& st,
                      std::unordered_map<std::string, NodeCache>& caches);

}  // namespace hsicomp::engine
