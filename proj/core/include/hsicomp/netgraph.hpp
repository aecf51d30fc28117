#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hsicomp/metrics.hpp"
#include "hsicomp/preprocess.hpp"
#include "hsicomp/tensor.hpp"

namespace hsicomp {

enum class LayerKind : uint8_t {
  Input,
  Conv2D,
  TransposedConv2D,
  DepthwiseNorm,
  BatchNorm,
  ReLU,
  MaxPool2D,
  Dropout,
  Concat,
  Softmax,
};

const char* kind_name(LayerKind k);
LayerKind kind_from_name(std::string_view name);
bool is_conv_kind(LayerKind k);  // Conv2D or TransposedConv2D

// One graph node. Convolution weights are stored [out_ch][kh][kw][in_ch],
// flattened row-major; TransposedConv2D is fixed at stride 2 with its 2x2
// kernel upsampling by exactly 2x. DepthwiseNorm applies y = w[c]*x + b[c]
// per channel (weight/bias fields, sized out_ch).
struct LayerNode {
  std::string id;
  LayerKind kind = LayerKind::Input;
  std::vector<std::string> inputs;

  int out_ch = 0, in_ch = 0, kh = 0, kw = 0;
  std::vector<float> weight, bias;

  std::vector<float> gamma, beta, running_mean, running_var;
  float eps = 1e-5f;

  float dropout_rate = 0.0f;

  size_t weight_count() const {
    return static_cast<size_t>(out_ch) * kh * kw * in_ch;
  }
  // Flat index into `weight`.
  size_t widx(int oc, int dy, int dx, int ic) const {
    return ((static_cast<size_t>(oc) * kh + dy) * kw + dx) * in_ch + ic;
  }
};

// DAG of layers in topological (insertion) order: single Input node, single
// Softmax output. Immutable during forward; training mutates parameters
// between steps only.
class NetGraph {
 public:
  LayerNode& add(LayerNode n);

  bool has(std::string_view id) const;
  const LayerNode& node(std::string_view id) const;
  LayerNode& node(std::string_view id);
  const std::vector<LayerNode>& nodes() const { return nodes_; }
  std::vector<LayerNode>& nodes() { return nodes_; }

  const std::string& input_id() const;
  const std::string& output_id() const;  // the Softmax node
  std::vector<std::string> consumers(std::string_view id) const;

  int in_bands() const;     // Input node channel count
  int class_count() const;  // channels feeding the Softmax

  // Structural checks: ids resolve, arities match kinds, parameter vectors
  // sized consistently, exactly one Input and one Softmax.
  void validate() const;

 private:
  std::vector<LayerNode> nodes_;
  std::unordered_map<std::string, size_t> index_;
};

struct UnetSpec {
  int depth = 5;
  int init_filters = 32;
  int in_bands = 25;
  int classes = 5;
  float dropout = 0.2f;
  uint64_t seed = 1;
};

// Classic encoder-decoder: per encoder level two Conv3x3+BN+ReLU blocks
// closed by Dropout, MaxPool 2x2 between levels, a two-block base, decoder
// levels of TransposedConv 2x2 + skip Concat + two conv blocks, and a final
// Conv1x1 + Softmax head. Filters double per level from init_filters.
// Weights are Glorot-uniform, derived deterministically from spec.seed.
NetGraph build_unet(const UnetSpec& spec);
NetGraph build_unet(int depth, int init_filters, int in_bands, int classes);

// Batched channels-last activations ([n][h][w][c]); the engine's working
// format, matching BIP cubes.
struct FeatureMap {
  int n = 0, h = 0, w = 0, c = 0;
  std::vector<float> v;

  FeatureMap() = default;
  FeatureMap(int n_, int h_, int w_, int c_)
      : n(n_), h(h_), w(w_), c(c_),
        v(static_cast<size_t>(n_) * h_ * w_ * c_, 0.0f) {}
  size_t idx(int im, int r, int col, int ch) const {
    return ((static_cast<size_t>(im) * h + r) * w + col) * c + ch;
  }
  size_t size() const { return v.size(); }
};

FeatureMap tensor_to_features(const Tensor& bip_cube);
Tensor features_to_tensor(const FeatureMap& f);  // n must be 1; BIP output

// Inference-mode forward: Dropout is identity, BatchNorm uses running
// statistics. Output holds per-pixel class probabilities.
Tensor forward(const NetGraph& g, const Tensor& bip_cube);
FeatureMap forward_features(const NetGraph& g, const FeatureMap& x);

// Per-pixel argmax of the class-probability output.
LabelMap predict(const NetGraph& g, const Tensor& bip_cube);

// The symmetric-normalization constants of the preprocess stage, expressed
// as the depthwise layer that absorbs them.
struct NormalizationParams {
  std::vector<float> min, max;

  static NormalizationParams from_stats(const ChannelStats& s) {
    return NormalizationParams{s.min, s.max};
  }
  // w = 2/(max-min), b = 2*min/(min-max) - 1, so w*x + b == x_hat.
  std::vector<float> weights() const;
  std::vector<float> biases() const;
};

// Inserts a DepthwiseNorm node between the input and its consumers so the
// network accepts unnormalized cubes: forward(fused, x) equals
// forward(original, symmetric_normalize(x)) up to float rounding.
NetGraph fuse_symmetric_norm(const NetGraph& g, const NormalizationParams& p);

// Model directory: `graph` manifest (text) + `weights.bin` (per tensor: u64
// LE element count, then f32 LE data; manifest node order). Round-trip is
// bitwise exact.
void save_model(const NetGraph& g, const std::string& dir);
NetGraph load_model(const std::string& dir);

}  // namespace hsicomp
