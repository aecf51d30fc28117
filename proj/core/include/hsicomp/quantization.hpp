#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hsicomp/metrics.hpp"
#include "hsicomp/netgraph.hpp"
#include "hsicomp/tensor.hpp"

namespace hsicomp {

enum class QuantMode : uint8_t { Symmetric = 0, Affine = 1 };

const char* quant_mode_name(QuantMode m);
QuantMode quant_mode_from_name(std::string_view name);

// One 8-bit tensor: real = 2^exponent * (q - zero_point). The scale lives as
// an exponent so it is a power of two by construction, never a float product.
// Symmetric tensors pin zero_point to 0 and clamp to [-127, 127]; affine
// tensors use the full [-128, 127] range.
struct QuantParams {
  int exponent = -7;
  int zero_point = 0;
  QuantMode mode = QuantMode::Symmetric;

  float scale() const { return std::ldexp(1.0f, exponent); }
  int qmin() const { return mode == QuantMode::Symmetric ? -127 : -128; }
  int qmax() const { return 127; }
  int quantize(float x) const;
  float dequantize(int q) const {
    return std::ldexp(static_cast<float>(q - zero_point), exponent);
  }
  float qdq(float x) const { return dequantize(quantize(x)); }
};

// Keys are "<node>.out" for activations (including the network input) and
// "<conv>.weight" / "<conv>.bias" for parameters.
using QuantParamMap = std::map<std::string, QuantParams>;

void save_quant_params(const QuantParamMap& params, const std::string& path);
QuantParamMap load_quant_params(const std::string& path);

// Folds every BatchNorm into the convolution that produces its input and
// drops the BatchNorm node: w' = w*g/sqrt(var+eps), b' = (b-mean)*g/
// sqrt(var+eps) + beta. Float forward is unchanged up to rounding. Throws
// StructureError when a BatchNorm does not directly follow a convolution or
// when that convolution's output has other consumers.
NetGraph fold_bn(const NetGraph& g);

// Balances per-channel weight magnitudes across directly chained
// conv -> ReLU -> conv pairs (single-consumer links only): channel i of the
// first conv is scaled by 1/s_i and the matching input channel of the second
// by s_i, with s_i = sqrt(r1_i/r2_i) of the two max-abs ranges. ReLU is
// positively homogeneous, so the float forward is unchanged. Channels where
// either range is zero are left alone. Expects BatchNorm already folded.
NetGraph cross_layer_equalize(const NetGraph& g, int passes = 1);

enum class RangeFit : uint8_t { MinMax = 0, MinMse = 1 };

struct TensorPolicy {
  QuantMode mode = QuantMode::Symmetric;
  RangeFit fit = RangeFit::MinMax;
};

// Per-role quantization recipe. Defaults follow the deployment flow:
// symmetric min-max for the network input and biases, symmetric min-MSE for
// weights, affine min-MSE for activations.
struct CalibrationPolicy {
  TensorPolicy input{QuantMode::Symmetric, RangeFit::MinMax};
  TensorPolicy weights{QuantMode::Symmetric, RangeFit::MinMse};
  TensorPolicy bias{QuantMode::Symmetric, RangeFit::MinMax};
  TensorPolicy activations{QuantMode::Affine, RangeFit::MinMse};
  int mse_exponents_below = 4;  // min-MSE search window under the min-max fit
};

// Smallest power-of-two scale whose 8-bit grid covers [lo, hi]; all-zero
// ranges fall back to exponent -7, zero_point 0. Affine fits place the zero
// point at -128 - round(lo/scale), clamped to the int8 range.
QuantParams fit_min_max(float lo, float hi, QuantMode mode);

// Scans exponents from the min-max fit down through `window` finer steps and
// keeps the one with the smallest quantize-dequantize MSE (ties prefer the
// coarser scale, so the result is never worse than min-max).
QuantParams fit_min_mse(std::span<const float> values, QuantMode mode,
                        int window = 4);

// Derives quantization parameters for every conv input, weight, bias and
// output by streaming the calibration cubes through the float graph. Min/max
// statistics merge order-free; MSE sums accumulate in f64 in cube order, so
// the result is independent of the thread count.
QuantParamMap calibrate(const NetGraph& g, std::span<const Tensor> calib,
                        const CalibrationPolicy& policy = {});

// Simulated INT8 inference: tensors pass through quantize->dequantize at
// every conv boundary and conv inner products accumulate in f64, which
// represents the i32 accumulator exactly. Non-conv ops run in float on the
// dequantized values. Throws CalibrationError when a needed tensor has no
// parameters.
FeatureMap quantized_forward(const NetGraph& g, const FeatureMap& x,
                             const QuantParamMap& params);
Tensor quantized_forward(const NetGraph& g, const Tensor& bip_cube,
                         const QuantParamMap& params);

struct DriftReport {
  double mean_changed = 0.0;      // fraction of pixels whose argmax moved
  std::vector<double> per_image;  // same, one entry per cube
  std::vector<LabelMap> maps;     // 1 where the winning class changed
};

// Compares INT8 inference through a model that expects externally normalized
// input against its fused variant fed raw cubes (g_fused must be
// fuse_symmetric_norm(g_explicit) with its own calibration). Reports how
// often the predicted class changes, per image and on average.
DriftReport requantization_drift(const NetGraph& g_explicit,
                                 const NetGraph& g_fused,
                                 const QuantParamMap& params_explicit,
                                 const QuantParamMap& params_fused,
                                 std::span<const Tensor> cubes);

// Pure-integer reference: int8 operands, i32 accumulation, power-of-two
// requantization. Conv2D only; used to pin down the simulated path in tests.
FeatureMap int8_reference_conv(const LayerNode& conv, const FeatureMap& x,
                               const QuantParams& in_q, const QuantParams& w_q,
                               const QuantParams& b_q,
                               const QuantParams& out_q);

}  // namespace hsicomp
