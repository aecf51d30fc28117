#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hsicomp/metrics.hpp"
#include "hsicomp/netgraph.hpp"
#include "hsicomp/tensor.hpp"

namespace hsicomp {

// One model-ready training/eval pair: a preprocessed BIP cube and its label
// map. Labels equal to the class count mark ignored pixels.
struct Sample {
  Tensor cube;
  LabelMap labels;
};

// Mean pixelwise cross-entropy over non-ignored pixels, plus gradients for
// every trainable tensor (conv weights/bias, BN gamma/beta). DepthwiseNorm
// parameters are fixed normalization constants and receive no gradient.
struct Gradients {
  std::map<std::string, std::vector<float>> weight, bias, gamma, beta;
};

double backward(NetGraph& g, const FeatureMap& x,
                const std::vector<const LabelMap*>& labels, Gradients& grads,
                uint64_t dropout_seed = 0);

struct TrainConfig {
  int epochs = 200;
  int batch = 30;
  float lr = 1e-3f;
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.999f;
  float adam_eps = 1e-8f;
  int patience = 10;        // early stopping on validation wIoU
  double min_delta = 1e-4;  // improvement below this does not reset patience
  uint64_t seed = 1;
  bool verbose = false;
};

struct EpochStats {
  double train_loss = 0.0;
  double val_giou = 0.0;
  double val_wiou = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  int best_epoch = -1;  // index into epochs
  double best_wiou = 0.0;
  bool early_stopped = false;
};

// Adam with shuffled mini-batches; keeps the weights of the best validation
// wIoU epoch. All cubes must share dims. epochs = 0 returns immediately.
TrainHistory train(NetGraph& g, std::span<const Sample> train_set,
                   std::span<const Sample> val_set, const TrainConfig& cfg);

}  // namespace hsicomp
