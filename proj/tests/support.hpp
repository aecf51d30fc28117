#pragma once

// Shared test scaffolding: scratch directories, random graph/cube factories
// and deliberately independent reference implementations (plain-loop forward,
// loop-nest MAC counting) used as oracles against the library kernels.

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "hsicomp/data.hpp"
#include "hsicomp/netgraph.hpp"
#include "hsicomp/tensor.hpp"

namespace testsup {

// Unique scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("hsicomp_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& rel = "") const {
    return rel.empty() ? path_.string() : (path_ / rel).string();
  }

 private:
  std::filesystem::path path_;
};

inline hsicomp::Tensor random_cube(std::mt19937_64& rng, int h, int w, int b,
                                   float lo = -1.0f, float hi = 1.0f) {
  hsicomp::Tensor t(h, w, b, hsicomp::Layout::BIP);
  std::uniform_real_distribution<float> d(lo, hi);
  for (float& v : t.f32()) v = d(rng);
  return t;
}

inline hsicomp::NetGraph random_unet(std::mt19937_64& rng, int max_depth = 3) {
  hsicomp::UnetSpec spec;
  spec.depth = 1 + static_cast<int>(rng() % max_depth);
  spec.init_filters = 4 + static_cast<int>(rng() % 9);
  spec.in_bands = 3 + static_cast<int>(rng() % 23);
  spec.classes = 2 + static_cast<int>(rng() % 5);
  spec.seed = rng();
  return hsicomp::build_unet(spec);
}

// ---------------------------------------------------------------------------
// Plain-loop inference forward, written against the documented layer
// semantics only: same-padding conv, stride-2 2x2 transposed conv, running
// BN statistics, 2x2 max pool, identity dropout, in-order concat, shifted
// softmax. Channels-last throughout.

struct RefMap {
  int h = 0, w = 0, c = 0;
  std::vector<float> v;
  float& at(int r, int col, int ch) {
    return v[(static_cast<size_t>(r) * w + col) * c + ch];
  }
  float at(int r, int col, int ch) const {
    return v[(static_cast<size_t>(r) * w + col) * c + ch];
  }
};

inline RefMap ref_conv(const hsicomp::LayerNode& n, const RefMap& x) {
  RefMap y{x.h, x.w, n.out_ch,
           std::vector<float>(static_cast<size_t>(x.h) * x.w * n.out_ch)};
  const int py = (n.kh - 1) / 2, px = (n.kw - 1) / 2;
  for (int r = 0; r < x.h; ++r)
    for (int col = 0; col < x.w; ++col)
      for (int oc = 0; oc < n.out_ch; ++oc) {
        double acc = n.bias.empty() ? 0.0 : n.bias[oc];
        for (int dy = 0; dy < n.kh; ++dy)
          for (int dx = 0; dx < n.kw; ++dx) {
            const int rr = r + dy - py, cc = col + dx - px;
            if (rr < 0 || rr >= x.h || cc < 0 || cc >= x.w) continue;
            for (int ic = 0; ic < n.in_ch; ++ic)
              acc += static_cast<double>(n.weight[n.widx(oc, dy, dx, ic)]) *
                     x.at(rr, cc, ic);
          }
        y.at(r, col, oc) = static_cast<float>(acc);
      }
  return y;
}

inline RefMap ref_tconv(const hsicomp::LayerNode& n, const RefMap& x) {
  RefMap y{2 * x.h, 2 * x.w, n.out_ch,
           std::vector<float>(static_cast<size_t>(4) * x.h * x.w * n.out_ch)};
  for (size_t i = 0; i < y.v.size(); ++i)
    y.v[i] = n.bias.empty() ? 0.0f : n.bias[i % n.out_ch];
  for (int r = 0; r < x.h; ++r)
    for (int col = 0; col < x.w; ++col)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          for (int oc = 0; oc < n.out_ch; ++oc) {
            double acc = 0.0;
            for (int ic = 0; ic < n.in_ch; ++ic)
              acc += static_cast<double>(n.weight[n.widx(oc, dy, dx, ic)]) *
                     x.at(r, col, ic);
            y.at(2 * r + dy, 2 * col + dx, oc) += static_cast<float>(acc);
          }
  return y;
}

inline RefMap ref_forward_node(const hsicomp::LayerNode& n,
                               const std::vector<const RefMap*>& in) {
  using hsicomp::LayerKind;
  const RefMap& x = *in[0];
  switch (n.kind) {
    case LayerKind::Conv2D:
      return ref_conv(n, x);
    case LayerKind::TransposedConv2D:
      return ref_tconv(n, x);
    case LayerKind::DepthwiseNorm: {
      RefMap y = x;
      for (size_t i = 0; i < y.v.size(); ++i) {
        const int ch = static_cast<int>(i % y.c);
        y.v[i] = n.weight[ch] * y.v[i] + n.bias[ch];
      }
      return y;
    }
    case LayerKind::BatchNorm: {
      RefMap y = x;
      for (size_t i = 0; i < y.v.size(); ++i) {
        const int ch = static_cast<int>(i % y.c);
        const float istd = 1.0f / std::sqrt(n.running_var[ch] + n.eps);
        y.v[i] = n.gamma[ch] * (y.v[i] - n.running_mean[ch]) * istd +
                 n.beta[ch];
      }
      return y;
    }
    case LayerKind::ReLU: {
      RefMap y = x;
      for (float& v : y.v) v = v < 0.0f ? 0.0f : v;
      return y;
    }
    case LayerKind::MaxPool2D: {
      RefMap y{x.h / 2, x.w / 2, x.c,
               std::vector<float>(static_cast<size_t>(x.h / 2) * (x.w / 2) *
                                  x.c)};
      for (int r = 0; r < y.h; ++r)
        for (int col = 0; col < y.w; ++col)
          for (int ch = 0; ch < x.c; ++ch) {
            float m = x.at(2 * r, 2 * col, ch);
            m = std::max(m, x.at(2 * r, 2 * col + 1, ch));
            m = std::max(m, x.at(2 * r + 1, 2 * col, ch));
            m = std::max(m, x.at(2 * r + 1, 2 * col + 1, ch));
            y.at(r, col, ch) = m;
          }
      return y;
    }
    case LayerKind::Dropout:
      return x;  // inference
    case LayerKind::Concat: {
      const RefMap& b = *in[1];
      RefMap y{x.h, x.w, x.c + b.c,
               std::vector<float>(static_cast<size_t>(x.h) * x.w *
                                  (x.c + b.c))};
      for (int r = 0; r < x.h; ++r)
        for (int col = 0; col < x.w; ++col) {
          for (int ch = 0; ch < x.c; ++ch)
            y.at(r, col, ch) = x.at(r, col, ch);
          for (int ch = 0; ch < b.c; ++ch)
            y.at(r, col, x.c + ch) = b.at(r, col, ch);
        }
      return y;
    }
    case LayerKind::Softmax: {
      RefMap y = x;
      for (int r = 0; r < x.h; ++r)
        for (int col = 0; col < x.w; ++col) {
          float mx = x.at(r, col, 0);
          for (int ch = 1; ch < x.c; ++ch) mx = std::max(mx, x.at(r, col, ch));
          double sum = 0.0;
          for (int ch = 0; ch < x.c; ++ch)
            sum += std::exp(static_cast<double>(x.at(r, col, ch)) - mx);
          for (int ch = 0; ch < x.c; ++ch)
            y.at(r, col, ch) = static_cast<float>(
                std::exp(static_cast<double>(x.at(r, col, ch)) - mx) / sum);
        }
      return y;
    }
    case LayerKind::Input:
      return x;
  }
  return x;
}

// Full-graph reference forward on a BIP cube; returns the output node's map.
inline RefMap ref_forward(const hsicomp::NetGraph& g,
                          const hsicomp::Tensor& cube) {
  std::map<std::string, RefMap> outs;
  RefMap in{cube.height(), cube.width(), cube.bands(),
            std::vector<float>(cube.f32().begin(), cube.f32().end())};
  for (const auto& n : g.nodes()) {
    if (n.kind == hsicomp::LayerKind::Input) {
      outs[n.id] = in;
      continue;
    }
    std::vector<const RefMap*> ins;
    for (const auto& id : n.inputs) ins.push_back(&outs.at(id));
    outs[n.id] = ref_forward_node(n, ins);
  }
  return outs.at(g.output_id());
}

// ---------------------------------------------------------------------------
// Loop-nest MAC oracle: propagates shapes with its own rules and counts
// multiply-accumulates by iterating the convolution loops (inner channel
// product folded per kernel tap to keep it affordable). 1 MAC = 2 FLOPS.

struct RefShape {
  int h = 0, w = 0, c = 0;
};

inline uint64_t loopnest_conv_flops(const hsicomp::NetGraph& g, int in_h,
                                    int in_w) {
  using hsicomp::LayerKind;
  std::map<std::string, RefShape> shapes;
  uint64_t macs = 0;
  for (const auto& n : g.nodes()) {
    switch (n.kind) {
      case LayerKind::Input:
        shapes[n.id] = {in_h, in_w, n.out_ch};
        break;
      case LayerKind::Conv2D: {
        const RefShape s = shapes.at(n.inputs[0]);
        uint64_t layer = 0;
        for (int r = 0; r < s.h; ++r)
          for (int c = 0; c < s.w; ++c)
            for (int oc = 0; oc < n.out_ch; ++oc)
              for (int dy = 0; dy < n.kh; ++dy)
                for (int dx = 0; dx < n.kw; ++dx)
                  layer += static_cast<uint64_t>(n.in_ch);
        macs += layer;
        shapes[n.id] = {s.h, s.w, n.out_ch};
        break;
      }
      case LayerKind::TransposedConv2D: {
        const RefShape s = shapes.at(n.inputs[0]);
        uint64_t layer = 0;
        for (int r = 0; r < s.h; ++r)
          for (int c = 0; c < s.w; ++c)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx)
                for (int oc = 0; oc < n.out_ch; ++oc)
                  layer += static_cast<uint64_t>(n.in_ch);
        macs += layer;
        shapes[n.id] = {2 * s.h, 2 * s.w, n.out_ch};
        break;
      }
      case LayerKind::MaxPool2D: {
        const RefShape s = shapes.at(n.inputs[0]);
        shapes[n.id] = {s.h / 2, s.w / 2, s.c};
        break;
      }
      case LayerKind::Concat: {
        const RefShape a = shapes.at(n.inputs[0]);
        const RefShape b = shapes.at(n.inputs[1]);
        shapes[n.id] = {a.h, a.w, a.c + b.c};
        break;
      }
      default:
        shapes[n.id] = shapes.at(n.inputs[0]);
        break;
    }
  }
  return macs * 2;
}

// Mini synthetic dataset shared by the heavier tests; built once per binary.
inline const hsicomp::LoadedDataset& mini_dataset() {
  static hsicomp::LoadedDataset ds = [] {
    hsicomp::SceneSpec spec = hsicomp::mini_scene_spec(7);
    hsicomp::Dataset raw = hsicomp::generate(spec, 7, 24);
    hsicomp::LoadedDataset out;
    out.preprocess = spec.preprocess;
    out.calib = raw.calib;
    out.classes = spec.class_count;
    out.bands = spec.bands;
    out.samples = std::move(raw.samples);
    return out;
  }();
  return ds;
}

}  // namespace testsup
