#include "hsicomp/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>

#include "engine.hpp"
#include "gemm.hpp"
#include "hsicomp/error.hpp"
#include "hsicomp/eval.hpp"
#include "hsicomp/rng.hpp"

namespace hsicomp {

namespace engine {

namespace {

void im2col(const float* in, int h, int w, int ic, int kh, int kw,
            float* col) {
  const int pad_y = (kh - 1) / 2, pad_x = (kw - 1) / 2;
  const size_t krow = static_cast<size_t>(kh) * kw * ic;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      float* dst = col + (static_cast<size_t>(r) * w + c) * krow;
      for (int dy = 0; dy < kh; ++dy) {
        const int ry = r + dy - pad_y;
        for (int dx = 0; dx < kw; ++dx, dst += ic) {
          const int cx = c + dx - pad_x;
          if (ry < 0 || ry >= h || cx < 0 || cx >= w)
            std::memset(dst, 0, sizeof(float) * ic);
          else
            std::memcpy(dst, in + (static_cast<size_t>(ry) * w + cx) * ic,
                        sizeof(float) * ic);
        }
      }
    }
  }
}

void col2im_add(const float* col, int h, int w, int ic, int kh, int kw,
                float* din) {
  const int pad_y = (kh - 1) / 2, pad_x = (kw - 1) / 2;
  const size_t krow = static_cast<size_t>(kh) * kw * ic;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const float* src = col + (static_cast<size_t>(r) * w + c) * krow;
      for (int dy = 0; dy < kh; ++dy) {
        const int ry = r + dy - pad_y;
        for (int dx = 0; dx < kw; ++dx, src += ic) {
          const int cx = c + dx - pad_x;
          if (ry < 0 || ry >= h || cx < 0 || cx >= w) continue;
          float* d = din + (static_cast<size_t>(ry) * w + cx) * ic;
          for (int i = 0; i < ic; ++i) d[i] += src[i];
        }
      }
    }
  }
}

}  // namespace

void conv2d_backward(const LayerNode& n, const FeatureMap& in,
                     const FeatureMap& dout, FeatureMap& din, ParamGrads& g) {
  const int h = in.h, w = in.w, ic = n.in_ch, oc = n.out_ch;
  const size_t hw = static_cast<size_t>(h) * w;
  const size_t krow = static_cast<size_t>(n.kh) * n.kw * ic;
  const bool is_1x1 = n.kh == 1 && n.kw == 1;
  std::vector<float> col, dcol;
  if (!is_1x1) {
    col.resize(hw * krow);
    dcol.resize(hw * krow);
  }
  for (int im = 0; im < in.n; ++im) {
    const float* x = in.v.data() + im * hw * ic;
    const float* dy = dout.v.data() + im * hw * oc;
    float* dx = din.v.data() + im * hw * ic;
    const float* a = x;
    if (!is_1x1) {
      im2col(x, h, w, ic, n.kh, n.kw, col.data());
      a = col.data();
    }
    gemm_tn(oc, static_cast<int>(krow), static_cast<int>(hw), dy, a,
            g.weight.data(), true);
    for (size_t p = 0; p < hw; ++p) {
      const float* row = dy + p * oc;
      for (int f = 0; f < oc; ++f) g.bias[f] += row[f];
    }
    if (is_1x1) {
      gemm_nn(static_cast<int>(hw), ic, oc, dy, n.weight.data(), dx, true);
    } else {
      gemm_nn(static_cast<int>(hw), static_cast<int>(krow), oc, dy,
              n.weight.data(), dcol.data());
      col2im_add(dcol.data(), h, w, ic, n.kh, n.kw, dx);
    }
  }
}

void tconv_backward(const LayerNode& n, const FeatureMap& in,
                    const FeatureMap& dout, FeatureMap& din, ParamGrads& g) {
  const int h = in.h, w = in.w, ic = n.in_ch, oc = n.out_ch;
  const size_t hw = static_cast<size_t>(h) * w;
  const int ow = 2 * w;
  std::vector<float> dyab(hw * oc);
  std::vector<float> wslice(static_cast<size_t>(oc) * ic);
  std::vector<float> dwslice(static_cast<size_t>(oc) * ic);
  for (int im = 0; im < in.n; ++im) {
    const float* x = in.v.data() + im * hw * ic;
    const float* dy = dout.v.data() + static_cast<size_t>(im) * 4 * hw * oc;
    float* dx = din.v.data() + im * hw * ic;
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) {
        for (int r = 0; r < h; ++r)
          for (int c = 0; c < w; ++c)
            std::memcpy(
                dyab.data() + (static_cast<size_t>(r) * w + c) * oc,
                dy + ((static_cast<size_t>(2 * r + a)) * ow + 2 * c + b) * oc,
                sizeof(float) * oc);
        gemm_tn(oc, ic, static_cast<int>(hw), dyab.data(), x, dwslice.data());
        for (int f = 0; f < oc; ++f) {
          float* dst = g.weight.data() + n.widx(f, a, b, 0);
          const float* src = dwslice.data() + static_cast<size_t>(f) * ic;
          for (int i = 0; i < ic; ++i) dst[i] += src[i];
        }
        for (size_t p = 0; p < hw; ++p) {
          const float* row = dyab.data() + p * oc;
          for (int f = 0; f < oc; ++f) g.bias[f] += row[f];
        }
        for (int f = 0; f < oc; ++f)
          std::memcpy(wslice.data() + static_cast<size_t>(f) * ic,
                      n.weight.data() + n.widx(f, a, b, 0), sizeof(float) * ic);
        gemm_nn(static_cast<int>(hw), ic, oc, dyab.data(), wslice.data(), dx,
                true);
      }
    }
  }
}

void depthwise_backward(const LayerNode& n, const FeatureMap& dout,
                        FeatureMap& din) {
  const int c = n.out_ch;
  const size_t rows = dout.size() / c;
  for (size_t p = 0; p < rows; ++p) {
    const float* dy = dout.v.data() + p * c;
    float* dx = din.v.data() + p * c;
    for (int i = 0; i < c; ++i) dx[i] += n.weight[i] * dy[i];
  }
}

void bn_backward(const LayerNode& n, const NodeCache& cache,
                 const FeatureMap& dout, FeatureMap& din, ParamGrads& g) {
  const int c = n.out_ch;
  const size_t rows = dout.size() / c;
  std::vector<double> sum_dy(c, 0.0), sum_dyxh(c, 0.0);
  for (size_t p = 0; p < rows; ++p) {
    const float* dy = dout.v.data() + p * c;
    const float* xh = cache.bn_xhat.data() + p * c;
    for (int i = 0; i < c; ++i) {
      sum_dy[i] += dy[i];
      sum_dyxh[i] += static_cast<double>(dy[i]) * xh[i];
    }
  }
  for (int i = 0; i < c; ++i) {
    g.gamma[i] += static_cast<float>(sum_dyxh[i]);
    g.beta[i] += static_cast<float>(sum_dy[i]);
  }
  const double inv_n = 1.0 / static_cast<double>(rows);
  std::vector<float> mean_dy(c), mean_dyxh(c), scale(c);
  for (int i = 0; i < c; ++i) {
    mean_dy[i] = static_cast<float>(sum_dy[i] * inv_n);
    mean_dyxh[i] = static_cast<float>(sum_dyxh[i] * inv_n);
    scale[i] = n.gamma[i] * cache.bn_istd[i];
  }
  for (size_t p = 0; p < rows; ++p) {
    const float* dy = dout.v.data() + p * c;
    const float* xh = cache.bn_xhat.data() + p * c;
    float* dx = din.v.data() + p * c;
    for (int i = 0; i < c; ++i)
      dx[i] += scale[i] * (dy[i] - mean_dy[i] - xh[i] * mean_dyxh[i]);
  }
}

void relu_backward(const FeatureMap& out, const FeatureMap& dout,
                   FeatureMap& din) {
  for (size_t i = 0; i < dout.size(); ++i)
    if (out.v[i] > 0.0f) din.v[i] += dout.v[i];
}

void maxpool_backward(const std::vector<uint8_t>& argmax,
                      const FeatureMap& dout, FeatureMap& din) {
  const int c = dout.c, oh = dout.h, ow = dout.w;
  for (int im = 0; im < dout.n; ++im)
    for (int r = 0; r < oh; ++r)
      for (int col = 0; col < ow; ++col) {
        const size_t o = dout.idx(im, r, col, 0);
        for (int i = 0; i < c; ++i) {
          const uint8_t q = argmax[o + i];
          din.v[din.idx(im, 2 * r + (q >> 1), 2 * col + (q & 1), i)] +=
              dout.v[o + i];
        }
      }
}

void dropout_backward(const LayerNode& n, const std::vector<uint8_t>& mask,
                      const FeatureMap& dout, FeatureMap& din) {
  if (n.dropout_rate <= 0.0f) {
    for (size_t i = 0; i < dout.size(); ++i) din.v[i] += dout.v[i];
    return;
  }
  const float inv = 1.0f / (1.0f - n.dropout_rate);
  for (size_t i = 0; i < dout.size(); ++i)
    if (mask[i]) din.v[i] += dout.v[i] * inv;
}

void concat_backward(const FeatureMap& dout, FeatureMap& da, FeatureMap& db) {
  const size_t rows = static_cast<size_t>(dout.n) * dout.h * dout.w;
  for (size_t p = 0; p < rows; ++p) {
    const float* dy = dout.v.data() + p * dout.c;
    float* a = da.v.data() + p * da.c;
    float* b = db.v.data() + p * db.c;
    for (int i = 0; i < da.c; ++i) a[i] += dy[i];
    for (int i = 0; i < db.c; ++i) b[i] += dy[da.c + i];
  }
}

}  // namespace engine

namespace {

// Loss and logits gradient in one pass: stable log-softmax cross entropy,
// averaged over non-ignored pixels.
double softmax_ce(const FeatureMap& logits,
                  const std::vector<const LabelMap*>& labels, int classes,
                  FeatureMap& dlogits) {
  if (static_cast<int>(labels.size()) != logits.n)
    throw DimensionError("batch has " + std::to_string(logits.n) +
                         " images but " + std::to_string(labels.size()) +
                         " label maps");
  const uint8_t ignore = ignore_label(classes);
  size_t valid = 0;
  for (int im = 0; im < logits.n; ++im) {
    const LabelMap& lm = *labels[im];
    if (lm.height != logits.h || lm.width != logits.w)
      throw DimensionError("label map " + std::to_string(lm.height) + "x" +
                           std::to_string(lm.width) + " does not match " +
                           std::to_string(logits.h) + "x" +
                           std::to_string(logits.w));
    for (uint8_t l : lm.data) {
      if (l == ignore) continue;
      if (l > ignore)
        throw LabelError("label " + std::to_string(l) + " exceeds " +
                         std::to_string(classes) + " classes");
      ++valid;
    }
  }
  if (valid == 0) throw TrainingError("every pixel is ignore-labeled");

  const double inv_valid = 1.0 / static_cast<double>(valid);
  double loss = 0.0;
  const int c = classes;
  for (int im = 0; im < logits.n; ++im) {
    const LabelMap& lm = *labels[im];
    for (int r = 0; r < logits.h; ++r)
      for (int col = 0; col < logits.w; ++col) {
        const size_t o = logits.idx(im, r, col, 0);
        float* dl = dlogits.v.data() + o;
        const uint8_t y = lm.at(r, col);
        if (y == ignore) {
          std::fill_n(dl, c, 0.0f);
          continue;
        }
        const float* l = logits.v.data() + o;
        float m = l[0];
        for (int i = 1; i < c; ++i) m = std::max(m, l[i]);
        double sum = 0.0;
        for (int i = 0; i < c; ++i) sum += std::exp(static_cast<double>(l[i] - m));
        const double lse = std::log(sum);
        loss += (lse - (l[y] - m)) * inv_valid;
        for (int i = 0; i < c; ++i) {
          const double p = std::exp(static_cast<double>(l[i] - m)) / sum;
          dl[i] = static_cast<float>((p - (i == y ? 1.0 : 0.0)) * inv_valid);
        }
      }
  }
  return loss;
}

}  // namespace

double backward(NetGraph& g, const FeatureMap& x,
                const std::vector<const LabelMap*>& labels, Gradients& grads,
                uint64_t dropout_seed) {
  engine::ExecState st;
  st.training = true;
  st.rng = make_rng(dropout_seed, 0x9e37);
  std::unordered_map<std::string, engine::NodeCache> caches;
  engine::forward_training(g, x, st, caches);

  const std::string logits_id = g.node(g.output_id()).inputs[0];
  const int classes = g.class_count();
  const FeatureMap& logits = caches.at(logits_id).out;

  std::unordered_map<std::string, FeatureMap> dmap;
  auto dslot = [&](const std::string& id) -> FeatureMap& {
    auto it = dmap.find(id);
    if (it != dmap.end()) return it->second;
    const FeatureMap& o = caches.at(id).out;
    return dmap.emplace(id, FeatureMap(o.n, o.h, o.w, o.c)).first->second;
  };

  double loss = softmax_ce(logits, labels, classes, dslot(logits_id));

  grads.weight.clear();
  grads.bias.clear();
  grads.gamma.clear();
  grads.beta.clear();

  const auto& nodes = g.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    const LayerNode& n = *it;
    if (n.kind == LayerKind::Input || n.kind == LayerKind::Softmax) continue;
    const FeatureMap& dout = dslot(n.id);
    const engine::NodeCache& cache = caches.at(n.id);
    switch (n.kind) {
      case LayerKind::Conv2D: {
        engine::ParamGrads pg;
        pg.weight.assign(n.weight.size(), 0.0f);
        pg.bias.assign(n.bias.size(), 0.0f);
        engine::conv2d_backward(n, caches.at(n.inputs[0]).out, dout,
                                dslot(n.inputs[0]), pg);
        grads.weight[n.id] = std::move(pg.weight);
        grads.bias[n.id] = std::move(pg.bias);
        break;
      }
      case LayerKind::TransposedConv2D: {
        engine::ParamGrads pg;
        pg.weight.assign(n.weight.size(), 0.0f);
        pg.bias.assign(n.bias.size(), 0.0f);
        engine::tconv_backward(n, caches.at(n.inputs[0]).out, dout,
                               dslot(n.inputs[0]), pg);
        grads.weight[n.id] = std::move(pg.weight);
        grads.bias[n.id] = std::move(pg.bias);
        break;
      }
      case LayerKind::BatchNorm: {
        engine::ParamGrads pg;
        pg.gamma.assign(n.gamma.size(), 0.0f);
        pg.beta.assign(n.beta.size(), 0.0f);
        engine::bn_backward(n, cache, dout, dslot(n.inputs[0]), pg);
        grads.gamma[n.id] = std::move(pg.gamma);
        grads.beta[n.id] = std::move(pg.beta);
        break;
      }
      case LayerKind::DepthwiseNorm:
        engine::depthwise_backward(n, dout, dslot(n.inputs[0]));
        break;
      case LayerKind::ReLU:
        engine::relu_backward(cache.out, dout, dslot(n.inputs[0]));
        break;
      case LayerKind::MaxPool2D:
        engine::maxpool_backward(cache.pool_argmax, dout, dslot(n.inputs[0]));
        break;
      case LayerKind::Dropout:
        engine::dropout_backward(n, cache.drop_mask, dout, dslot(n.inputs[0]));
        break;
      case LayerKind::Concat:
        engine::concat_backward(dout, dslot(n.inputs[0]), dslot(n.inputs[1]));
        break;
      default:
        break;
    }
    // This node's gradient is final now; free it.
    dmap.erase(n.id);
  }
  return loss;
}

namespace {

struct AdamSlot {
  std::vector<float> m, v;
};

class Adam {
 public:
  explicit Adam(const TrainConfig& cfg) : cfg_(cfg) {}

  void step_begin() { ++t_; }

  void update(const std::string& key, std::vector<float>& w,
              const std::vector<float>& grad) {
    AdamSlot& s = slots_[key];
    if (s.m.empty()) {
      s.m.assign(w.size(), 0.0f);
      s.v.assign(w.size(), 0.0f);
    }
    const float b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
    const float bc1 = 1.0f - std::pow(b1, static_cast<float>(t_));
    const float bc2 = 1.0f - std::pow(b2, static_cast<float>(t_));
    for (size_t i = 0; i < w.size(); ++i) {
      const float gi = grad[i];
      s.m[i] = b1 * s.m[i] + (1.0f - b1) * gi;
      s.v[i] = b2 * s.v[i] + (1.0f - b2) * gi * gi;
      const float mhat = s.m[i] / bc1;
      const float vhat = s.v[i] / bc2;
      w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
    }
  }

 private:
  TrainConfig cfg_;
  std::unordered_map<std::string, AdamSlot> slots_;
  int64_t t_ = 0;
};

}  // namespace

TrainHistory train(NetGraph& g, std::span<const Sample> train_set,
                   std::span<const Sample> val_set,
                   const TrainConfig& cfg) {
  if (train_set.empty()) throw TrainingError("training set is empty");
  if (val_set.empty()) throw TrainingError("validation set is empty");
  if (cfg.batch <= 0) throw TrainingError("batch size must be positive");

  TrainHistory hist;
  if (cfg.epochs <= 0) return hist;

  const Tensor& first = train_set[0].cube;
  for (const Sample& s : train_set)
    if (!s.cube.same_shape(first) || s.cube.layout() != Layout::BIP)
      throw DimensionError("training cubes must share dims and be BIP");

  Adam adam(cfg);
  std::mt19937_64 shuffle_rng = make_rng(cfg.seed, 1);
  std::vector<size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  NetGraph best = g;
  int stale = 0;
  Gradients grads;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    size_t seen = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch) {
      const size_t bs = std::min<size_t>(cfg.batch, order.size() - start);
      FeatureMap x(static_cast<int>(bs), first.height(), first.width(),
                   first.bands());
      std::vector<const LabelMap*> labels(bs);
      for (size_t i = 0; i < bs; ++i) {
        const Sample& s = train_set[order[start + i]];
        auto src = s.cube.f32();
        std::copy(src.begin(), src.end(),
                  x.v.begin() + i * src.size());
        labels[i] = &s.labels;
      }
      const uint64_t drop_seed =
          mix_seed(cfg.seed, (static_cast<uint64_t>(epoch) << 20) + start);
      const double loss = backward(g, x, labels, grads, drop_seed);
      if (!std::isfinite(loss))
        throw TrainingError("loss diverged at epoch " +
                            std::to_string(epoch));
      epoch_loss += loss * static_cast<double>(bs);
      seen += bs;

      adam.step_begin();
      for (auto& [id, dw] : grads.weight)
        adam.update(id + "/w", g.node(id).weight, dw);
      for (auto& [id, db] : grads.bias)
        adam.update(id + "/b", g.node(id).bias, db);
      for (auto& [id, dg] : grads.gamma)
        adam.update(id + "/g", g.node(id).gamma, dg);
      for (auto& [id, dbeta] : grads.beta)
        adam.update(id + "/beta", g.node(id).beta, dbeta);
    }

    EvalResult val = evaluate(g, val_set);
    EpochStats es;
    es.train_loss = epoch_loss / static_cast<double>(seen);
    es.val_giou = val.agg.giou;
    es.val_wiou = val.agg.wiou;
    hist.epochs.push_back(es);
    if (cfg.verbose)
      std::printf("epoch %3d  loss %.5f  val gIoU %.4f  wIoU %.4f\n", epoch,
                  es.train_loss, es.val_giou, es.val_wiou);

    if (hist.best_epoch < 0 || es.val_wiou > hist.best_wiou + cfg.min_delta) {
      hist.best_epoch = epoch;
      hist.best_wiou = es.val_wiou;
      best = g;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      hist.early_stopped = true;
      break;
    }
  }

  g = std::move(best);
  return hist;
}

}  // namespace hsicomp
