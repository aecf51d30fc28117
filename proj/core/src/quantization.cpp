#include "hsicomp/quantization.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_map>
#include <utility>
#include <vector>

#include "engine.hpp"
#include "gemm.hpp"
#include "hsicomp/error.hpp"
#include "hsicomp/kvfile.hpp"
#include "hsicomp/parallel.hpp"

namespace hsicomp {

int QuantParams::quantize(float x) const {
  const long q =
      std::lround(std::ldexp(static_cast<double>(x), -exponent)) + zero_point;
  return static_cast<int>(
      std::clamp(q, static_cast<long>(qmin()), static_cast<long>(qmax())));
}

const char* quant_mode_name(QuantMode m) {
  return m == QuantMode::Symmetric ? "symmetric" : "affine";
}

QuantMode quant_mode_from_name(std::string_view name) {
  if (name == "symmetric") return QuantMode::Symmetric;
  if (name == "affine") return QuantMode::Affine;
  throw ParseError("unknown quantization mode '" + std::string(name) + "'");
}

void save_quant_params(const QuantParamMap& params, const std::string& path) {
  KvFile kv;
  for (const auto& [id, p] : params) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%d %d %s", p.exponent, p.zero_point,
                  quant_mode_name(p.mode));
    kv.set("q." + id, buf);
  }
  kv.save(path);
}

QuantParamMap load_quant_params(const std::string& path) {
  const KvFile kv = KvFile::load(path);
  QuantParamMap out;
  for (const std::string& key : kv.keys()) {
    if (key.rfind("q.", 0) != 0)
      throw ParseError(path + ": unexpected key '" + key + "'");
    const std::vector<std::string> f = split_ws(kv.get(key));
    if (f.size() != 3)
      throw ParseError(path + ": '" + key +
                       "' wants 'exponent zero_point mode'");
    QuantParams p;
    p.exponent = static_cast<int>(parse_int(f[0], key));
    p.zero_point = static_cast<int>(parse_int(f[1], key));
    p.mode = quant_mode_from_name(f[2]);
    if (p.exponent < -64 || p.exponent > 64)
      throw ParseError(path + ": exponent out of range for '" + key + "'");
    if (p.zero_point < -128 || p.zero_point > 127)
      throw ParseError(path + ": zero point out of range for '" + key + "'");
    if (p.mode == QuantMode::Symmetric && p.zero_point != 0)
      throw ParseError(path + ": symmetric tensor '" + key +
                       "' carries a nonzero zero point");
    out.emplace(key.substr(2), p);
  }
  return out;
}

namespace {

const std::string& resolve(
    const std::unordered_map<std::string, std::string>& remap,
    const std::string& id) {
  const auto it = remap.find(id);
  return it == remap.end() ? id : it->second;
}

int affine_zero_point(double lo, int e) {
  const long z = -128 - std::lround(std::ldexp(lo, -e));
  return static_cast<int>(std::clamp(z, -128L, 127L));
}

double qdq_sse(std::span<const float> values, const QuantParams& p) {
  double sse = 0.0;
  for (float v : values) {
    const double d = static_cast<double>(v) - static_cast<double>(p.qdq(v));
    sse += d * d;
  }
  return sse;
}

QuantParams fit_static(const std::vector<float>& v, const TensorPolicy& tp,
                       int window) {
  if (tp.fit == RangeFit::MinMse) return fit_min_mse(v, tp.mode, window);
  float lo = 0.0f, hi = 0.0f;
  if (!v.empty()) {
    lo = hi = v[0];
    for (float x : v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  }
  return fit_min_max(lo, hi, tp.mode);
}

}  // namespace

NetGraph fold_bn(const NetGraph& g) {
  g.validate();
  std::unordered_map<std::string, std::string> remap;
  NetGraph out;
  for (const LayerNode& n : g.nodes()) {
    if (n.kind == LayerKind::BatchNorm) {
      const std::string& pid = resolve(remap, n.inputs[0]);
      if (!out.has(pid) || !is_conv_kind(out.node(pid).kind))
        throw StructureError("batch norm " + n.id +
                             " does not follow a convolution");
      if (g.consumers(n.inputs[0]).size() != 1)
        throw StructureError("output of " + pid + " is shared; cannot fold " +
                             n.id);
      LayerNode& conv = out.node(pid);
      if (conv.out_ch != n.out_ch)
        throw StructureError("channel mismatch folding " + n.id + " into " +
                             pid);
      const size_t fsz = static_cast<size_t>(conv.kh) * conv.kw * conv.in_ch;
      for (int f = 0; f < conv.out_ch; ++f) {
        const double a =
            n.gamma[f] / std::sqrt(static_cast<double>(n.running_var[f]) +
                                   n.eps);
        float* wrow = conv.weight.data() + f * fsz;
        for (size_t i = 0; i < fsz; ++i)
          wrow[i] = static_cast<float>(wrow[i] * a);
        conv.bias[f] = static_cast<float>(
            (conv.bias[f] - static_cast<double>(n.running_mean[f])) * a +
            n.beta[f]);
      }
      remap.emplace(n.id, pid);
      continue;
    }
    LayerNode copy = n;
    for (std::string& i : copy.inputs) i = resolve(remap, i);
    out.add(std::move(copy));
  }
  out.validate();
  return out;
}

NetGraph cross_layer_equalize(const NetGraph& g, int passes) {
  if (passes < 0) throw ConfigError("equalization passes must be >= 0");
  NetGraph out = g;
  out.validate();

  struct Chain {
    std::string a, b;
  };
  std::vector<Chain> chains;
  for (const LayerNode& n : out.nodes()) {
    if (n.kind != LayerKind::ReLU) continue;
    const LayerNode& prod = out.node(n.inputs[0]);
    if (!is_conv_kind(prod.kind)) continue;
    if (out.consumers(prod.id).size() != 1) continue;
    const std::vector<std::string> next = out.consumers(n.id);
    if (next.size() != 1 || !is_conv_kind(out.node(next[0]).kind)) continue;
    chains.push_back({prod.id, next[0]});
  }

  for (int pass = 0; pass < passes; ++pass) {
    for (const Chain& ch : chains) {
      LayerNode& a = out.node(ch.a);
      LayerNode& b = out.node(ch.b);
      const size_t fsz = static_cast<size_t>(a.kh) * a.kw * a.in_ch;
      for (int i = 0; i < a.out_ch; ++i) {
        double r1 = std::abs(static_cast<double>(a.bias[i]));
        float* arow = a.weight.data() + i * fsz;
        for (size_t k = 0; k < fsz; ++k)
          r1 = std::max(r1, std::abs(static_cast<double>(arow[k])));
        double r2 = 0.0;
        for (int f = 0; f < b.out_ch; ++f)
          for (int dy = 0; dy < b.kh; ++dy)
            for (int dx = 0; dx < b.kw; ++dx)
              r2 = std::max(r2, std::abs(static_cast<double>(
                                    b.weight[b.widx(f, dy, dx, i)])));
        if (r1 == 0.0 || r2 == 0.0) continue;
        const double s = std::sqrt(r1 / r2);
        const double inv = 1.0 / s;
        for (size_t k = 0; k < fsz; ++k)
          arow[k] = static_cast<float>(arow[k] * inv);
        a.bias[i] = static_cast<float>(a.bias[i] * inv);
        for (int f = 0; f < b.out_ch; ++f)
          for (int dy = 0; dy < b.kh; ++dy)
            for (int dx = 0; dx < b.kw; ++dx) {
              float& wv = b.weight[b.widx(f, dy, dx, i)];
              wv = static_cast<float>(wv * s);
            }
      }
    }
  }
  return out;
}

QuantParams fit_min_max(float lo, float hi, QuantMode mode) {
  if (lo > hi) std::swap(lo, hi);
  QuantParams p;
  p.mode = mode;
  const double amax = std::max(std::abs(static_cast<double>(lo)),
                               std::abs(static_cast<double>(hi)));
  if (amax == 0.0) return p;  // all-zero fallback: 2^-7, zero point 0

  if (mode == QuantMode::Symmetric) {
    int e = static_cast<int>(std::ceil(std::log2(amax / 127.0)));
    while (std::ldexp(127.0, e) < amax) ++e;
    while (std::ldexp(127.0, e - 1) >= amax) --e;
    p.exponent = e;
    return p;
  }

  const double range = static_cast<double>(hi) - static_cast<double>(lo);
  if (range > 0.0) {
    int e = static_cast<int>(std::ceil(std::log2(range / 255.0)));
    while (std::ldexp(255.0, e) < range) ++e;
    while (std::ldexp(255.0, e - 1) >= range) --e;
    p.exponent = e;
  }
  p.zero_point = affine_zero_point(lo, p.exponent);
  return p;
}

QuantParams fit_min_mse(std::span<const float> values, QuantMode mode,
                        int window) {
  float lo = 0.0f, hi = 0.0f;
  if (!values.empty()) {
    lo = hi = values[0];
    for (float v : values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  const QuantParams mm = fit_min_max(lo, hi, mode);
  if (values.empty() || (lo == 0.0f && hi == 0.0f)) return mm;

  QuantParams best = mm;
  double best_sse = qdq_sse(values, mm);
  for (int d = 1; d <= window; ++d) {
    QuantParams cand;
    cand.mode = mode;
    cand.exponent = mm.exponent - d;
    if (mode == QuantMode::Affine)
      cand.zero_point = affine_zero_point(lo, cand.exponent);
    const double sse = qdq_sse(values, cand);
    if (sse < best_sse) {
      best = cand;
      best_sse = sse;
    }
  }
  return best;
}

namespace {

// Non-conv node execution shared by the calibration and quantized paths.
void run_simple_node(const LayerNode& n,
                     const std::vector<const FeatureMap*>& ins,
                     FeatureMap& out) {
  switch (n.kind) {
    case LayerKind::DepthwiseNorm:
      engine::depthwise_forward(n, *ins[0], out);
      break;
    case LayerKind::BatchNorm:
      engine::bn_forward_inference(n, *ins[0], out);
      break;
    case LayerKind::ReLU:
      engine::relu_forward(*ins[0], out);
      break;
    case LayerKind::MaxPool2D:
      engine::maxpool_forward(*ins[0], out, nullptr);
      break;
    case LayerKind::Dropout:
      out.v = ins[0]->v;
      break;
    case LayerKind::Concat:
      engine::concat_forward(*ins[0], *ins[1], out);
      break;
    case LayerKind::Softmax:
      engine::softmax_forward(*ins[0], out);
      break;
    default:
      throw StructureError("unexpected node kind at " + n.id);
  }
}

// Inference-mode float walk invoking visit(node, output) for every node.
// Outputs are freed as soon as their last consumer has run.
template <class Visit>
void run_float_graph(const NetGraph& g, const FeatureMap& x, Visit&& visit) {
  std::unordered_map<std::string, int> pending;
  for (const LayerNode& n : g.nodes())
    for (const std::string& i : n.inputs) ++pending[i];

  std::unordered_map<std::string, FeatureMap> outs;
  for (const LayerNode& n : g.nodes()) {
    FeatureMap out;
    if (n.kind == LayerKind::Input) {
      if (x.c != n.out_ch)
        throw DimensionError("graph expects " + std::to_string(n.out_ch) +
                             " bands, input carries " + std::to_string(x.c));
      out = x;
    } else {
      std::vector<const FeatureMap*> ins;
      std::vector<engine::Shape3> shapes;
      ins.reserve(n.inputs.size());
      for (const std::string& i : n.inputs) {
        const FeatureMap& m = outs.at(i);
        ins.push_back(&m);
        shapes.push_back({m.h, m.w, m.c});
      }
      const engine::Shape3 s = engine::node_out_shape(n, shapes);
      out = FeatureMap(ins[0]->n, s.h, s.w, s.c);
      if (n.kind == LayerKind::Conv2D)
        engine::conv2d_forward(n, *ins[0], out);
      else if (n.kind == LayerKind::TransposedConv2D)
        engine::tconv_forward(n, *ins[0], out);
      else
        run_simple_node(n, ins, out);
    }
    visit(n, out);
    for (const std::string& i : n.inputs) {
      const auto it = pending.find(i);
      if (it != pending.end() && --it->second == 0) outs.erase(i);
    }
    outs.emplace(n.id, std::move(out));
  }
}

}  // namespace

QuantParamMap calibrate(const NetGraph& g, std::span<const Tensor> calib,
                        const CalibrationPolicy& policy) {
  g.validate();
  if (calib.empty()) throw CalibrationError("calibration set is empty");
  if (policy.mse_exponents_below < 0)
    throw ConfigError("min-MSE window must be >= 0");

  QuantParamMap out;
  for (const LayerNode& n : g.nodes()) {
    if (!is_conv_kind(n.kind)) continue;
    out.emplace(n.id + ".weight",
                fit_static(n.weight, policy.weights,
                           policy.mse_exponents_below));
    if (!n.bias.empty())
      out.emplace(n.id + ".bias",
                  fit_static(n.bias, policy.bias, policy.mse_exponents_below));
  }

  // Activations worth tracking: the input, conv outputs, and anything a conv
  // consumes (pool, concat, dropout and friends feeding a conv).
  std::vector<std::string> act_ids;
  std::unordered_map<std::string, size_t> act_index;
  for (const LayerNode& n : g.nodes()) {
    bool track = n.kind == LayerKind::Input || is_conv_kind(n.kind);
    if (!track)
      for (const std::string& c : g.consumers(n.id))
        if (is_conv_kind(g.node(c).kind)) {
          track = true;
          break;
        }
    if (track) {
      act_index.emplace(n.id, act_ids.size());
      act_ids.push_back(n.id);
    }
  }
  const int n_act = static_cast<int>(act_ids.size());
  const int n_cubes = static_cast<int>(calib.size());

  // Pass 1: per-cube ranges, merged order-free.
  std::vector<float> los(static_cast<size_t>(n_cubes) * n_act);
  std::vector<float> his(static_cast<size_t>(n_cubes) * n_act);
  parallel_for(n_cubes, [&](int ci) {
    const FeatureMap x = tensor_to_features(calib[ci]);
    float* lrow = los.data() + static_cast<size_t>(ci) * n_act;
    float* hrow = his.data() + static_cast<size_t>(ci) * n_act;
    run_float_graph(g, x, [&](const LayerNode& n, const FeatureMap& o) {
      const auto it = act_index.find(n.id);
      if (it == act_index.end()) return;
      float lo = o.v[0], hi = o.v[0];
      for (float v : o.v) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      lrow[it->second] = lo;
      hrow[it->second] = hi;
    });
  });
  std::vector<float> glo(los.begin(), los.begin() + n_act);
  std::vector<float> ghi(his.begin(), his.begin() + n_act);
  for (int ci = 1; ci < n_cubes; ++ci)
    for (int a = 0; a < n_act; ++a) {
      glo[a] = std::min(glo[a], los[static_cast<size_t>(ci) * n_act + a]);
      ghi[a] = std::max(ghi[a], his[static_cast<size_t>(ci) * n_act + a]);
    }

  // Min-max activations resolve now; min-MSE ones get a candidate ladder.
  const int ncand = policy.mse_exponents_below + 1;
  std::vector<size_t> mse_acts;
  std::vector<QuantParams> cands;
  std::unordered_map<std::string, size_t> mse_job;
  for (int a = 0; a < n_act; ++a) {
    const TensorPolicy& tp =
        act_ids[a] == g.input_id() ? policy.input : policy.activations;
    const QuantParams mm = fit_min_max(glo[a], ghi[a], tp.mode);
    if (tp.fit == RangeFit::MinMax || (glo[a] == 0.0f && ghi[a] == 0.0f)) {
      out.emplace(act_ids[a] + ".out", mm);
      continue;
    }
    mse_job.emplace(act_ids[a], mse_acts.size());
    mse_acts.push_back(static_cast<size_t>(a));
    for (int d = 0; d < ncand; ++d) {
      QuantParams cand;
      cand.mode = tp.mode;
      cand.exponent = mm.exponent - d;
      cand.zero_point = tp.mode == QuantMode::Affine
                            ? affine_zero_point(glo[a], cand.exponent)
                            : 0;
      cands.push_back(cand);
    }
  }

  // Pass 2: quantize-dequantize error per candidate, summed in cube order.
  if (!mse_acts.empty()) {
    const size_t stride = mse_acts.size() * ncand;
    std::vector<double> sse(static_cast<size_t>(n_cubes) * stride, 0.0);
    parallel_for(n_cubes, [&](int ci) {
      const FeatureMap x = tensor_to_features(calib[ci]);
      double* row = sse.data() + static_cast<size_t>(ci) * stride;
      run_float_graph(g, x, [&](const LayerNode& n, const FeatureMap& o) {
        const auto it = mse_job.find(n.id);
        if (it == mse_job.end()) return;
        for (int d = 0; d < ncand; ++d)
          row[it->second * ncand + d] +=
              qdq_sse(o.v, cands[it->second * ncand + d]);
      });
    });
    for (size_t j = 0; j < mse_acts.size(); ++j) {
      int best = 0;
      double best_sse = 0.0;
      for (int d = 0; d < ncand; ++d) {
        double total = 0.0;
        for (int ci = 0; ci < n_cubes; ++ci)
          total += sse[static_cast<size_t>(ci) * stride + j * ncand + d];
        if (d == 0 || total < best_sse) {
          best = d;
          best_sse = total;
        }
      }
      out.emplace(act_ids[mse_acts[j]] + ".out", cands[j * ncand + best]);
    }
  }
  return out;
}

namespace {

const QuantParams& need(const QuantParamMap& params, const std::string& key) {
  const auto it = params.find(key);
  if (it == params.end())
    throw CalibrationError("no quantization parameters for '" + key + "'");
  return it->second;
}

void qdq_inplace(std::vector<float>& v, const QuantParams& p) {
  for (float& x : v) x = p.qdq(x);
}

// Requantize straight from the f64 accumulator so no float rounding sneaks
// in between accumulation and the integer grid.
float requant(double val, const QuantParams& p) {
  const long q = std::lround(std::ldexp(val, -p.exponent)) + p.zero_point;
  const long qc = std::clamp(q, static_cast<long>(p.qmin()),
                             static_cast<long>(p.qmax()));
  return std::ldexp(static_cast<float>(qc - p.zero_point), p.exponent);
}

void im2col_d(const double* in, int h, int w, int ic, int kh, int kw,
              double* col) {
  const int pad_y = (kh - 1) / 2, pad_x = (kw - 1) / 2;
  const size_t krow = static_cast<size_t>(kh) * kw * ic;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double* dst = col + (static_cast<size_t>(r) * w + c) * krow;
      for (int dy = 0; dy < kh; ++dy) {
        const int ry = r + dy - pad_y;
        for (int dx = 0; dx < kw; ++dx, dst += ic) {
          const int cx = c + dx - pad_x;
          if (ry < 0 || ry >= h || cx < 0 || cx >= w)
            std::fill(dst, dst + ic, 0.0);
          else {
            const double* src = in + (static_cast<size_t>(ry) * w + cx) * ic;
            std::copy(src, src + ic, dst);
          }
        }
      }
    }
  }
}

// Conv on already-quantized operands. Products and sums of the dequantized
// int8 values are exact in f64, so this reproduces i32 accumulation bit for
// bit before requantizing to the output grid.
FeatureMap conv_q(const LayerNode& n, const FeatureMap& in,
                  const std::vector<float>& w, const std::vector<float>& b,
                  const QuantParams& out_q) {
  const int h = in.h, wd = in.w, ic = n.in_ch, oc = n.out_ch;
  const size_t hw = static_cast<size_t>(h) * wd;
  const size_t krow = static_cast<size_t>(n.kh) * n.kw * ic;
  const bool is_1x1 = n.kh == 1 && n.kw == 1;
  FeatureMap out(in.n, h, wd, oc);
  std::vector<double> xin(hw * ic), wmat(w.begin(), w.end()), acc(hw * oc);
  std::vector<double> col;
  if (!is_1x1) col.resize(hw * krow);
  for (int im = 0; im < in.n; ++im) {
    const float* src = in.v.data() + static_cast<size_t>(im) * hw * ic;
    std::copy(src, src + hw * ic, xin.begin());
    const double* a = xin.data();
    if (!is_1x1) {
      im2col_d(xin.data(), h, wd, ic, n.kh, n.kw, col.data());
      a = col.data();
    }
    gemm_nt(static_cast<int>(hw), oc, static_cast<int>(krow), a, wmat.data(),
            acc.data());
    float* dst = out.v.data() + static_cast<size_t>(im) * hw * oc;
    for (size_t p = 0; p < hw; ++p)
      for (int f = 0; f < oc; ++f)
        dst[p * oc + f] = requant(acc[p * oc + f] + b[f], out_q);
  }
  return out;
}

FeatureMap tconv_q(const LayerNode& n, const FeatureMap& in,
                   const std::vector<float>& w, const std::vector<float>& b,
                   const QuantParams& out_q) {
  const int h = in.h, wd = in.w, ic = n.in_ch, oc = n.out_ch;
  const size_t hw = static_cast<size_t>(h) * wd;
  const int oh = 2 * h, ow = 2 * wd;
  FeatureMap out(in.n, oh, ow, oc);
  std::vector<double> xin(hw * ic), wslice(static_cast<size_t>(oc) * ic),
      tmp(hw * oc);
  for (int im = 0; im < in.n; ++im) {
    const float* src = in.v.data() + static_cast<size_t>(im) * hw * ic;
    std::copy(src, src + hw * ic, xin.begin());
    float* dst = out.v.data() + static_cast<size_t>(im) * oh * ow * oc;
    for (int a = 0; a < 2; ++a)
      for (int bq = 0; bq < 2; ++bq) {
        for (int f = 0; f < oc; ++f)
          for (int i = 0; i < ic; ++i)
            wslice[static_cast<size_t>(f) * ic + i] = w[n.widx(f, a, bq, i)];
        gemm_nt(static_cast<int>(hw), oc, ic, xin.data(), wslice.data(),
                tmp.data());
        for (int r = 0; r < h; ++r)
          for (int c = 0; c < wd; ++c) {
            const double* t = tmp.data() + (static_cast<size_t>(r) * wd + c) * oc;
            float* o = dst + (static_cast<size_t>(2 * r + a) * ow +
                              (2 * c + bq)) * oc;
            for (int f = 0; f < oc; ++f) o[f] = requant(t[f] + b[f], out_q);
          }
      }
  }
  return out;
}

}  // namespace

FeatureMap quantized_forward(const NetGraph& g, const FeatureMap& x,
                             const QuantParamMap& params) {
  g.validate();
  std::unordered_map<std::string, int> pending;
  for (const LayerNode& n : g.nodes())
    for (const std::string& i : n.inputs) ++pending[i];

  std::unordered_map<std::string, FeatureMap> outs;
  for (const LayerNode& n : g.nodes()) {
    FeatureMap out;
    if (n.kind == LayerKind::Input) {
      if (x.c != n.out_ch)
        throw DimensionError("graph expects " + std::to_string(n.out_ch) +
                             " bands, input carries " + std::to_string(x.c));
      out = x;
      qdq_inplace(out.v, need(params, n.id + ".out"));
    } else if (is_conv_kind(n.kind)) {
      FeatureMap qin = outs.at(n.inputs[0]);
      qdq_inplace(qin.v, need(params, n.inputs[0] + ".out"));
      std::vector<float> w = n.weight;
      qdq_inplace(w, need(params, n.id + ".weight"));
      std::vector<float> b = n.bias;
      if (b.empty())
        b.assign(n.out_ch, 0.0f);
      else
        qdq_inplace(b, need(params, n.id + ".bias"));
      const QuantParams& oq = need(params, n.id + ".out");
      out = n.kind == LayerKind::Conv2D ? conv_q(n, qin, w, b, oq)
                                        : tconv_q(n, qin, w, b, oq);
    } else {
      std::vector<const FeatureMap*> ins;
      std::vector<engine::Shape3> shapes;
      ins.reserve(n.inputs.size());
      for (const std::string& i : n.inputs) {
        const FeatureMap& m = outs.at(i);
        ins.push_back(&m);
        shapes.push_back({m.h, m.w, m.c});
      }
      const engine::Shape3 s = engine::node_out_shape(n, shapes);
      out = FeatureMap(ins[0]->n, s.h, s.w, s.c);
      run_simple_node(n, ins, out);
    }
    for (const std::string& i : n.inputs) {
      const auto it = pending.find(i);
      if (it != pending.end() && --it->second == 0) outs.erase(i);
    }
    outs.emplace(n.id, std::move(out));
  }
  return std::move(outs.at(g.output_id()));
}

Tensor quantized_forward(const NetGraph& g, const Tensor& bip_cube,
                         const QuantParamMap& params) {
  return features_to_tensor(
      quantized_forward(g, tensor_to_features(bip_cube), params));
}

DriftReport requantization_drift(const NetGraph& g_explicit,
                                 const NetGraph& g_fused,
                                 const QuantParamMap& params_explicit,
                                 const QuantParamMap& params_fused,
                                 std::span<const Tensor> cubes) {
  g_explicit.validate();
  g_fused.validate();
  const LayerNode* norm = nullptr;
  for (const LayerNode& n : g_fused.nodes())
    if (n.kind == LayerKind::DepthwiseNorm) {
      norm = &n;
      break;
    }
  if (!norm || norm->inputs[0] != g_fused.input_id())
    throw StructureError(
        "fused graph does not start with a normalization layer");
  if (g_fused.nodes().size() != g_explicit.nodes().size() + 1)
    throw StructureError("graphs are not an explicit/fused pair");
  for (const LayerNode& n : g_explicit.nodes())
    if (!g_fused.has(n.id) || g_fused.node(n.id).kind != n.kind)
      throw StructureError("graphs are not an explicit/fused pair: node '" +
                           n.id + "' differs");
  if (g_explicit.in_bands() != g_fused.in_bands() ||
      g_explicit.class_count() != g_fused.class_count())
    throw StructureError("explicit and fused models disagree on shape");
  if (cubes.empty())
    throw CalibrationError("drift evaluation needs at least one cube");

  DriftReport rep;
  rep.per_image.assign(cubes.size(), 0.0);
  rep.maps.resize(cubes.size());
  parallel_for(static_cast<int>(cubes.size()), [&](int ci) {
    const FeatureMap x = tensor_to_features(cubes[ci]);
    if (x.c != norm->out_ch)
      throw DimensionError("cube bands do not match the model");
    FeatureMap xn = x;
    const size_t rows = xn.size() / norm->out_ch;
    for (size_t p = 0; p < rows; ++p) {
      float* v = xn.v.data() + p * norm->out_ch;
      for (int c = 0; c < norm->out_ch; ++c)
        v[c] = norm->weight[c] * v[c] + norm->bias[c];
    }
    const FeatureMap oe = quantized_forward(g_explicit, xn, params_explicit);
    const FeatureMap of = quantized_forward(g_fused, x, params_fused);
    LabelMap map(oe.h, oe.w);
    size_t changed = 0;
    for (int r = 0; r < oe.h; ++r)
      for (int c = 0; c < oe.w; ++c) {
        const float* a = oe.v.data() + (static_cast<size_t>(r) * oe.w + c) * oe.c;
        const float* b = of.v.data() + (static_cast<size_t>(r) * of.w + c) * of.c;
        int ia = 0, ib = 0;
        for (int k = 1; k < oe.c; ++k) {
          if (a[k] > a[ia]) ia = k;
          if (b[k] > b[ib]) ib = k;
        }
        if (ia != ib) {
          map.at(r, c) = 1;
          ++changed;
        }
      }
    rep.per_image[ci] =
        static_cast<double>(changed) / (static_cast<double>(oe.h) * oe.w);
    rep.maps[ci] = std::move(map);
  });
  double sum = 0.0;
  for (double v : rep.per_image) sum += v;
  rep.mean_changed = sum / static_cast<double>(rep.per_image.size());
  return rep;
}

FeatureMap int8_reference_conv(const LayerNode& conv, const FeatureMap& x,
                               const QuantParams& in_q, const QuantParams& w_q,
                               const QuantParams& b_q,
                               const QuantParams& out_q) {
  if (conv.kind != LayerKind::Conv2D)
    throw StructureError("reference kernel handles plain convolutions only");
  if (x.c != conv.in_ch)
    throw DimensionError("input carries " + std::to_string(x.c) +
                         " channels, conv wants " +
                         std::to_string(conv.in_ch));
  const int h = x.h, w = x.w, ic = conv.in_ch, oc = conv.out_ch;
  const int pad_y = (conv.kh - 1) / 2, pad_x = (conv.kw - 1) / 2;

  std::vector<int8_t> qx(x.size());
  for (size_t i = 0; i < x.size(); ++i)
    qx[i] = static_cast<int8_t>(in_q.quantize(x.v[i]));
  std::vector<int8_t> qw(conv.weight.size());
  for (size_t i = 0; i < conv.weight.size(); ++i)
    qw[i] = static_cast<int8_t>(w_q.quantize(conv.weight[i]));
  std::vector<int8_t> qb(oc, static_cast<int8_t>(b_q.zero_point));
  for (size_t f = 0; f < conv.bias.size(); ++f)
    qb[f] = static_cast<int8_t>(b_q.quantize(conv.bias[f]));

  FeatureMap out(x.n, h, w, oc);
  const int32_t zx = in_q.zero_point;
  for (int im = 0; im < x.n; ++im)
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        for (int f = 0; f < oc; ++f) {
          int32_t acc = 0;
          for (int dy = 0; dy < conv.kh; ++dy) {
            const int ry = r + dy - pad_y;
            if (ry < 0 || ry >= h) continue;
            for (int dx = 0; dx < conv.kw; ++dx) {
              const int cx = c + dx - pad_x;
              if (cx < 0 || cx >= w) continue;
              const int8_t* px = qx.data() + x.idx(im, ry, cx, 0);
              const int8_t* wr = qw.data() + conv.widx(f, dy, dx, 0);
              for (int i = 0; i < ic; ++i)
                acc += (static_cast<int32_t>(px[i]) - zx) * wr[i];
            }
          }
          const double real =
              std::ldexp(static_cast<double>(acc),
                         in_q.exponent + w_q.exponent) +
              std::ldexp(static_cast<double>(qb[f] - b_q.zero_point),
                         b_q.exponent);
          out.v[out.idx(im, r, c, f)] = requant(real, out_q);
        }
  return out;
}

}  // namespace hsicomp
