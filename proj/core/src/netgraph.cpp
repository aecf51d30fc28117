#include "hsicomp/netgraph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "engine.hpp"
#include "gemm.hpp"
#include "hsicomp/error.hpp"
#include "hsicomp/rng.hpp"

namespace hsicomp {

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Input: return "input";
    case LayerKind::Conv2D: return "conv2d";
    case LayerKind::TransposedConv2D: return "tconv2d";
    case LayerKind::DepthwiseNorm: return "depthwise_norm";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::ReLU: return "relu";
    case LayerKind::MaxPool2D: return "maxpool2d";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::Concat: return "concat";
    case LayerKind::Softmax: return "softmax";
  }
  return "?";
}

LayerKind kind_from_name(std::string_view name) {
  for (int k = 0; k <= static_cast<int>(LayerKind::Softmax); ++k)
    if (name == kind_name(static_cast<LayerKind>(k)))
      return static_cast<LayerKind>(k);
  throw ParseError("unknown layer kind '" + std::string(name) + "'");
}

bool is_conv_kind(LayerKind k) {
  return k == LayerKind::Conv2D || k == LayerKind::TransposedConv2D;
}

namespace {

int expected_arity(LayerKind k) {
  switch (k) {
    case LayerKind::Input: return 0;
    case LayerKind::Concat: return 2;
    default: return 1;
  }
}

void check_node(const LayerNode& n) {
  if (n.id.empty()) throw StructureError("node with empty id");
  if (static_cast<int>(n.inputs.size()) != expected_arity(n.kind))
    throw StructureError(n.id + ": " + kind_name(n.kind) + " takes " +
                         std::to_string(expected_arity(n.kind)) +
                         " inputs, got " + std::to_string(n.inputs.size()));
  switch (n.kind) {
    case LayerKind::Input:
      if (n.out_ch <= 0)
        throw StructureError(n.id + ": input node needs a band count");
      break;
    case LayerKind::Conv2D:
      if (n.kh <= 0 || n.kw <= 0 || n.kh % 2 == 0 || n.kw % 2 == 0)
        throw StructureError(n.id + ": same-padding conv needs odd kernel, got " +
                             std::to_string(n.kh) + "x" + std::to_string(n.kw));
      [[fallthrough]];
    case LayerKind::TransposedConv2D:
      if (n.kind == LayerKind::TransposedConv2D && (n.kh != 2 || n.kw != 2))
        throw StructureError(n.id + ": transposed conv is fixed at 2x2 stride 2");
      if (n.out_ch <= 0 || n.in_ch <= 0)
        throw StructureError(n.id + ": conv needs positive channel counts");
      if (n.weight.size() != n.weight_count())
        throw StructureError(n.id + ": weight size " +
                             std::to_string(n.weight.size()) + " != " +
                             std::to_string(n.weight_count()));
      if (n.bias.size() != static_cast<size_t>(n.out_ch))
        throw StructureError(n.id + ": bias size " +
                             std::to_string(n.bias.size()) + " != " +
                             std::to_string(n.out_ch));
      break;
    case LayerKind::BatchNorm: {
      const size_t c = static_cast<size_t>(n.out_ch);
      if (n.out_ch <= 0 || n.gamma.size() != c || n.beta.size() != c ||
          n.running_mean.size() != c || n.running_var.size() != c)
        throw StructureError(n.id + ": batchnorm parameter sizes inconsistent");
      break;
    }
    case LayerKind::DepthwiseNorm: {
      const size_t c = static_cast<size_t>(n.out_ch);
      if (n.out_ch <= 0 || n.weight.size() != c || n.bias.size() != c)
        throw StructureError(n.id + ": depthwise parameter sizes inconsistent");
      break;
    }
    case LayerKind::Dropout:
      if (n.dropout_rate < 0.0f || n.dropout_rate >= 1.0f)
        throw StructureError(n.id + ": dropout rate must be in [0, 1)");
      break;
    default:
      break;
  }
}

}  // namespace

LayerNode& NetGraph::add(LayerNode n) {
  check_node(n);
  if (index_.count(n.id)) throw StructureError("duplicate node id " + n.id);
  for (const auto& in : n.inputs)
    if (!index_.count(in))
      throw StructureError(n.id + ": unknown input '" + in + "'");
  index_[n.id] = nodes_.size();
  nodes_.push_back(std::move(n));
  return nodes_.back();
}

bool NetGraph::has(std::string_view id) const {
  return index_.count(std::string(id)) != 0;
}

const LayerNode& NetGraph::node(std::string_view id) const {
  auto it = index_.find(std::string(id));
  if (it == index_.end())
    throw StructureError("no node '" + std::string(id) + "'");
  return nodes_[it->second];
}

LayerNode& NetGraph::node(std::string_view id) {
  auto it = index_.find(std::string(id));
  if (it == index_.end())
    throw StructureError("no node '" + std::string(id) + "'");
  return nodes_[it->second];
}

const std::string& NetGraph::input_id() const {
  for (const auto& n : nodes_)
    if (n.kind == LayerKind::Input) return n.id;
  throw StructureError("graph has no input node");
}

const std::string& NetGraph::output_id() const {
  for (const auto& n : nodes_)
    if (n.kind == LayerKind::Softmax) return n.id;
  throw StructureError("graph has no softmax output");
}

std::vector<std::string> NetGraph::consumers(std::string_view id) const {
  std::vector<std::string> out;
  for (const auto& n : nodes_)
    for (const auto& in : n.inputs)
      if (in == id) out.push_back(n.id);
  return out;
}

int NetGraph::in_bands() const { return node(input_id()).out_ch; }

int NetGraph::class_count() const {
  const LayerNode& sm = node(output_id());
  return node(sm.inputs[0]).out_ch;
}

void NetGraph::validate() const {
  int inputs = 0, softmaxes = 0;
  for (const auto& n : nodes_) {
    check_node(n);
    if (n.kind == LayerKind::Input) ++inputs;
    if (n.kind == LayerKind::Softmax) ++softmaxes;
  }
  if (inputs != 1)
    throw StructureError("graph must have exactly one input node, has " +
                         std::to_string(inputs));
  if (softmaxes != 1)
    throw StructureError("graph must have exactly one softmax node, has " +
                         std::to_string(softmaxes));
  // Every non-output node must be consumed.
  for (const auto& n : nodes_) {
    if (n.kind == LayerKind::Softmax) continue;
    if (consumers(n.id).empty())
      throw StructureError("node " + n.id + " has no consumer");
  }
}

namespace {

void glorot_init(LayerNode& n, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(n.kh) * n.kw * n.in_ch;
  const double fan_out = static_cast<double>(n.kh) * n.kw * n.out_ch;
  const float limit = static_cast<float>(std::sqrt(6.0 / (fan_in + fan_out)));
  n.weight.resize(n.weight_count());
  std::uniform_real_distribution<float> d(-limit, limit);
  for (float& w : n.weight) w = d(rng);
  n.bias.assign(n.out_ch, 0.0f);
}

LayerNode conv_node(const std::string& id, const std::string& in, int in_ch,
                    int out_ch, int k, std::mt19937_64& rng) {
  LayerNode n;
  n.id = id;
  n.kind = LayerKind::Conv2D;
  n.inputs = {in};
  n.in_ch = in_ch;
  n.out_ch = out_ch;
  n.kh = n.kw = k;
  glorot_init(n, rng);
  return n;
}

LayerNode bn_node(const std::string& id, const std::string& in, int ch) {
  LayerNode n;
  n.id = id;
  n.kind = LayerKind::BatchNorm;
  n.inputs = {in};
  n.out_ch = ch;
  n.gamma.assign(ch, 1.0f);
  n.beta.assign(ch, 0.0f);
  n.running_mean.assign(ch, 0.0f);
  n.running_var.assign(ch, 1.0f);
  return n;
}

LayerNode unary_node(const std::string& id, const std::string& in,
                     LayerKind kind) {
  LayerNode n;
  n.id = id;
  n.kind = kind;
  n.inputs = {in};
  return n;
}

// One Conv3x3 + BN + ReLU block; returns the relu id.
std::string add_block(NetGraph& g, int idx, const std::string& in, int in_ch,
                      int out_ch, std::mt19937_64& rng) {
  const std::string c = "cnv_" + std::to_string(idx);
  const std::string b = "bn_" + std::to_string(idx);
  const std::string r = "relu_" + std::to_string(idx);
  g.add(conv_node(c, in, in_ch, out_ch, 3, rng));
  g.add(bn_node(b, c, out_ch));
  g.add(unary_node(r, b, LayerKind::ReLU));
  return r;
}

}  // namespace

NetGraph build_unet(const UnetSpec& spec) {
  if (spec.depth < 1 || spec.init_filters < 1 || spec.in_bands < 1 ||
      spec.classes < 1)
    throw StructureError("invalid unet spec");
  NetGraph g;
  LayerNode input;
  input.id = "input";
  input.kind = LayerKind::Input;
  input.out_ch = spec.in_bands;
  g.add(std::move(input));

  const int d = spec.depth;
  const int F = spec.init_filters;
  std::mt19937_64 rng = make_rng(spec.seed, 0);
  int conv_idx = 0;

  std::vector<std::string> skips(d);  // per-level second relu
  std::string cur = "input";
  int cur_ch = spec.in_bands;

  for (int level = 0; level < d; ++level) {
    if (level > 0) {
      const std::string p = "pool_" + std::to_string(level);
      g.add(unary_node(p, cur, LayerKind::MaxPool2D));
      cur = p;
    }
    const int ch = F << level;
    cur = add_block(g, conv_idx++, cur, cur_ch, ch, rng);
    cur = add_block(g, conv_idx++, cur, ch, ch, rng);
    skips[level] = cur;
    LayerNode drop = unary_node("drop_" + std::to_string(level), cur,
                                LayerKind::Dropout);
    drop.dropout_rate = spec.dropout;
    g.add(std::move(drop));
    cur = "drop_" + std::to_string(level);
    cur_ch = ch;
  }

  {
    const std::string p = "pool_" + std::to_string(d);
    g.add(unary_node(p, cur, LayerKind::MaxPool2D));
    const int ch = F << d;
    cur = add_block(g, conv_idx++, p, cur_ch, ch, rng);
    cur = add_block(g, conv_idx++, cur, ch, ch, rng);
    cur_ch = ch;
  }

  for (int t = 0; t < d; ++t) {
    const int level = d - 1 - t;
    const int ch = F << level;
    LayerNode up;
    up.id = "cnv_tr_" + std::to_string(t);
    up.kind = LayerKind::TransposedConv2D;
    up.inputs = {cur};
    up.in_ch = cur_ch;
    up.out_ch = ch;
    up.kh = up.kw = 2;
    glorot_init(up, rng);
    g.add(std::move(up));

    const std::string cc_id = "concat_" + std::to_string(t);
    LayerNode cc;
    cc.id = cc_id;
    cc.kind = LayerKind::Concat;
    cc.inputs = {"cnv_tr_" + std::to_string(t), skips[level]};
    g.add(std::move(cc));

    cur = add_block(g, conv_idx++, cc_id, 2 * ch, ch, rng);
    cur = add_block(g, conv_idx++, cur, ch, ch, rng);
    cur_ch = ch;
  }

  g.add(conv_node("cnv_out", cur, cur_ch, spec.classes, 1, rng));
  g.add(unary_node("softmax", "cnv_out", LayerKind::Softmax));
  g.validate();
  return g;
}

NetGraph build_unet(int depth, int init_filters, int in_bands, int classes) {
  UnetSpec s;
  s.depth = depth;
  s.init_filters = init_filters;
  s.in_bands = in_bands;
  s.classes = classes;
  return build_unet(s);
}

std::vector<float> NormalizationParams::weights() const {
  std::vector<float> w(min.size());
  for (size_t b = 0; b < min.size(); ++b) {
    if (!(max[b] > min[b]))
      throw CalibrationError("degenerate band " + std::to_string(b) +
                             " in normalization params");
    w[b] = 2.0f / (max[b] - min[b]);
  }
  return w;
}

std::vector<float> NormalizationParams::biases() const {
  std::vector<float> bs(min.size());
  for (size_t b = 0; b < min.size(); ++b) {
    if (!(max[b] > min[b]))
      throw CalibrationError("degenerate band " + std::to_string(b) +
                             " in normalization params");
    bs[b] = 2.0f * min[b] / (min[b] - max[b]) - 1.0f;
  }
  return bs;
}

NetGraph fuse_symmetric_norm(const NetGraph& g, const NormalizationParams& p) {
  for (const auto& n : g.nodes())
    if (n.kind == LayerKind::DepthwiseNorm)
      throw StructureError("graph already carries a fused normalization (" +
                           n.id + ")");
  if (p.min.size() != static_cast<size_t>(g.in_bands()))
    throw DimensionError("normalization params cover " +
                         std::to_string(p.min.size()) + " bands, graph takes " +
                         std::to_string(g.in_bands()));
  const std::string in_id = g.input_id();
  NetGraph out;
  bool inserted = false;
  for (const auto& n : g.nodes()) {
    LayerNode copy = n;
    if (!inserted && n.kind != LayerKind::Input) {
      LayerNode norm;
      norm.id = "norm";
      norm.kind = LayerKind::DepthwiseNorm;
      norm.inputs = {in_id};
      norm.out_ch = g.in_bands();
      norm.weight = p.weights();
      norm.bias = p.biases();
      out.add(std::move(norm));
      inserted = true;
    }
    for (auto& in : copy.inputs)
      if (in == in_id) in = "norm";
    out.add(std::move(copy));
  }
  out.validate();
  return out;
}

// ---- forward execution ----

namespace engine {

Shape3 node_out_shape(const LayerNode& n, const std::vector<Shape3>& ins) {
  switch (n.kind) {
    case LayerKind::Input:
      throw StructureError("input node has no computed shape");
    case LayerKind::Conv2D:
      if (ins[0].c != n.in_ch)
        throw DimensionError(n.id + ": expects " + std::to_string(n.in_ch) +
                             " channels, got " + std::to_string(ins[0].c));
      return {ins[0].h, ins[0].w, n.out_ch};
    case LayerKind::TransposedConv2D:
      if (ins[0].c != n.in_ch)
        throw DimensionError(n.id + ": expects " + std::to_string(n.in_ch) +
                             " channels, got " + std::to_string(ins[0].c));
      return {2 * ins[0].h, 2 * ins[0].w, n.out_ch};
    case LayerKind::DepthwiseNorm:
    case LayerKind::BatchNorm:
      if (ins[0].c != n.out_ch)
        throw DimensionError(n.id + ": expects " + std::to_string(n.out_ch) +
                             " channels, got " + std::to_string(ins[0].c));
      return ins[0];
    case LayerKind::ReLU:
    case LayerKind::Dropout:
    case LayerKind::Softmax:
      return ins[0];
    case LayerKind::MaxPool2D:
      if (ins[0].h % 2 || ins[0].w % 2)
        throw DimensionError(n.id + ": pooling odd dims " +
                             std::to_string(ins[0].h) + "x" +
                             std::to_string(ins[0].w));
      return {ins[0].h / 2, ins[0].w / 2, ins[0].c};
    case LayerKind::Concat:
      if (ins[0].h != ins[1].h || ins[0].w != ins[1].w)
        throw DimensionError(n.id + ": concat spatial mismatch");
      return {ins[0].h, ins[0].w, ins[0].c + ins[1].c};
  }
  throw StructureError(n.id + ": unknown kind");
}

namespace {

// col[(r*w + c)][(dy*kw + dx)*ic + i] = in(r+dy-pad, c+dx-pad, i), zeros
// outside.
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

}  // namespace

void conv2d_forward(const LayerNode& n, const FeatureMap& in,
                    FeatureMap& out) {
  const int h = in.h, w = in.w, ic = n.in_ch, oc = n.out_ch;
  const size_t hw = static_cast<size_t>(h) * w;
  const size_t krow = static_cast<size_t>(n.kh) * n.kw * ic;
  const bool is_1x1 = n.kh == 1 && n.kw == 1;
  std::vector<float> col;
  if (!is_1x1) col.resize(hw * krow);
  for (int im = 0; im < in.n; ++im) {
    const float* src = in.v.data() + im * hw * ic;
    float* dst = out.v.data() + im * hw * oc;
    const float* a = src;
    if (!is_1x1) {
      im2col(src, h, w, ic, n.kh, n.kw, col.data());
      a = col.data();
    }
    gemm_nt(static_cast<int>(hw), oc, static_cast<int>(krow), a,
            n.weight.data(), dst);
    for (size_t p = 0; p < hw; ++p) {
      float* o = dst + p * oc;
      for (int f = 0; f < oc; ++f) o[f] += n.bias[f];
    }
  }
}

void tconv_forward(const LayerNode& n, const FeatureMap& in, FeatureMap& out) {
  const int h = in.h, w = in.w, ic = n.in_ch, oc = n.out_ch;
  const size_t hw = static_cast<size_t>(h) * w;
  const int oh = 2 * h, ow = 2 * w;
  std::vector<float> wslice(static_cast<size_t>(oc) * ic);
  std::vector<float> tmp(hw * oc);
  for (int im = 0; im < in.n; ++im) {
    const float* src = in.v.data() + im * hw * ic;
    float* dst = out.v.data() + static_cast<size_t>(im) * oh * ow * oc;
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) {
        for (int f = 0; f < oc; ++f)
          std::memcpy(wslice.data() + static_cast<size_t>(f) * ic,
                      n.weight.data() + n.widx(f, a, b, 0),
                      sizeof(float) * ic);
        gemm_nt(static_cast<int>(hw), oc, ic, src, wslice.data(), tmp.data());
        for (int r = 0; r < h; ++r)
          for (int c = 0; c < w; ++c) {
            const float* t = tmp.data() + (static_cast<size_t>(r) * w + c) * oc;
            float* o = dst + ((static_cast<size_t>(2 * r + a)) * ow +
                              (2 * c + b)) * oc;
            for (int f = 0; f < oc; ++f) o[f] = t[f] + n.bias[f];
          }
      }
    }
  }
}

void depthwise_forward(const LayerNode& n, const FeatureMap& in,
                       FeatureMap& out) {
  const int c = n.out_ch;
  const size_t rows = in.size() / c;
  for (size_t p = 0; p < rows; ++p) {
    const float* src = in.v.data() + p * c;
    float* dst = out.v.data() + p * c;
    for (int i = 0; i < c; ++i) dst[i] = n.weight[i] * src[i] + n.bias[i];
  }
}

void bn_forward_inference(const LayerNode& n, const FeatureMap& in,
                          FeatureMap& out) {
  const int c = n.out_ch;
  std::vector<float> a(c), b(c);
  for (int i = 0; i < c; ++i) {
    a[i] = n.gamma[i] / std::sqrt(n.running_var[i] + n.eps);
    b[i] = n.beta[i] - n.running_mean[i] * a[i];
  }
  const size_t rows = in.size() / c;
  for (size_t p = 0; p < rows; ++p) {
    const float* src = in.v.data() + p * c;
    float* dst = out.v.data() + p * c;
    for (int i = 0; i < c; ++i) dst[i] = a[i] * src[i] + b[i];
  }
}

void bn_forward_training(LayerNode& n, const FeatureMap& in, FeatureMap& out,
                         float momentum, NodeCache& cache) {
  const int c = n.out_ch;
  const size_t rows = in.size() / c;
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  for (size_t p = 0; p < rows; ++p) {
    const float* src = in.v.data() + p * c;
    for (int i = 0; i < c; ++i) mean[i] += src[i];
  }
  for (int i = 0; i < c; ++i) mean[i] /= static_cast<double>(rows);
  for (size_t p = 0; p < rows; ++p) {
    const float* src = in.v.data() + p * c;
    for (int i = 0; i < c; ++i) {
      const double d = src[i] - mean[i];
      var[i] += d * d;
    }
  }
  for (int i = 0; i < c; ++i) var[i] /= static_cast<double>(rows);

  cache.bn_istd.resize(c);
  cache.bn_xhat.resize(in.size());
  std::vector<float> fmean(c);
  for (int i = 0; i < c; ++i) {
    cache.bn_istd[i] =
        static_cast<float>(1.0 / std::sqrt(var[i] + n.eps));
    fmean[i] = static_cast<float>(mean[i]);
  }
  for (size_t p = 0; p < rows; ++p) {
    const float* src = in.v.data() + p * c;
    float* xh = cache.bn_xhat.data() + p * c;
    float* dst = out.v.data() + p * c;
    for (int i = 0; i < c; ++i) {
      xh[i] = (src[i] - fmean[i]) * cache.bn_istd[i];
      dst[i] = n.gamma[i] * xh[i] + n.beta[i];
    }
  }
  // Running stats keep the unbiased variance, matching common framework
  // conventions.
  const double unbias =
      rows > 1 ? static_cast<double>(rows) / (rows - 1) : 1.0;
  for (int i = 0; i < c; ++i) {
    n.running_mean[i] = static_cast<float>((1.0 - momentum) * n.running_mean[i] +
                                           momentum * mean[i]);
    n.running_var[i] = static_cast<float>((1.0 - momentum) * n.running_var[i] +
                                          momentum * var[i] * unbias);
  }
}

void relu_forward(const FeatureMap& in, FeatureMap& out) {
  for (size_t i = 0; i < in.size(); ++i)
    out.v[i] = in.v[i] > 0.0f ? in.v[i] : 0.0f;
}

void maxpool_forward(const FeatureMap& in, FeatureMap& out,
                     std::vector<uint8_t>* argmax) {
  const int c = in.c, oh = in.h / 2, ow = in.w / 2;
  if (argmax) argmax->assign(out.size(), 0);
  for (int im = 0; im < in.n; ++im)
    for (int r = 0; r < oh; ++r)
      for (int col = 0; col < ow; ++col) {
        const size_t o = out.idx(im, r, col, 0);
        for (int i = 0; i < c; ++i) {
          float best = in.v[in.idx(im, 2 * r, 2 * col, i)];
          uint8_t best_q = 0;
          for (uint8_t q = 1; q < 4; ++q) {
            const float v =
                in.v[in.idx(im, 2 * r + (q >> 1), 2 * col + (q & 1), i)];
            if (v > best) {
              best = v;
              best_q = q;
            }
          }
          out.v[o + i] = best;
          if (argmax) (*argmax)[o + i] = best_q;
        }
      }
}

void dropout_forward_training(const LayerNode& n, const FeatureMap& in,
                              FeatureMap& out, std::mt19937_64& rng,
                              std::vector<uint8_t>& mask) {
  mask.assign(in.size(), 1);
  if (n.dropout_rate <= 0.0f) {
    out.v = in.v;
    return;
  }
  const float keep = 1.0f - n.dropout_rate;
  const float inv = 1.0f / keep;
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  for (size_t i = 0; i < in.size(); ++i) {
    if (d(rng) < n.dropout_rate) {
      mask[i] = 0;
      out.v[i] = 0.0f;
    } else {
      out.v[i] = in.v[i] * inv;
    }
  }
}

void concat_forward(const FeatureMap& a, const FeatureMap& b,
                    FeatureMap& out) {
  const size_t rows = static_cast<size_t>(a.n) * a.h * a.w;
  for (size_t p = 0; p < rows; ++p) {
    std::memcpy(out.v.data() + p * out.c, a.v.data() + p * a.c,
                sizeof(float) * a.c);
    std::memcpy(out.v.data() + p * out.c + a.c, b.v.data() + p * b.c,
                sizeof(float) * b.c);
  }
}

void softmax_forward(const FeatureMap& in, FeatureMap& out) {
  const int c = in.c;
  const size_t rows = in.size() / c;
  for (size_t p = 0; p < rows; ++p) {
    const float* src = in.v.data() + p * c;
    float* dst = out.v.data() + p * c;
    float m = src[0];
    for (int i = 1; i < c; ++i) m = std::max(m, src[i]);
    float sum = 0.0f;
    for (int i = 0; i < c; ++i) {
      dst[i] = std::exp(src[i] - m);
      sum += dst[i];
    }
    const float inv = 1.0f / sum;
    for (int i = 0; i < c; ++i) dst[i] *= inv;
  }
}

namespace {

// Inference-mode node dispatch (training-mode handled by forward_training).
void exec_inference(const NetGraph& g, const LayerNode& n,
                    const std::vector<const FeatureMap*>& ins,
                    FeatureMap& out) {
  (void)g;
  switch (n.kind) {
    case LayerKind::Conv2D: conv2d_forward(n, *ins[0], out); break;
    case LayerKind::TransposedConv2D: tconv_forward(n, *ins[0], out); break;
    case LayerKind::DepthwiseNorm: depthwise_forward(n, *ins[0], out); break;
    case LayerKind::BatchNorm: bn_forward_inference(n, *ins[0], out); break;
    case LayerKind::ReLU: relu_forward(*ins[0], out); break;
    case LayerKind::MaxPool2D: maxpool_forward(*ins[0], out, nullptr); break;
    case LayerKind::Dropout: out.v = ins[0]->v; break;
    case LayerKind::Concat: concat_forward(*ins[0], *ins[1], out); break;
    case LayerKind::Softmax: softmax_forward(*ins[0], out); break;
    case LayerKind::Input: break;
  }
}

}  // namespace

void forward_training(NetGraph& g, const FeatureMap& x, ExecState& st,
                      std::unordered_map<std::string, NodeCache>& caches) {
  g.validate();
  const LayerNode& in_node = g.node(g.input_id());
  if (x.c != in_node.out_ch)
    throw DimensionError("input has " + std::to_string(x.c) +
                         " bands, graph takes " +
                         std::to_string(in_node.out_ch));
  caches.clear();
  caches[in_node.id].out = x;
  for (auto& n : g.nodes()) {
    if (n.kind == LayerKind::Input) continue;
    std::vector<const FeatureMap*> ins;
    std::vector<Shape3> shapes;
    for (const auto& id : n.inputs) {
      const FeatureMap& f = caches.at(id).out;
      ins.push_back(&f);
      shapes.push_back({f.h, f.w, f.c});
    }
    Shape3 os = node_out_shape(n, shapes);
    NodeCache& cache = caches[n.id];
    cache.out = FeatureMap(x.n, os.h, os.w, os.c);
    switch (n.kind) {
      case LayerKind::BatchNorm:
        bn_forward_training(n, *ins[0], cache.out, st.bn_momentum, cache);
        break;
      case LayerKind::MaxPool2D:
        maxpool_forward(*ins[0], cache.out, &cache.pool_argmax);
        break;
      case LayerKind::Dropout:
        dropout_forward_training(n, *ins[0], cache.out, st.rng,
                                 cache.drop_mask);
        break;
      default:
        exec_inference(g, n, ins, cache.out);
        break;
    }
  }
}

}  // namespace engine

FeatureMap tensor_to_features(const Tensor& bip_cube) {
  if (bip_cube.layout() != Layout::BIP)
    throw DimensionError("network input must be BIP");
  FeatureMap f(1, bip_cube.height(), bip_cube.width(), bip_cube.bands());
  auto src = bip_cube.f32();
  std::copy(src.begin(), src.end(), f.v.begin());
  return f;
}

Tensor features_to_tensor(const FeatureMap& f) {
  if (f.n != 1)
    throw DimensionError("cannot export a batch of " + std::to_string(f.n) +
                         " as one cube");
  Tensor t(f.h, f.w, f.c, Layout::BIP, Dtype::F32);
  std::copy(f.v.begin(), f.v.end(), t.f32().begin());
  return t;
}

FeatureMap forward_features(const NetGraph& g, const FeatureMap& x) {
  const LayerNode& in_node = g.node(g.input_id());
  if (x.c != in_node.out_ch)
    throw DimensionError("input has " + std::to_string(x.c) +
                         " bands, graph takes " +
                         std::to_string(in_node.out_ch));

  // Free each activation after its last consumer to bound memory.
  std::unordered_map<std::string, int> pending;
  for (const auto& n : g.nodes())
    for (const auto& in : n.inputs) ++pending[in];

  std::unordered_map<std::string, FeatureMap> acts;
  acts[in_node.id] = x;
  const std::string out_id = g.output_id();
  pending[out_id] = 1;

  FeatureMap result;
  for (const auto& n : g.nodes()) {
    if (n.kind == LayerKind::Input) continue;
    std::vector<const FeatureMap*> ins;
    std::vector<engine::Shape3> shapes;
    for (const auto& id : n.inputs) {
      auto it = acts.find(id);
      if (it == acts.end())
        throw StructureError(n.id + ": input '" + id +
                             "' not yet computed (graph order broken)");
      ins.push_back(&it->second);
      shapes.push_back({it->second.h, it->second.w, it->second.c});
    }
    engine::Shape3 os = engine::node_out_shape(n, shapes);
    FeatureMap out(x.n, os.h, os.w, os.c);
    engine::exec_inference(g, n, ins, out);
    acts[n.id] = std::move(out);
    for (const auto& id : n.inputs)
      if (--pending[id] == 0) acts.erase(id);
    if (n.id == out_id) result = std::move(acts[n.id]);
  }
  return result;
}

Tensor forward(const NetGraph& g, const Tensor& bip_cube) {
  return features_to_tensor(forward_features(g, tensor_to_features(bip_cube)));
}

LabelMap predict(const NetGraph& g, const Tensor& bip_cube) {
  FeatureMap probs = forward_features(g, tensor_to_features(bip_cube));
  LabelMap out(probs.h, probs.w);
  for (int r = 0; r < probs.h; ++r)
    for (int c = 0; c < probs.w; ++c) {
      const float* p = probs.v.data() + probs.idx(0, r, c, 0);
      int best = 0;
      for (int i = 1; i < probs.c; ++i)
        if (p[i] > p[best]) best = i;
      out.at(r, c) = static_cast<uint8_t>(best);
    }
  return out;
}

}  // namespace hsicomp
