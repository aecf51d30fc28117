#include "hsicomp/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "hsicomp/error.hpp"
#include "hsicomp/kvfile.hpp"
#include "hsicomp/tensor_io.hpp"

namespace hsicomp {

namespace {

void require_layout(const Tensor& t, Layout l, const char* op) {
  if (t.layout() != l)
    throw DimensionError(std::string(op) + " expects " + layout_name(l) +
                         " input, got " + layout_name(t.layout()));
}

std::vector<float> to_floats(const std::vector<double>& v) {
  std::vector<float> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
  return out;
}

std::vector<double> to_doubles(const std::vector<float>& v) {
  std::vector<double> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = v[i];
  return out;
}

}  // namespace

ChannelStats ChannelStats::load(const std::string& path) {
  KvFile kv = KvFile::load(path);
  kv.require_known({"th", "min", "max"});
  ChannelStats s;
  s.th = to_floats(kv.get_doubles("th"));
  s.min = to_floats(kv.get_doubles("min"));
  s.max = to_floats(kv.get_doubles("max"));
  if (s.th.size() != s.min.size() || s.th.size() != s.max.size())
    throw ParseError(path + ": th/min/max lengths differ");
  return s;
}

void ChannelStats::save(const std::string& path) const {
  KvFile kv;
  kv.set_doubles("th", to_doubles(th));
  kv.set_doubles("min", to_doubles(min));
  kv.set_doubles("max", to_doubles(max));
  kv.save(path);
}

PreprocessConfig PreprocessConfig::load(const std::string& path) {
  KvFile kv = KvFile::load(path);
  kv.require_known({"crop_top", "crop_left", "active_height", "active_width",
                    "bit_depth", "coverage", "ref_tile_row", "ref_tile_col",
                    "depth", "align"});
  PreprocessConfig c;
  c.crop_top = static_cast<int>(kv.has("crop_top") ? kv.get_int("crop_top") : c.crop_top);
  c.crop_left = static_cast<int>(kv.has("crop_left") ? kv.get_int("crop_left") : c.crop_left);
  c.active_height = static_cast<int>(kv.has("active_height") ? kv.get_int("active_height") : c.active_height);
  c.active_width = static_cast<int>(kv.has("active_width") ? kv.get_int("active_width") : c.active_width);
  c.bit_depth = static_cast<int>(kv.has("bit_depth") ? kv.get_int("bit_depth") : c.bit_depth);
  c.coverage = kv.has("coverage") ? kv.get_double("coverage") : c.coverage;
  c.ref_tile_row = static_cast<int>(kv.has("ref_tile_row") ? kv.get_int("ref_tile_row") : c.ref_tile_row);
  c.ref_tile_col = static_cast<int>(kv.has("ref_tile_col") ? kv.get_int("ref_tile_col") : c.ref_tile_col);
  c.depth = static_cast<int>(kv.has("depth") ? kv.get_int("depth") : c.depth);
  c.align = kv.has("align") ? kv.get_int("align") != 0 : c.align;
  return c;
}

void PreprocessConfig::save(const std::string& path) const {
  KvFile kv;
  kv.set_int("crop_top", crop_top);
  kv.set_int("crop_left", crop_left);
  kv.set_int("active_height", active_height);
  kv.set_int("active_width", active_width);
  kv.set_int("bit_depth", bit_depth);
  kv.set_double("coverage", coverage);
  kv.set_int("ref_tile_row", ref_tile_row);
  kv.set_int("ref_tile_col", ref_tile_col);
  kv.set_int("depth", depth);
  kv.set_int("align", align ? 1 : 0);
  kv.save(path);
}

RawFrame crop_and_clip(const RawFrame& raw, const PreprocessConfig& cfg) {
  const MosaicGeometry geom = cfg.geometry();
  if (cfg.active_height % geom.tile || cfg.active_width % geom.tile)
    throw DimensionError("active area " + std::to_string(cfg.active_height) +
                         "x" + std::to_string(cfg.active_width) +
                         " is not a multiple of the " +
                         std::to_string(geom.tile) + "-pixel tile");
  if (cfg.crop_top < 0 || cfg.crop_left < 0 ||
      cfg.crop_top + cfg.active_height > raw.height ||
      cfg.crop_left + cfg.active_width > raw.width)
    throw DimensionError("frame " + std::to_string(raw.height) + "x" +
                         std::to_string(raw.width) +
                         " smaller than crop window");
  RawFrame out(cfg.active_height, cfg.active_width, cfg.bit_depth);
  const uint16_t ceil_v =
      static_cast<uint16_t>((1u << cfg.bit_depth) - 1u);
  for (int r = 0; r < out.height; ++r)
    for (int c = 0; c < out.width; ++c)
      out.at(r, c) =
          std::min(raw.at(cfg.crop_top + r, cfg.crop_left + c), ceil_v);
  return out;
}

Plane reflectance_correct(const RawFrame& raw, const CalibrationPair& calib) {
  if (calib.dark.height != raw.height || calib.dark.width != raw.width ||
      calib.flat.height != raw.height || calib.flat.width != raw.width)
    throw DimensionError("calibration planes do not match the frame shape");
  Plane out(raw.height, raw.width);
  for (int r = 0; r < raw.height; ++r) {
    for (int c = 0; c < raw.width; ++c) {
      const float d = calib.dark.at(r, c);
      const float f = calib.flat.at(r, c);
      const float denom = f - d;
      if (denom < 1e-6f)
        throw CalibrationError("flat - dark = " + std::to_string(denom) +
                               " at pixel (" + std::to_string(r) + "," +
                               std::to_string(c) + ")");
      float v = (static_cast<float>(raw.at(r, c)) - d) / denom;
      out.at(r, c) = std::clamp(v, 0.0f, 1.0f);
    }
  }
  return out;
}

Plane plane_crop(const Plane& p, int top, int left, int out_h, int out_w) {
  if (top < 0 || left < 0 || top + out_h > p.height || left + out_w > p.width)
    throw DimensionError("plane crop window exceeds " +
                         std::to_string(p.height) + "x" +
                         std::to_string(p.width));
  Plane out(out_h, out_w);
  for (int r = 0; r < out_h; ++r)
    std::copy_n(p.data.data() + static_cast<size_t>(top + r) * p.width + left,
                out_w, out.data.data() + static_cast<size_t>(r) * out_w);
  return out;
}

Tensor demosaic(const Plane& frame, const MosaicGeometry& geom) {
  if (frame.height % geom.tile || frame.width % geom.tile)
    throw DimensionError("frame " + std::to_string(frame.height) + "x" +
                         std::to_string(frame.width) +
                         " not divisible by tile " + std::to_string(geom.tile));
  const int ch = frame.height / geom.tile;
  const int cw = frame.width / geom.tile;
  Tensor cube(ch, cw, geom.bands(), Layout::BSQ, Dtype::F32);
  auto out = cube.f32();
  for (int b = 0; b < geom.bands(); ++b) {
    const int i = geom.offset_i(b);
    const int j = geom.offset_j(b);
    float* dst = out.data() + cube.offset(0, 0, b);
    for (int r = 0; r < ch; ++r)
      for (int c = 0; c < cw; ++c)
        dst[static_cast<size_t>(r) * cw + c] =
            frame.at(geom.tile * r + i, geom.tile * c + j);
  }
  return cube;
}

namespace {

// Bilinear sample of one band plane with clamp-to-edge.
float sample_bilinear(const float* plane, int h, int w, float y, float x) {
  float fy = std::floor(y), fx = std::floor(x);
  int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
  float ay = y - fy, ax = x - fx;
  auto cl = [](int v, int hi) { return v < 0 ? 0 : (v >= hi ? hi - 1 : v); };
  const int y0c = cl(y0, h), y1c = cl(y0 + 1, h);
  const int x0c = cl(x0, w), x1c = cl(x0 + 1, w);
  const float v00 = plane[static_cast<size_t>(y0c) * w + x0c];
  const float v01 = plane[static_cast<size_t>(y0c) * w + x1c];
  const float v10 = plane[static_cast<size_t>(y1c) * w + x0c];
  const float v11 = plane[static_cast<size_t>(y1c) * w + x1c];
  const float top = v00 + ax * (v01 - v00);
  const float bot = v10 + ax * (v11 - v10);
  return top + ay * (bot - top);
}

}  // namespace

Tensor align_bands(const Tensor& cube, const MosaicGeometry& geom) {
  require_layout(cube, Layout::BSQ, "align_bands");
  if (cube.bands() != geom.bands())
    throw DimensionError("cube has " + std::to_string(cube.bands()) +
                         " bands, geometry expects " +
                         std::to_string(geom.bands()));
  const int h = cube.height(), w = cube.width();
  Tensor out(h, w, cube.bands(), Layout::BSQ, Dtype::F32);
  auto src = cube.f32();
  auto dst = out.f32();
  for (int b = 0; b < cube.bands(); ++b) {
    const float dr =
        static_cast<float>(geom.ref_i - geom.offset_i(b)) / geom.tile;
    const float dc =
        static_cast<float>(geom.ref_j - geom.offset_j(b)) / geom.tile;
    const float* in_plane = src.data() + cube.offset(0, 0, b);
    float* out_plane = dst.data() + out.offset(0, 0, b);
    if (dr == 0.0f && dc == 0.0f) {
      std::copy_n(in_plane, static_cast<size_t>(h) * w, out_plane);
      continue;
    }
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        out_plane[static_cast<size_t>(r) * w + c] =
            sample_bilinear(in_plane, h, w, r + dr, c + dc);
  }
  return out;
}

Tensor crop_to_multiple(const Tensor& cube, int depth) {
  require_layout(cube, Layout::BSQ, "crop_to_multiple");
  const int unit = 1 << depth;
  const int oh = cube.height() / unit * unit;
  const int ow = cube.width() / unit * unit;
  if (oh == 0 || ow == 0)
    throw DimensionError("cube " + std::to_string(cube.height()) + "x" +
                         std::to_string(cube.width()) +
                         " smaller than one multiple of " +
                         std::to_string(unit));
  const int top = (cube.height() - oh) / 2;
  const int left = (cube.width() - ow) / 2;
  return crop(cube, top, left, oh, ow);
}

Tensor pixel_normalize(const Tensor& cube) {
  require_layout(cube, Layout::BIP, "pixel_normalize");
  Tensor out(cube.height(), cube.width(), cube.bands(), Layout::BIP,
             Dtype::F32);
  auto src = cube.f32();
  auto dst = out.f32();
  const int bands = cube.bands();
  const size_t pixels = static_cast<size_t>(cube.height()) * cube.width();
  for (size_t p = 0; p < pixels; ++p) {
    const float* in = src.data() + p * bands;
    float* o = dst.data() + p * bands;
    double sum = 0.0;
    for (int b = 0; b < bands; ++b) sum += in[b];
    if (sum == 0.0) {
      std::fill_n(o, bands, 0.0f);
    } else {
      for (int b = 0; b < bands; ++b)
        o[b] = static_cast<float>(in[b] / sum);
    }
  }
  return out;
}

ChannelStats compute_clip_thresholds(std::span<const Tensor> cubes,
                                     double coverage) {
  if (cubes.empty())
    throw CalibrationError("clip-threshold estimation needs at least 1 cube");
  if (!(coverage > 0.0 && coverage <= 1.0))
    throw CalibrationError("coverage must be in (0, 1], got " +
                           format_double(coverage));
  const int bands = cubes[0].bands();
  ChannelStats stats;
  stats.th.resize(bands);
  stats.min.resize(bands);
  stats.max.resize(bands);

  std::vector<float> pool;
  for (int b = 0; b < bands; ++b) {
    pool.clear();
    for (const Tensor& t : cubes) {
      require_layout(t, Layout::BIP, "compute_clip_thresholds");
      if (t.bands() != bands)
        throw DimensionError("cube band counts differ: " +
                             std::to_string(t.bands()) + " vs " +
                             std::to_string(bands));
      auto v = t.f32();
      const size_t pixels = static_cast<size_t>(t.height()) * t.width();
      pool.reserve(pool.size() + pixels);
      for (size_t p = 0; p < pixels; ++p) pool.push_back(v[p * bands + b]);
    }
    std::sort(pool.begin(), pool.end());
    // Ceil-rank empirical quantile: the smallest value covering `coverage`
    // of the mass.
    const size_t n = pool.size();
    size_t rank = static_cast<size_t>(std::ceil(coverage * n));
    if (rank == 0) rank = 1;
    if (rank > n) rank = n;
    stats.th[b] = pool[rank - 1];
    stats.min[b] = pool.front();
    stats.max[b] = stats.th[b];
  }
  return stats;
}

Tensor clip_channels(const Tensor& cube, const ChannelStats& stats) {
  require_layout(cube, Layout::BIP, "clip_channels");
  if (static_cast<int>(stats.th.size()) != cube.bands())
    throw DimensionError("stats cover " + std::to_string(stats.th.size()) +
                         " bands, cube has " + std::to_string(cube.bands()));
  Tensor out(cube.height(), cube.width(), cube.bands(), Layout::BIP,
             Dtype::F32);
  auto src = cube.f32();
  auto dst = out.f32();
  const int bands = cube.bands();
  const size_t pixels = static_cast<size_t>(cube.height()) * cube.width();
  for (size_t p = 0; p < pixels; ++p)
    for (int b = 0; b < bands; ++b) {
      const float v = src[p * bands + b];
      dst[p * bands + b] = std::min(v, stats.th[b]);
    }
  return out;
}

Tensor symmetric_normalize(const Tensor& cube, const ChannelStats& stats) {
  require_layout(cube, Layout::BIP, "symmetric_normalize");
  if (static_cast<int>(stats.min.size()) != cube.bands())
    throw DimensionError("stats cover " + std::to_string(stats.min.size()) +
                         " bands, cube has " + std::to_string(cube.bands()));
  const int bands = cube.bands();
  for (int b = 0; b < bands; ++b)
    if (!(stats.max[b] > stats.min[b]))
      throw CalibrationError("degenerate band " + std::to_string(b) +
                             ": min = max = " + std::to_string(stats.min[b]));
  Tensor out(cube.height(), cube.width(), bands, Layout::BIP, Dtype::F32);
  auto src = cube.f32();
  auto dst = out.f32();
  const size_t pixels = static_cast<size_t>(cube.height()) * cube.width();
  for (size_t p = 0; p < pixels; ++p)
    for (int b = 0; b < bands; ++b) {
      const float mn = stats.min[b], mx = stats.max[b];
      dst[p * bands + b] = 2.0f * (src[p * bands + b] - mn) / (mx - mn) - 1.0f;
    }
  return out;
}

Tensor run_preprocess(const RawFrame& raw, const CalibrationPair& calib,
                      const ChannelStats& stats, const PreprocessConfig& cfg,
                      bool apply_symmetric_norm) {
  RawFrame active = crop_and_clip(raw, cfg);
  CalibrationPair cropped{
      plane_crop(calib.dark, cfg.crop_top, cfg.crop_left, cfg.active_height,
                 cfg.active_width),
      plane_crop(calib.flat, cfg.crop_top, cfg.crop_left, cfg.active_height,
                 cfg.active_width)};
  Plane refl = reflectance_correct(active, cropped);
  Tensor cube = demosaic(refl, cfg.geometry());
  if (cfg.align) cube = align_bands(cube, cfg.geometry());
  cube = crop_to_multiple(cube, cfg.depth);
  cube = convert_layout(cube, Layout::BIP);
  cube = pixel_normalize(cube);
  cube = clip_channels(cube, stats);
  if (apply_symmetric_norm) cube = symmetric_normalize(cube, stats);
  return cube;
}

void write_hsrw(const std::string& path, const RawFrame& frame) {
  io::Writer w(path);
  w.magic("HSRW");
  w.u32(static_cast<uint32_t>(frame.height));
  w.u32(static_cast<uint32_t>(frame.width));
  w.u8(static_cast<uint8_t>(Dtype::U16));
  w.pad_to(16);
  w.bytes(frame.data.data(), frame.data.size() * sizeof(uint16_t));
  w.close();
}

void write_hsrw(const std::string& path, const Plane& plane) {
  io::Writer w(path);
  w.magic("HSRW");
  w.u32(static_cast<uint32_t>(plane.height));
  w.u32(static_cast<uint32_t>(plane.width));
  w.u8(static_cast<uint8_t>(Dtype::F32));
  w.pad_to(16);
  w.bytes(plane.data.data(), plane.data.size() * sizeof(float));
  w.close();
}

namespace {

struct HsrwHeader {
  uint32_t h, w;
  uint8_t dtype;
};

HsrwHeader read_hsrw_header(io::Reader& r) {
  r.expect_magic("HSRW");
  HsrwHeader hd;
  hd.h = r.u32("height");
  hd.w = r.u32("width");
  hd.dtype = r.u8("dtype tag");
  uint8_t pad[3];
  r.bytes(pad, 3, "header padding");
  constexpr uint32_t kDimCap = 1u << 20;
  if (hd.h == 0 || hd.w == 0 || hd.h > kDimCap || hd.w > kDimCap)
    throw ParseError(r.path() + ": implausible dims " + std::to_string(hd.h) +
                     "x" + std::to_string(hd.w));
  if (static_cast<uint64_t>(hd.h) * hd.w > (uint64_t{1} << 31))
    throw ParseError(r.path() + ": payload too large");
  return hd;
}

}  // namespace

RawFrame read_hsrw_raw(const std::string& path, int bit_depth) {
  io::Reader r(path);
  HsrwHeader hd = read_hsrw_header(r);
  if (hd.dtype != static_cast<uint8_t>(Dtype::U16))
    throw ParseError(path + ": expected u16 raw frame, dtype tag is " +
                     std::to_string(hd.dtype));
  RawFrame frame(static_cast<int>(hd.h), static_cast<int>(hd.w), bit_depth);
  r.bytes(frame.data.data(), frame.data.size() * sizeof(uint16_t), "payload");
  return frame;
}

Plane read_hsrw_plane(const std::string& path) {
  io::Reader r(path);
  HsrwHeader hd = read_hsrw_header(r);
  if (hd.dtype != static_cast<uint8_t>(Dtype::F32))
    throw ParseError(path + ": expected f32 plane, dtype tag is " +
                     std::to_string(hd.dtype));
  Plane plane(static_cast<int>(hd.h), static_cast<int>(hd.w));
  r.bytes(plane.data.data(), plane.data.size() * sizeof(float), "payload");
  return plane;
}

}  // namespace hsicomp
