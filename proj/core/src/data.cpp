#include "hsicomp/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "hsicomp/error.hpp"
#include "hsicomp/kvfile.hpp"
#include "hsicomp/parallel.hpp"
#include "hsicomp/rng.hpp"
#include "hsicomp/tensor_io.hpp"

namespace fs = std::filesystem;

namespace hsicomp {

namespace {

// Random reflectance signatures in [0.05, 0.6]; the headroom keeps
// illum_max * signature below the clamp at 1. Redrawn until every pair is
// at least min_signature_gap apart in L2.
std::vector<float> draw_signatures(int classes, int bands, float gap,
                                   uint64_t seed) {
  std::mt19937_64 rng = make_rng(seed, 0x51675);
  std::vector<float> sig(static_cast<size_t>(classes) * bands);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    for (float& v : sig) v = uniform_float(rng, 0.05f, 0.6f);
    bool ok = true;
    for (int a = 0; a < classes && ok; ++a)
      for (int b = a + 1; b < classes && ok; ++b) {
        double d2 = 0.0;
        for (int k = 0; k < bands; ++k) {
          const double d = sig[static_cast<size_t>(a) * bands + k] -
                           sig[static_cast<size_t>(b) * bands + k];
          d2 += d * d;
        }
        if (d2 < static_cast<double>(gap) * gap) ok = false;
      }
    if (ok) return sig;
  }
  throw ConfigError("signature gap " + std::to_string(gap) +
                    " unreachable for " + std::to_string(classes) +
                    " classes");
}

void validate_spec(const SceneSpec& s) {
  const MosaicGeometry g = s.preprocess.geometry();
  if (s.class_count < 2 || s.class_count > 200)
    throw ConfigError("class_count out of range");
  if (s.bands != g.bands())
    throw ConfigError("spec has " + std::to_string(s.bands) +
                      " bands, mosaic geometry implies " +
                      std::to_string(g.bands()));
  if (s.signatures.size() !=
      static_cast<size_t>(s.class_count) * s.bands)
    throw ConfigError("signatures hold " +
                      std::to_string(s.signatures.size()) + " values, need " +
                      std::to_string(s.class_count * s.bands));
  for (float v : s.signatures)
    if (!(v >= 0.0f && v <= 1.0f))
      throw ConfigError("signature value outside [0, 1]");
  if (s.preprocess.active_height % g.tile || s.preprocess.active_width % g.tile)
    throw ConfigError("active area must be a multiple of the tile size");
  if (s.raw_height < s.preprocess.crop_top + s.preprocess.active_height ||
      s.raw_width < s.preprocess.crop_left + s.preprocess.active_width)
    throw ConfigError("raw frame smaller than crop window");
  if (s.rects_min < 0 || s.rects_max < s.rects_min)
    throw ConfigError("rectangle count range invalid");
  if (!(s.illum_min > 0.0f) || s.illum_max < s.illum_min)
    throw ConfigError("illumination range invalid");
  if (s.noise_sigma < 0.0f) throw ConfigError("noise_sigma negative");
  if (s.misalign && !s.preprocess.align)
    throw ConfigError("misaligned scenes need preprocess band alignment on");
  if (s.exact_grid && s.grid_scale < 2)
    throw ConfigError("grid_scale too small");
}

// Low-frequency field: bilinear upsampling of a coarse random control grid.
Plane smooth_field(int h, int w, float lo, float hi, std::mt19937_64& rng) {
  const int gh = 5, gw = 5;
  std::vector<float> grid(gh * gw);
  for (float& v : grid) v = uniform_float(rng, lo, hi);
  Plane out(h, w);
  for (int r = 0; r < h; ++r) {
    const float gy = h == 1 ? 0.0f
                            : static_cast<float>(r) * (gh - 1) / (h - 1);
    const int y0 = std::min(static_cast<int>(gy), gh - 2);
    const float ay = gy - y0;
    for (int c = 0; c < w; ++c) {
      const float gx = w == 1 ? 0.0f
                              : static_cast<float>(c) * (gw - 1) / (w - 1);
      const int x0 = std::min(static_cast<int>(gx), gw - 2);
      const float ax = gx - x0;
      const float v00 = grid[y0 * gw + x0], v01 = grid[y0 * gw + x0 + 1];
      const float v10 = grid[(y0 + 1) * gw + x0],
                  v11 = grid[(y0 + 1) * gw + x0 + 1];
      out.at(r, c) = (v00 + ax * (v01 - v00)) * (1.0f - ay) +
                     (v10 + ax * (v11 - v10)) * ay;
    }
  }
  return out;
}

int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

}  // namespace

void snap_signatures_to_grid(SceneSpec& spec) {
  spec.exact_grid = true;
  const float scale = static_cast<float>(spec.grid_scale);
  const int step = std::max(1, spec.grid_step);
  for (float& v : spec.signatures) {
    const long q =
        std::lround(static_cast<double>(v) * spec.grid_scale / step) * step;
    v = static_cast<float>(q) / scale;
  }
}

SceneSpec benchmark_scene_spec(uint64_t seed) {
  SceneSpec s;
  s.raw_height = 504;
  s.raw_width = 544;
  s.preprocess.crop_top = 2;
  s.preprocess.crop_left = 2;
  s.preprocess.active_height = 500;  // cube 100x108, cropped to 96x104
  s.preprocess.active_width = 540;
  s.preprocess.depth = 3;
  s.signatures = draw_signatures(s.class_count, s.bands,
                                 s.min_signature_gap, seed);
  return s;
}

SceneSpec mini_scene_spec(uint64_t seed) {
  SceneSpec s;
  s.raw_height = 88;
  s.raw_width = 88;
  s.preprocess.crop_top = 4;
  s.preprocess.crop_left = 4;
  s.preprocess.active_height = 80;  // cube 16x16
  s.preprocess.active_width = 80;
  s.preprocess.depth = 2;
  s.rects_min = 2;
  s.rects_max = 5;
  s.signatures = draw_signatures(s.class_count, s.bands,
                                 s.min_signature_gap, seed);
  return s;
}

Dataset generate(const SceneSpec& spec, uint64_t seed, int count) {
  validate_spec(spec);
  if (count < 1) throw ConfigError("sample count must be positive");

  const MosaicGeometry geom = spec.preprocess.geometry();
  const int tile = geom.tile;
  const int cube_h = spec.preprocess.active_height / tile;
  const int cube_w = spec.preprocess.active_width / tile;
  const int unit = 1 << spec.preprocess.depth;
  const int out_h = cube_h / unit * unit;
  const int out_w = cube_w / unit * unit;
  if (out_h == 0 || out_w == 0)
    throw ConfigError("cube smaller than one multiple of 2^depth");
  const int top = (cube_h - out_h) / 2;
  const int left = (cube_w - out_w) / 2;
  const int dn_max = (1 << spec.preprocess.bit_depth) - 1;

  Dataset ds;

  // Dark and flat fields, shared across the dataset like a real
  // calibration. Exact mode pins flat - dark to the grid scale and keeps
  // dark integral so quantization is lossless.
  std::mt19937_64 crng = make_rng(seed, 0xCA11B);
  ds.calib.dark = smooth_field(spec.raw_height, spec.raw_width, 64.0f, 128.0f,
                               crng);
  ds.calib.flat = Plane(spec.raw_height, spec.raw_width);
  if (spec.exact_grid) {
    for (float& v : ds.calib.dark.data) v = std::round(v);
    for (size_t i = 0; i < ds.calib.dark.data.size(); ++i)
      ds.calib.flat.data[i] =
          ds.calib.dark.data[i] + static_cast<float>(spec.grid_scale);
  } else {
    Plane gain = smooth_field(spec.raw_height, spec.raw_width, 600.0f, 880.0f,
                              crng);
    for (size_t i = 0; i < gain.data.size(); ++i)
      ds.calib.flat.data[i] = ds.calib.dark.data[i] + gain.data[i];
  }
  if (dn_max < 1023)
    throw ConfigError("bit_depth below 10 leaves no headroom for the fields");

  ds.samples.resize(count);
  parallel_for(count, [&](int si) {
    std::mt19937_64 rng = make_rng(seed, 1000 + static_cast<uint64_t>(si));
    LabeledSample& smp = ds.samples[si];

    // Scene label map in full cube coordinates.
    LabelMap scene(cube_h, cube_w);
    const int nrect = uniform_int(rng, spec.rects_min, spec.rects_max);
    for (int k = 0; k < nrect; ++k) {
      const int cls = uniform_int(rng, 1, spec.class_count - 1);
      const int rh = std::max(
          1, static_cast<int>(std::lround(
                 uniform_float(rng, spec.rect_frac_min, spec.rect_frac_max) *
                 cube_h)));
      const int rw = std::max(
          1, static_cast<int>(std::lround(
                 uniform_float(rng, spec.rect_frac_min, spec.rect_frac_max) *
                 cube_w)));
      const int r0 = uniform_int(rng, 0, cube_h - rh);
      const int c0 = uniform_int(rng, 0, cube_w - rw);
      for (int r = r0; r < r0 + rh; ++r)
        for (int c = c0; c < c0 + rw; ++c)
          scene.at(r, c) = static_cast<uint8_t>(cls);
    }

    const float illum = uniform_float(rng, spec.illum_min, spec.illum_max);
    std::normal_distribution<float> noise(0.0f, spec.noise_sigma);
    const float nclamp = 3.0f * spec.noise_sigma;

    // Reflectance per band in cube coordinates. A physical band sits at its
    // tile offset, so its grid samples the scene shifted by the negative of
    // the alignment correction; band alignment later resamples it back.
    Tensor refl(cube_h, cube_w, spec.bands, Layout::BSQ, Dtype::F32);
    auto rv = refl.f32();
    for (int b = 0; b < spec.bands; ++b) {
      float dr = 0.0f, dc = 0.0f;
      if (spec.misalign) {
        dr = static_cast<float>(geom.ref_i - geom.offset_i(b)) / tile;
        dc = static_cast<float>(geom.ref_j - geom.offset_j(b)) / tile;
      }
      for (int r = 0; r < cube_h; ++r) {
        const int sr = clampi(static_cast<int>(std::lround(r - dr)), 0,
                              cube_h - 1);
        for (int c = 0; c < cube_w; ++c) {
          const int sc = clampi(static_cast<int>(std::lround(c - dc)), 0,
                                cube_w - 1);
          float v = illum * spec.sig(scene.at(sr, sc), b);
          if (spec.noise_sigma > 0.0f) {
            float n = noise(rng);
            n = std::clamp(n, -nclamp, nclamp);
            v += n;
          }
          rv[refl.offset(r, c, b)] = std::clamp(v, 0.0f, 1.0f);
        }
      }
    }

    // Mosaic into the raw frame through the dark/flat model, quantized.
    smp.raw = RawFrame(spec.raw_height, spec.raw_width,
                       spec.preprocess.bit_depth);
    for (int y = 0; y < spec.raw_height; ++y)
      for (int x = 0; x < spec.raw_width; ++x)
        smp.raw.at(y, x) = static_cast<uint16_t>(
            clampi(static_cast<int>(std::lround(ds.calib.dark.at(y, x))), 0,
                   dn_max));
    for (int r = 0; r < cube_h; ++r)
      for (int c = 0; c < cube_w; ++c)
        for (int ti = 0; ti < tile; ++ti)
          for (int tj = 0; tj < tile; ++tj) {
            const int y = spec.preprocess.crop_top + tile * r + ti;
            const int x = spec.preprocess.crop_left + tile * c + tj;
            const float d = ds.calib.dark.at(y, x);
            const float f = ds.calib.flat.at(y, x);
            const float dn =
                d + rv[refl.offset(r, c, geom.band_of(ti, tj))] * (f - d);
            smp.raw.at(y, x) = static_cast<uint16_t>(
                clampi(static_cast<int>(std::lround(dn)), 0, dn_max));
          }

    smp.gt = LabelMap(out_h, out_w);
    for (int r = 0; r < out_h; ++r)
      for (int c = 0; c < out_w; ++c)
        smp.gt.at(r, c) = scene.at(top + r, left + c);

    smp.truth_cube = Tensor(out_h, out_w, spec.bands, Layout::BSQ, Dtype::F32);
    auto tv = smp.truth_cube.f32();
    for (int b = 0; b < spec.bands; ++b)
      for (int r = 0; r < out_h; ++r)
        for (int c = 0; c < out_w; ++c)
          tv[smp.truth_cube.offset(r, c, b)] = spec.sig(smp.gt.at(r, c), b);
  });
  return ds;
}

std::vector<int> stratified_folds(const std::vector<LabeledSample>& samples,
                                  int classes, int k) {
  if (k < 3) throw ConfigError("fold count must be at least 3");
  if (samples.size() < static_cast<size_t>(k))
    throw ConfigError("need at least " + std::to_string(k) + " samples for " +
                      std::to_string(k) + " folds");

  const size_t n = samples.size();
  std::vector<std::vector<double>> frac(n, std::vector<double>(classes, 0.0));
  std::vector<double> global(classes, 0.0);
  for (size_t i = 0; i < n; ++i) {
    const LabelMap& gt = samples[i].gt;
    for (uint8_t l : gt.data)
      if (l < classes) frac[i][l] += 1.0;
    const double inv = 1.0 / static_cast<double>(gt.size());
    for (int c = 0; c < classes; ++c) {
      frac[i][c] *= inv;
      global[c] += frac[i][c];
    }
  }

  // Class order for the sort key: rarest first, so round-robin dealing
  // balances the class with the least slack.
  std::vector<int> order(classes);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return global[a] < global[b]; });

  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
    for (int c : order) {
      if (frac[a][c] != frac[b][c]) return frac[a][c] < frac[b][c];
    }
    return a < b;
  });

  std::vector<int> folds(n, 0);
  for (size_t pos = 0; pos < n; ++pos)
    folds[idx[pos]] = static_cast<int>(pos % k);
  return folds;
}

FoldSplit fold_split(const std::vector<int>& folds, int k, int round) {
  if (k < 3) throw ConfigError("fold count must be at least 3");
  if (round < 0 || round >= k) throw ConfigError("fold round out of range");
  const int test = round, val = (round + 1) % k;
  FoldSplit s;
  for (size_t i = 0; i < folds.size(); ++i) {
    if (folds[i] == test)
      s.test.push_back(i);
    else if (folds[i] == val)
      s.val.push_back(i);
    else
      s.train.push_back(i);
  }
  return s;
}

void write_hslb(const std::string& path, const LabelMap& labels) {
  io::Writer w(path);
  w.magic("HSLB");
  w.u32(static_cast<uint32_t>(labels.height));
  w.u32(static_cast<uint32_t>(labels.width));
  w.u8(2);
  w.pad_to(16);
  w.bytes(labels.data.data(), labels.data.size());
  w.close();
}

LabelMap read_hslb(const std::string& path) {
  io::Reader r(path);
  r.expect_magic("HSLB");
  const uint32_t h = r.u32("height");
  const uint32_t w = r.u32("width");
  const uint8_t tag = r.u8("dtype tag");
  if (h == 0 || w == 0 || h > (1u << 20) || w > (1u << 20))
    throw ParseError(path + ": implausible label dims " + std::to_string(h) +
                     "x" + std::to_string(w));
  if (tag != 2)
    throw ParseError(path + ": dtype tag " + std::to_string(tag) +
                     " is not u8 labels");
  uint8_t pad[3];
  r.bytes(pad, 3, "header padding");
  LabelMap m(static_cast<int>(h), static_cast<int>(w));
  r.bytes(m.data.data(), m.data.size(), "label payload");
  return m;
}

namespace {

std::string sample_path(const std::string& dir, const char* sub, int i,
                        const char* ext) {
  char name[32];
  std::snprintf(name, sizeof name, "%04d.%s", i, ext);
  return dir + "/" + sub + "/" + name;
}

}  // namespace

void save_dataset(const std::string& dir, const SceneSpec& spec,
                  const Dataset& ds) {
  std::error_code ec;
  fs::create_directories(dir + "/raw", ec);
  fs::create_directories(dir + "/labels", ec);
  const bool truth = !ds.samples.empty() &&
                     ds.samples.front().truth_cube.height() > 0;
  if (truth) fs::create_directories(dir + "/truth", ec);
  if (ec) throw IoError(dir + ": " + ec.message());

  KvFile kv;
  kv.set("format", "hsicomp-dataset-1");
  kv.set_int("count", static_cast<int64_t>(ds.samples.size()));
  kv.set_int("classes", spec.class_count);
  kv.set_int("bands", spec.bands);
  kv.set_int("raw_height", spec.raw_height);
  kv.set_int("raw_width", spec.raw_width);
  kv.set_int("truth", truth ? 1 : 0);
  kv.save(dir + "/manifest");
  spec.preprocess.save(dir + "/preprocess");
  write_hsrw(dir + "/dark.hsrw", ds.calib.dark);
  write_hsrw(dir + "/flat.hsrw", ds.calib.flat);

  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const LabeledSample& s = ds.samples[i];
    write_hsrw(sample_path(dir, "raw", static_cast<int>(i), "hsrw"), s.raw);
    write_hslb(sample_path(dir, "labels", static_cast<int>(i), "hslb"), s.gt);
    if (truth)
      write_hscb(sample_path(dir, "truth", static_cast<int>(i), "hscb"),
                 s.truth_cube);
  }
}

LoadedDataset load_dataset(const std::string& dir) {
  KvFile kv = KvFile::load(dir + "/manifest");
  kv.require_known({"format", "count", "classes", "bands", "raw_height",
                    "raw_width", "truth"});
  if (kv.get("format") != "hsicomp-dataset-1")
    throw ParseError(dir + "/manifest: unsupported format '" +
                     kv.get("format") + "'");
  LoadedDataset ds;
  ds.preprocess = PreprocessConfig::load(dir + "/preprocess");
  ds.classes = static_cast<int>(kv.get_int("classes"));
  ds.bands = static_cast<int>(kv.get_int("bands"));
  const int64_t count = kv.get_int("count");
  if (count < 0 || count > 1'000'000)
    throw ParseError(dir + "/manifest: implausible count " +
                     std::to_string(count));
  const bool truth = kv.get_int("truth") != 0;
  ds.calib.dark = read_hsrw_plane(dir + "/dark.hsrw");
  ds.calib.flat = read_hsrw_plane(dir + "/flat.hsrw");

  ds.samples.resize(count);
  for (int i = 0; i < count; ++i) {
    LabeledSample& s = ds.samples[i];
    s.raw = read_hsrw_raw(sample_path(dir, "raw", i, "hsrw"),
                          ds.preprocess.bit_depth);
    s.gt = read_hslb(sample_path(dir, "labels", i, "hslb"));
    if (truth) s.truth_cube = read_hscb(sample_path(dir, "truth", i, "hscb"));
  }
  return ds;
}

Tensor preprocess_to_pn(const RawFrame& raw, const CalibrationPair& calib,
                        const PreprocessConfig& cfg) {
  RawFrame active = crop_and_clip(raw, cfg);
  CalibrationPair cc;
  cc.dark = plane_crop(calib.dark, cfg.crop_top, cfg.crop_left,
                       cfg.active_height, cfg.active_width);
  cc.flat = plane_crop(calib.flat, cfg.crop_top, cfg.crop_left,
                       cfg.active_height, cfg.active_width);
  Plane refl = reflectance_correct(active, cc);
  Tensor cube = demosaic(refl, cfg.geometry());
  if (cfg.align) cube = align_bands(cube, cfg.geometry());
  cube = crop_to_multiple(cube, cfg.depth);
  cube = convert_layout(cube, Layout::BIP);
  return pixel_normalize(cube);
}

ChannelStats fit_channel_stats(const LoadedDataset& ds,
                               const std::vector<size_t>& indices) {
  if (indices.empty()) throw ConfigError("no samples selected for stats");
  std::vector<Tensor> cubes(indices.size());
  parallel_for(static_cast<int>(indices.size()), [&](int i) {
    cubes[i] = preprocess_to_pn(ds.samples.at(indices[i]).raw, ds.calib,
                                ds.preprocess);
  });
  return compute_clip_thresholds(cubes, ds.preprocess.coverage);
}

std::vector<Sample> to_samples(const LoadedDataset& ds,
                               const ChannelStats& stats,
                               const std::vector<size_t>& indices,
                               bool apply_symmetric_norm) {
  std::vector<Sample> out(indices.size());
  parallel_for(static_cast<int>(indices.size()), [&](int i) {
    const LabeledSample& s = ds.samples.at(indices[i]);
    out[i].cube = run_preprocess(s.raw, ds.calib, stats, ds.preprocess,
                                 apply_symmetric_norm);
    out[i].labels = s.gt;
  });
  return out;
}

}  // namespace hsicomp
