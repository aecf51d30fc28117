#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hsicomp/tensor.hpp"

namespace hsicomp {

// One sensor exposure: a 2-D mosaic frame of u16 digital numbers.
struct RawFrame {
  int height = 0, width = 0;
  int bit_depth = 10;
  std::vector<uint16_t> data;

  RawFrame() = default;
  RawFrame(int h, int w, int bits = 10)
      : height(h), width(w), bit_depth(bits), data(size_t(h) * w, 0) {}
  uint16_t& at(int r, int c) {
    return data[static_cast<size_t>(r) * width + c];
  }
  uint16_t at(int r, int c) const {
    return data[static_cast<size_t>(r) * width + c];
  }
};

// A frame-shaped f32 plane (reflectance, dark/flat fields).
struct Plane {
  int height = 0, width = 0;
  std::vector<float> data;

  Plane() = default;
  Plane(int h, int w) : height(h), width(w), data(size_t(h) * w, 0.0f) {}
  float& at(int r, int c) { return data[static_cast<size_t>(r) * width + c]; }
  float at(int r, int c) const {
    return data[static_cast<size_t>(r) * width + c];
  }
};

struct CalibrationPair {
  Plane dark, flat;  // flat > dark on every active pixel
};

// 5x5 spectral filter tiling. band_of is row-major within the tile; the
// reference offset names the tile position every band is aligned to.
struct MosaicGeometry {
  int tile = 5;
  int ref_i = 2, ref_j = 2;

  int bands() const { return tile * tile; }
  int band_of(int i, int j) const { return tile * i + j; }
  int offset_i(int band) const { return band / tile; }
  int offset_j(int band) const { return band % tile; }
};

// Per-band clip thresholds (post-normalization units) plus the observed
// min/max of the clipped distribution, feeding symmetric normalization.
struct ChannelStats {
  std::vector<float> th, min, max;

  static ChannelStats load(const std::string& path);
  void save(const std::string& path) const;
};

struct PreprocessConfig {
  int crop_top = 0, crop_left = 0;       // active-area origin in the frame
  int active_height = 1080;              // must be multiples of the tile
  int active_width = 2045;
  int bit_depth = 10;
  double coverage = 0.9995;              // clip-threshold quantile
  int ref_tile_row = 2, ref_tile_col = 2;
  int depth = 5;                         // final dims divide 2^depth
  bool align = true;                     // band alignment resampling on/off

  MosaicGeometry geometry() const {
    return MosaicGeometry{5, ref_tile_row, ref_tile_col};
  }
  static PreprocessConfig load(const std::string& path);
  void save(const std::string& path) const;
};

// Cuts the active mosaic area out of the frame and clips values to the
// sensor's bit depth.
RawFrame crop_and_clip(const RawFrame& raw, const PreprocessConfig& cfg);

// (raw - dark) / (flat - dark), clamped to [0, 1]. Shapes must match the
// (already cropped) frame.
Plane reflectance_correct(const RawFrame& raw, const CalibrationPair& calib);

Plane plane_crop(const Plane& p, int top, int left, int out_h, int out_w);

// Reorganizes the mosaic into a cube: one value per band per tile, no
// upsampling. cube(r, c, band_of(i,j)) = frame(tile*r + i, tile*c + j).
Tensor demosaic(const Plane& frame, const MosaicGeometry& geom);

// Resamples each band plane by bilinear interpolation at fractional shift
// ((ref_i - i)/tile, (ref_j - j)/tile) so all bands coincide with the
// reference band's grid. Clamp-to-edge at borders; the later crop discards
// the contaminated rim.
Tensor align_bands(const Tensor& cube, const MosaicGeometry& geom);

// Centered crop to the largest dims divisible by 2^depth.
Tensor crop_to_multiple(const Tensor& cube, int depth);

// Divides every pixel's spectrum by its band sum; zero-sum pixels stay zero.
Tensor pixel_normalize(const Tensor& cube);

// Per-band quantile of the pooled normalized values at `coverage`; also
// records the per-band min and the post-clip max (= the threshold).
ChannelStats compute_clip_thresholds(std::span<const Tensor> cubes,
                                     double coverage = 0.9995);

Tensor clip_channels(const Tensor& cube, const ChannelStats& stats);

// x_hat = 2 (x - min) / (max - min) - 1 per band, the affine map a depthwise
// layer can absorb.
Tensor symmetric_normalize(const Tensor& cube, const ChannelStats& stats);

// Full chain: crop_and_clip -> reflectance_correct -> demosaic ->
// align_bands -> crop_to_multiple -> BSQ-to-BIP -> pixel_normalize ->
// clip_channels, plus symmetric_normalize unless the model carries the
// equivalent fused layer.
Tensor run_preprocess(const RawFrame& raw, const CalibrationPair& calib,
                      const ChannelStats& stats, const PreprocessConfig& cfg,
                      bool apply_symmetric_norm = true);

// Raw/plane container: magic `HSRW`, u32 LE height and width, u8 dtype tag
// (0=f32, 1=u16), zero padding to 16 bytes, row-major LE payload.
void write_hsrw(const std::string& path, const RawFrame& frame);
void write_hsrw(const std::string& path, const Plane& plane);
RawFrame read_hsrw_raw(const std::string& path, int bit_depth = 10);
Plane read_hsrw_plane(const std::string& path);

}  // namespace hsicomp
