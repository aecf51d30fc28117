#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hsicomp/metrics.hpp"
#include "hsicomp/preprocess.hpp"
#include "hsicomp/tensor.hpp"
#include "hsicomp/training.hpp"

namespace hsicomp {

// Synthetic mosaic-scene model: axis-aligned rectangles of distinct
// spectral signatures over a background class, rendered through the inverse
// of the preprocessing chain (per-band misalignment, mosaic tiling, dark and
// flat fields, u16 quantization) so the preprocessor can be tested against
// known ground truth.
struct SceneSpec {
  int class_count = 5;
  int bands = 25;
  std::vector<float> signatures;   // [class][band] reflectances in [0, 1]
  float min_signature_gap = 0.5f;  // smallest pairwise L2 between classes

  int rects_min = 4, rects_max = 10;          // rectangles per scene
  float rect_frac_min = 0.10f;                // rect side as fraction of
  float rect_frac_max = 0.45f;                // the cube side

  float illum_min = 0.5f, illum_max = 1.5f;   // per-image scalar
  float noise_sigma = 0.005f;  // reflectance units, clamped at 3 sigma
  bool misalign = true;        // emit bands at their physical tile offsets

  // Integer-exact synthesis: flat - dark held at grid_scale everywhere,
  // dark an integer field, signatures snapped to grid_step/grid_scale, so
  // u16 rounding is lossless and reflectance recovery is bitwise.
  bool exact_grid = false;
  int grid_scale = 768;
  int grid_step = 1;

  int raw_height = 0, raw_width = 0;  // full sensor frame
  PreprocessConfig preprocess;

  float sig(int c, int b) const {
    return signatures[static_cast<size_t>(c) * bands + b];
  }
};

// Presets with seed-derived signatures. The benchmark scene feeds the
// depth-3 training/pruning runs (504x544 frame -> 96x104 cube); the mini
// scene keeps unit tests fast (88x88 frame -> 16x16 cube, depth 2).
SceneSpec benchmark_scene_spec(uint64_t seed = 1);
SceneSpec mini_scene_spec(uint64_t seed = 1);

// Snaps every signature to grid_step/grid_scale and sets exact_grid.
void snap_signatures_to_grid(SceneSpec& spec);

struct LabeledSample {
  RawFrame raw;
  LabelMap gt;        // post-crop cube coordinates
  Tensor truth_cube;  // noiseless, unit-illumination, aligned, BSQ; may be
                      // empty when a stored dataset omits truth/
};

struct Dataset {
  CalibrationPair calib;  // full-frame dark and flat fields
  std::vector<LabeledSample> samples;
};

// Deterministic per (spec, seed); samples derive independent streams from
// their index, so generation parallelizes without reordering effects.
Dataset generate(const SceneSpec& spec, uint64_t seed, int count);

// Sorts samples by per-class pixel fractions (rarest class first, so the
// deal spreads the hardest class most evenly) and deals them round-robin
// into k folds. Returns a fold id per sample.
std::vector<int> stratified_folds(const std::vector<LabeledSample>& samples,
                                  int classes, int k = 5);

struct FoldSplit {
  std::vector<size_t> train, val, test;
};
// Rotation round r: test = fold r, val = fold (r+1) mod k, train = rest.
FoldSplit fold_split(const std::vector<int>& folds, int k, int round);

// Label plane file: magic `HSLB`, u32 LE height and width, u8 dtype tag 2,
// zero padding to 16 bytes, row-major u8 payload.
void write_hslb(const std::string& path, const LabelMap& labels);
LabelMap read_hslb(const std::string& path);

// Dataset directory: `manifest` + `preprocess` (both key=value text),
// `dark.hsrw`/`flat.hsrw`, `raw/NNNN.hsrw`, `labels/NNNN.hslb` and
// optionally `truth/NNNN.hscb`.
void save_dataset(const std::string& dir, const SceneSpec& spec,
                  const Dataset& ds);

struct LoadedDataset {
  PreprocessConfig preprocess;
  CalibrationPair calib;
  int classes = 0;
  int bands = 0;
  std::vector<LabeledSample> samples;
};
LoadedDataset load_dataset(const std::string& dir);

// Runs the chain up to per-pixel normalization (no clipping yet); the
// per-band clip thresholds are fitted on these cubes for the training split.
Tensor preprocess_to_pn(const RawFrame& raw, const CalibrationPair& calib,
                        const PreprocessConfig& cfg);
ChannelStats fit_channel_stats(const LoadedDataset& ds,
                               const std::vector<size_t>& indices);

// Full preprocessing of selected samples into model-ready cubes.
std::vector<Sample> to_samples(const LoadedDataset& ds,
                               const ChannelStats& stats,
                               const std::vector<size_t>& indices,
                               bool apply_symmetric_norm = true);

}  // namespace hsicomp
