#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace hsicomp {

// Memory layouts for H x W x B cubes. BSQ stores whole band planes
// back-to-back (band-major), BIP stores each pixel's spectrum contiguously
// (pixel-major). Values match the on-disk layout tag.
enum class Layout : uint8_t { BSQ = 0, BIP = 1 };

// Element types: f32 for the processing pipeline, u16 for raw sensor data,
// i8 (+scale) for quantized simulation.
enum class Dtype : uint8_t { F32 = 0, U16 = 1, I8 = 2 };

const char* layout_name(Layout l);
const char* dtype_name(Dtype d);

class Tensor {
 public:
  Tensor() = default;
  Tensor(int height, int width, int bands, Layout layout,
         Dtype dtype = Dtype::F32);

  int height() const noexcept { return h_; }
  int width() const noexcept { return w_; }
  int bands() const noexcept { return b_; }
  Layout layout() const noexcept { return layout_; }
  Dtype dtype() const noexcept { return dtype_; }
  size_t size() const noexcept {
    return static_cast<size_t>(h_) * w_ * b_;
  }

  // Quantization scale accompanying i8 payloads; 1 otherwise.
  float scale() const noexcept { return scale_; }
  void set_scale(float s) noexcept { scale_ = s; }

  // Flat buffer offset of (r, c, b) in the active layout; unchecked.
  size_t offset(int r, int c, int b) const noexcept {
    if (layout_ == Layout::BSQ)
      return (static_cast<size_t>(b) * h_ + r) * w_ + c;
    return (static_cast<size_t>(r) * w_ + c) * b_ + b;
  }

  // Bounds-checked logical accessors, any dtype.
  float at(int r, int c, int b) const;
  void set(int r, int c, int b, float v);

  // Typed buffer views; throw on dtype mismatch.
  std::span<float> f32();
  std::span<const float> f32() const;
  std::span<uint16_t> u16();
  std::span<const uint16_t> u16() const;
  std::span<int8_t> i8();
  std::span<const int8_t> i8() const;

  bool same_shape(const Tensor& o) const noexcept {
    return h_ == o.h_ && w_ == o.w_ && b_ == o.b_;
  }

 private:
  void check_index(int r, int c, int b) const;

  int h_ = 0, w_ = 0, b_ = 0;
  Layout layout_ = Layout::BSQ;
  Dtype dtype_ = Dtype::F32;
  float scale_ = 1.0f;
  std::vector<float> f32_;
  std::vector<uint16_t> u16_;
  std::vector<int8_t> i8_;
};

// Returns a fresh tensor with the same logical values in `target` layout.
// Converting to the current layout copies.
Tensor convert_layout(const Tensor& t, Layout target);

// Spatial window [top, top+out_h) x [left, left+out_w), all bands, layout
// preserved.
Tensor crop(const Tensor& t, int top, int left, int out_h, int out_w);

}  // namespace hsicomp
