#include "hsicomp/tensor.hpp"

#include <string>

#include "hsicomp/error.hpp"

namespace hsicomp {

const char* layout_name(Layout l) { return l == Layout::BSQ ? "BSQ" : "BIP"; }

const char* dtype_name(Dtype d) {
  switch (d) {
    case Dtype::F32: return "f32";
    case Dtype::U16: return "u16";
    case Dtype::I8: return "i8";
  }
  return "?";
}

Tensor::Tensor(int height, int width, int bands, Layout layout, Dtype dtype)
    : h_(height), w_(width), b_(bands), layout_(layout), dtype_(dtype) {
  if (height <= 0 || width <= 0 || bands <= 0)
    throw DimensionError("tensor dims must be positive, got " +
                         std::to_string(height) + "x" + std::to_string(width) +
                         "x" + std::to_string(bands));
  size_t n = size();
  switch (dtype_) {
    case Dtype::F32: f32_.assign(n, 0.0f); break;
    case Dtype::U16: u16_.assign(n, 0); break;
    case Dtype::I8: i8_.assign(n, 0); break;
  }
}

void Tensor::check_index(int r, int c, int b) const {
  if (r < 0 || r >= h_ || c < 0 || c >= w_ || b < 0 || b >= b_)
    throw IndexError("index (" + std::to_string(r) + "," + std::to_string(c) +
                     "," + std::to_string(b) + ") out of bounds for " +
                     std::to_string(h_) + "x" + std::to_string(w_) + "x" +
                     std::to_string(b_));
}

float Tensor::at(int r, int c, int b) const {
  check_index(r, c, b);
  size_t i = offset(r, c, b);
  switch (dtype_) {
    case Dtype::F32: return f32_[i];
    case Dtype::U16: return static_cast<float>(u16_[i]);
    case Dtype::I8: return static_cast<float>(i8_[i]);
  }
  return 0.0f;
}

void Tensor::set(int r, int c, int b, float v) {
  check_index(r, c, b);
  size_t i = offset(r, c, b);
  switch (dtype_) {
    case Dtype::F32: f32_[i] = v; break;
    case Dtype::U16: u16_[i] = static_cast<uint16_t>(v); break;
    case Dtype::I8: i8_[i] = static_cast<int8_t>(v); break;
  }
}

namespace {
[[noreturn]] void dtype_mismatch(Dtype have, Dtype want) {
  throw DimensionError(std::string("tensor holds ") + dtype_name(have) +
                       ", requested " + dtype_name(want));
}
}  // namespace

std::span<float> Tensor::f32() {
  if (dtype_ != Dtype::F32) dtype_mismatch(dtype_, Dtype::F32);
  return f32_;
}
std::span<const float> Tensor::f32() const {
  if (dtype_ != Dtype::F32) dtype_mismatch(dtype_, Dtype::F32);
  return f32_;
}
std::span<uint16_t> Tensor::u16() {
  if (dtype_ != Dtype::U16) dtype_mismatch(dtype_, Dtype::U16);
  return u16_;
}
std::span<const uint16_t> Tensor::u16() const {
  if (dtype_ != Dtype::U16) dtype_mismatch(dtype_, Dtype::U16);
  return u16_;
}
std::span<int8_t> Tensor::i8() {
  if (dtype_ != Dtype::I8) dtype_mismatch(dtype_, Dtype::I8);
  return i8_;
}
std::span<const int8_t> Tensor::i8() const {
  if (dtype_ != Dtype::I8) dtype_mismatch(dtype_, Dtype::I8);
  return i8_;
}

namespace {

template <typename T>
void relayout(const Tensor& src, Tensor& dst, std::span<const T> in,
              std::span<T> out) {
  const int h = src.height(), w = src.width(), b = src.bands();
  if (src.layout() == Layout::BSQ) {
    // BSQ -> BIP: walk source contiguously, scatter into spectra.
    size_t i = 0;
    for (int band = 0; band < b; ++band)
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
          out[(static_cast<size_t>(r) * w + c) * b + band] = in[i++];
  } else {
    size_t i = 0;
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        for (int band = 0; band < b; ++band)
          out[(static_cast<size_t>(band) * h + r) * w + c] = in[i++];
  }
  (void)dst;
}

}  // namespace

Tensor convert_layout(const Tensor& t, Layout target) {
  Tensor out(t.height(), t.width(), t.bands(), target, t.dtype());
  out.set_scale(t.scale());
  if (t.layout() == target) {
    switch (t.dtype()) {
      case Dtype::F32: std::copy(t.f32().begin(), t.f32().end(), out.f32().begin()); break;
      case Dtype::U16: std::copy(t.u16().begin(), t.u16().end(), out.u16().begin()); break;
      case Dtype::I8: std::copy(t.i8().begin(), t.i8().end(), out.i8().begin()); break;
    }
    return out;
  }
  switch (t.dtype()) {
    case Dtype::F32: relayout<float>(t, out, t.f32(), out.f32()); break;
    case Dtype::U16: relayout<uint16_t>(t, out, t.u16(), out.u16()); break;
    case Dtype::I8: relayout<int8_t>(t, out, t.i8(), out.i8()); break;
  }
  return out;
}

Tensor crop(const Tensor& t, int top, int left, int out_h, int out_w) {
  if (top < 0 || left < 0 || out_h <= 0 || out_w <= 0 ||
      top + out_h > t.height() || left + out_w > t.width())
    throw DimensionError(
        "crop window (" + std::to_string(top) + "," + std::to_string(left) +
        ")+" + std::to_string(out_h) + "x" + std::to_string(out_w) +
        " exceeds " + std::to_string(t.height()) + "x" +
        std::to_string(t.width()));
  Tensor out(out_h, out_w, t.bands(), t.layout(), t.dtype());
  out.set_scale(t.scale());
  // Contiguous runs: one row per band in BSQ, one full spectral row in BIP.
  auto copy_rows = [&](auto src, auto dst) {
    if (t.layout() == Layout::BSQ) {
      for (int b = 0; b < t.bands(); ++b)
        for (int r = 0; r < out_h; ++r)
          std::copy_n(src.data() + t.offset(top + r, left, b), out_w,
                      dst.data() + out.offset(r, 0, b));
    } else {
      size_t run = static_cast<size_t>(out_w) * t.bands();
      for (int r = 0; r < out_h; ++r)
        std::copy_n(src.data() + t.offset(top + r, left, 0), run,
                    dst.data() + out.offset(r, 0, 0));
    }
  };
  switch (t.dtype()) {
    case Dtype::F32: copy_rows(t.f32(), out.f32()); break;
    case Dtype::U16: copy_rows(t.u16(), out.u16()); break;
    case Dtype::I8: copy_rows(t.i8(), out.i8()); break;
  }
  return out;
}

}  // namespace hsicomp
