#include "hsicomp/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <limits>

#include "hsicomp/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary containers assume a little-endian host");

namespace hsicomp {
namespace io {

void put_u32(std::vector<uint8_t>& buf, uint32_t v) {
  const auto* p = reinterpret_cast<const uint8_t*>(&v);
  buf.insert(buf.end(), p, p + 4);
}

void put_u64(std::vector<uint8_t>& buf, uint64_t v) {
  const auto* p = reinterpret_cast<const uint8_t*>(&v);
  buf.insert(buf.end(), p, p + 8);
}

Reader::Reader(const std::string& path) : path_(path) {
  f_ = std::fopen(path.c_str(), "rb");
  if (!f_) throw IoError("cannot open " + path);
}

Reader::~Reader() {
  if (f_) std::fclose(f_);
}

void Reader::bytes(void* dst, size_t n, const char* what) {
  if (std::fread(dst, 1, n, f_) != n)
    throw ParseError(path_ + ": truncated while reading " + what);
}

uint8_t Reader::u8(const char* what) {
  uint8_t v;
  bytes(&v, 1, what);
  return v;
}

uint32_t Reader::u32(const char* what) {
  uint32_t v;
  bytes(&v, 4, what);
  return v;
}

uint64_t Reader::u64(const char* what) {
  uint64_t v;
  bytes(&v, 8, what);
  return v;
}

void Reader::expect_magic(const char magic[4]) {
  char got[5] = {0};
  bytes(got, 4, "magic");
  if (std::memcmp(got, magic, 4) != 0)
    throw ParseError(path_ + ": bad magic, expected '" +
                     std::string(magic, 4) + "' got '" + std::string(got, 4) +
                     "'");
}

bool Reader::at_eof() {
  int c = std::fgetc(f_);
  if (c == EOF) return true;
  std::ungetc(c, f_);
  return false;
}

Writer::Writer(const std::string& path) : path_(path) {
  f_ = std::fopen(path.c_str(), "wb");
  if (!f_) throw IoError("cannot write " + path);
}

Writer::~Writer() {
  if (f_) std::fclose(f_);
}

void Writer::bytes(const void* src, size_t n) {
  if (std::fwrite(src, 1, n, f_) != n)
    throw IoError("write failed for " + path_);
  written_ += n;
}

void Writer::u8(uint8_t v) { bytes(&v, 1); }
void Writer::u32(uint32_t v) { bytes(&v, 4); }
void Writer::u64(uint64_t v) { bytes(&v, 8); }
void Writer::magic(const char m[4]) { bytes(m, 4); }

void Writer::pad_to(size_t boundary) {
  static const uint8_t zeros[16] = {0};
  size_t rem = written_ % boundary;
  if (rem) bytes(zeros, boundary - rem);
}

void Writer::close() {
  if (f_) {
    if (std::fclose(f_) != 0) {
      f_ = nullptr;
      throw IoError("close failed for " + path_);
    }
    f_ = nullptr;
  }
}

}  // namespace io

void write_hscb(const std::string& path, const Tensor& t) {
  if (t.dtype() == Dtype::I8)
    throw IoError("HSCB stores f32 or u16 payloads, not i8");
  io::Writer w(path);
  w.magic("HSCB");
  w.u32(static_cast<uint32_t>(t.height()));
  w.u32(static_cast<uint32_t>(t.width()));
  w.u32(static_cast<uint32_t>(t.bands()));
  w.u8(static_cast<uint8_t>(t.layout()));
  w.u8(static_cast<uint8_t>(t.dtype()));
  w.pad_to(16);
  if (t.dtype() == Dtype::F32)
    w.bytes(t.f32().data(), t.size() * sizeof(float));
  else
    w.bytes(t.u16().data(), t.size() * sizeof(uint16_t));
  w.close();
}

Tensor read_hscb(const std::string& path) {
  io::Reader r(path);
  r.expect_magic("HSCB");
  uint32_t h = r.u32("height");
  uint32_t w = r.u32("width");
  uint32_t b = r.u32("bands");
  uint8_t layout_tag = r.u8("layout tag");
  uint8_t dtype_tag = r.u8("dtype tag");
  uint8_t pad[14];
  r.bytes(pad, 14, "header padding");

  if (layout_tag > 1)
    throw ParseError(path + ": unknown layout tag " +
                     std::to_string(layout_tag));
  if (dtype_tag > 1)
    throw ParseError(path + ": unknown dtype tag " + std::to_string(dtype_tag));
  constexpr uint32_t kDimCap = 1u << 20;
  if (h == 0 || w == 0 || b == 0 || h > kDimCap || w > kDimCap || b > kDimCap)
    throw ParseError(path + ": implausible dims " + std::to_string(h) + "x" +
                     std::to_string(w) + "x" + std::to_string(b));
  uint64_t count = static_cast<uint64_t>(h) * w * b;
  if (count > (uint64_t{1} << 31))
    throw ParseError(path + ": payload too large");

  Tensor t(static_cast<int>(h), static_cast<int>(w), static_cast<int>(b),
           static_cast<Layout>(layout_tag), static_cast<Dtype>(dtype_tag));
  if (t.dtype() == Dtype::F32)
    r.bytes(t.f32().data(), count * sizeof(float), "payload");
  else
    r.bytes(t.u16().data(), count * sizeof(uint16_t), "payload");
  return t;
}

}  // namespace hsicomp
