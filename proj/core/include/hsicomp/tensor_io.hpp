#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "hsicomp/tensor.hpp"

namespace hsicomp {

// Cube container: magic `HSCB`, u32 LE height/width/bands, u8 layout tag
// (0=BSQ, 1=BIP), u8 dtype tag (0=f32, 1=u16), zero padding to a 16-byte
// multiple (header is 32 bytes), then the raw LE payload in declared layout.
void write_hscb(const std::string& path, const Tensor& t);
Tensor read_hscb(const std::string& path);

namespace io {

// Little-endian scalar/array helpers shared by the binary containers.
// The codebase targets little-endian hosts; asserted at compile time.
void put_u32(std::vector<uint8_t>& buf, uint32_t v);
void put_u64(std::vector<uint8_t>& buf, uint64_t v);

class Reader {
 public:
  explicit Reader(const std::string& path);
  ~Reader();
  Reader(const Reader&) = delete;
  Reader& operator=(const Reader&) = delete;

  // All read methods throw ParseError naming the file on short reads.
  void bytes(void* dst, size_t n, const char* what);
  uint8_t u8(const char* what);
  uint32_t u32(const char* what);
  uint64_t u64(const char* what);
  void expect_magic(const char magic[4]);
  bool at_eof();
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::FILE* f_ = nullptr;
};

class Writer {
 public:
  explicit Writer(const std::string& path);
  ~Writer();
  Writer(const Writer&) = delete;
  Writer& operator=(const Writer&) = delete;

  void bytes(const void* src, size_t n);
  void u8(uint8_t v);
  void u32(uint32_t v);
  void u64(uint64_t v);
  void magic(const char m[4]);
  void pad_to(size_t boundary);
  void close();
  size_t written() const { return written_; }

 private:
  std::string path_;
  std::FILE* f_ = nullptr;
  size_t written_ = 0;
};

}  // namespace io
}  // namespace hsicomp
