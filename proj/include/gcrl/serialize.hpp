#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "gcrl/image.hpp"
#include "gcrl/quantizer.hpp"

namespace gcrl {

// Little-endian primitives. Offsets in error messages are byte positions in
// the file being read.
namespace io {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
void put_f32(std::vector<std::uint8_t>& out, float v);
void put_i32(std::vector<std::uint8_t>& out, std::int32_t v);

class Reader {
public:
  Reader(const std::uint8_t* data, std::size_t size, std::string name);
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  std::int32_t i32();
  void bytes(void* dst, std::size_t n);
  void expect_magic(const char magic[4]);
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return size_ - pos_; }

private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
  std::string name_;
};

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);

} // namespace io

// Codebook container: magic "GCBK", version u32, K u32, K x 3 f32.
void save_codebook(const Codebook& cb, const std::string& path);
Codebook load_codebook(const std::string& path);

// Representation matrix container: magic "GREP", version u32, n u32, d u32,
// labels flag u32, n*d f32, then n i32 labels when flagged.
struct RepFile {
  std::uint32_t n = 0;
  std::uint32_t d = 0;
  std::vector<float> values;           // n x d
  std::optional<std::vector<std::int32_t>> labels;
};
void save_reps(const RepFile& reps, const std::string& path);
RepFile load_reps(const std::string& path);

// Image-set container (the raw_dump dataset kind): magic "GIMG", version u32,
// n u32, height u32, width u32, labels flag u32, n*h*w*3 f32, then n i32
// labels when flagged.
struct ImageDump {
  std::vector<Image> images;
  std::optional<std::vector<std::int32_t>> labels;
};
void save_image_dump(const ImageDump& dump, const std::string& path);
ImageDump load_image_dump(const std::string& path);

// Minimal CSV emitter; floats are shortest-round-trip formatted so files are
// byte-stable across runs.
class CsvWriter {
public:
  CsvWriter(const std::string& path, const std::string& header);
  void row(const std::vector<std::string>& cells);
  void flush();

private:
  std::ofstream out_;
  std::size_t columns_;
  std::string path_;
};

std::string format_float(double v);

} // namespace gcrl
