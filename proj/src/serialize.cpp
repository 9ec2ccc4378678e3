#include "gcrl/serialize.hpp"

#include <algorithm>
#include <charconv>
#include <cstring>

#include "gcrl/errors.hpp"

namespace gcrl {

namespace io {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

void put_i32(std::vector<std::uint8_t>& out, std::int32_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
}

Reader::Reader(const std::uint8_t* data, std::size_t size, std::string name)
    : data_(data), size_(size), name_(std::move(name)) {}

void Reader::bytes(void* dst, std::size_t n) {
  if (pos_ + n > size_)
    throw IoError(name_ + ": truncated at byte offset " + std::to_string(pos_) + " (need " +
                  std::to_string(n) + " more bytes, have " + std::to_string(size_ - pos_) + ")");
  std::memcpy(dst, data_ + pos_, n);
  pos_ += n;
}

std::uint32_t Reader::u32() {
  std::uint8_t b[4];
  bytes(b, 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t Reader::u64() {
  std::uint64_t lo = u32();
  std::uint64_t hi = u32();
  return lo | (hi << 32);
}

float Reader::f32() {
  std::uint32_t bits = u32();
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

std::int32_t Reader::i32() { return static_cast<std::int32_t>(u32()); }

void Reader::expect_magic(const char magic[4]) {
  char got[4];
  std::size_t at = pos_;
  bytes(got, 4);
  if (std::memcmp(got, magic, 4) != 0)
    throw IoError(name_ + ": bad magic at byte offset " + std::to_string(at) + ", expected '" +
                  std::string(magic, 4) + "'");
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open '" + path + "'");
  auto size = static_cast<std::size_t>(f.tellg());
  f.seekg(0);
  std::vector<std::uint8_t> out(size);
  f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(size));
  if (f.gcount() != static_cast<std::streamsize>(size)) throw IoError("short read from '" + path + "'");
  return out;
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to '" + path + "'");
}

} // namespace io

namespace {
constexpr std::uint32_t kCodebookVersion = 1;
constexpr std::uint32_t kRepsVersion = 1;
constexpr std::uint32_t kImageDumpVersion = 1;
} // namespace

void save_codebook(const Codebook& cb, const std::string& path) {
  std::vector<std::uint8_t> out{'G', 'C', 'B', 'K'};
  io::put_u32(out, kCodebookVersion);
  io::put_u32(out, static_cast<std::uint32_t>(cb.k));
  for (float v : cb.centroids) io::put_f32(out, v);
  io::write_file(path, out);
}

Codebook load_codebook(const std::string& path) {
  auto bytes = io::read_file(path);
  io::Reader r(bytes.data(), bytes.size(), path);
  r.expect_magic("GCBK");
  std::uint32_t version = r.u32();
  if (version != kCodebookVersion)
    throw IoError(path + ": unsupported codebook version " + std::to_string(version));
  Codebook cb;
  cb.k = static_cast<int>(r.u32());
  if (cb.k <= 0) throw IoError(path + ": codebook has no codes");
  cb.centroids.resize(static_cast<std::size_t>(cb.k) * 3);
  for (auto& v : cb.centroids) v = r.f32();
  cb.source_meta = "file:" + path;
  return cb;
}

void save_reps(const RepFile& reps, const std::string& path) {
  if (reps.values.size() != static_cast<std::size_t>(reps.n) * reps.d)
    throw ShapeError("save_reps: value count does not match n*d");
  if (reps.labels && reps.labels->size() != reps.n)
    throw ShapeError("save_reps: label count does not match n");
  std::vector<std::uint8_t> out{'G', 'R', 'E', 'P'};
  io::put_u32(out, kRepsVersion);
  io::put_u32(out, reps.n);
  io::put_u32(out, reps.d);
  io::put_u32(out, reps.labels ? 1 : 0);
  for (float v : reps.values) io::put_f32(out, v);
  if (reps.labels)
    for (std::int32_t l : *reps.labels) io::put_i32(out, l);
  io::write_file(path, out);
}

RepFile load_reps(const std::string& path) {
  auto bytes = io::read_file(path);
  io::Reader r(bytes.data(), bytes.size(), path);
  r.expect_magic("GREP");
  std::uint32_t version = r.u32();
  if (version != kRepsVersion)
    throw IoError(path + ": unsupported representation-file version " + std::to_string(version));
  RepFile reps;
  reps.n = r.u32();
  reps.d = r.u32();
  std::uint32_t has_labels = r.u32();
  reps.values.resize(static_cast<std::size_t>(reps.n) * reps.d);
  for (auto& v : reps.values) v = r.f32();
  if (has_labels != 0) {
    std::vector<std::int32_t> labels(reps.n);
    for (auto& l : labels) l = r.i32();
    reps.labels = std::move(labels);
  }
  return reps;
}

void save_image_dump(const ImageDump& dump, const std::string& path) {
  if (dump.images.empty()) throw ValueError("save_image_dump: no images");
  int h = dump.images[0].height, w = dump.images[0].width;
  for (const auto& img : dump.images)
    if (img.height != h || img.width != w)
      throw ShapeError("save_image_dump: images disagree on size");
  if (dump.labels && dump.labels->size() != dump.images.size())
    throw ShapeError("save_image_dump: label count does not match image count");
  std::vector<std::uint8_t> out{'G', 'I', 'M', 'G'};
  io::put_u32(out, kImageDumpVersion);
  io::put_u32(out, static_cast<std::uint32_t>(dump.images.size()));
  io::put_u32(out, static_cast<std::uint32_t>(h));
  io::put_u32(out, static_cast<std::uint32_t>(w));
  io::put_u32(out, dump.labels ? 1 : 0);
  for (const auto& img : dump.images)
    for (float v : img.data) io::put_f32(out, v);
  if (dump.labels)
    for (std::int32_t l : *dump.labels) io::put_i32(out, l);
  io::write_file(path, out);
}

ImageDump load_image_dump(const std::string& path) {
  auto bytes = io::read_file(path);
  io::Reader r(bytes.data(), bytes.size(), path);
  r.expect_magic("GIMG");
  std::uint32_t version = r.u32();
  if (version != kImageDumpVersion)
    throw IoError(path + ": unsupported image-dump version " + std::to_string(version));
  std::uint32_t n = r.u32();
  int h = static_cast<int>(r.u32());
  int w = static_cast<int>(r.u32());
  std::uint32_t has_labels = r.u32();
  if (h <= 0 || w <= 0) throw IoError(path + ": empty image geometry");
  ImageDump dump;
  dump.images.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    Image img(h, w);
    for (auto& v : img.data) v = r.f32();
    dump.images.push_back(std::move(img));
  }
  if (has_labels != 0) {
    std::vector<std::int32_t> labels(n);
    for (auto& l : labels) l = r.i32();
    dump.labels = std::move(labels);
  }
  return dump;
}

std::string format_float(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

CsvWriter::CsvWriter(const std::string& path, const std::string& header)
    : out_(path, std::ios::trunc), path_(path) {
  if (!out_) throw IoError("CsvWriter: cannot open '" + path + "'");
  columns_ = static_cast<std::size_t>(std::count(header.begin(), header.end(), ',')) + 1;
  out_ << header << "\n";
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  if (cells.size() != columns_)
    throw ValueError("CsvWriter: row has " + std::to_string(cells.size()) + " cells, header has " +
                     std::to_string(columns_));
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out_ << ',';
    out_ << cells[i];
  }
  out_ << "\n";
  if (!out_) throw IoError("CsvWriter: write failure on '" + path_ + "'");
}

void CsvWriter::flush() { out_.flush(); }

} // namespace gcrl
