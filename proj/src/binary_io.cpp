#include "dyrate/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "dyrate/error.hpp"

namespace dyrate {

void ByteWriter::u16(std::uint16_t v) {
  for (int i = 0; i < 2; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::raw(const std::string& s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

void ByteReader::need(std::size_t n) const {
  if (remaining() < n) throw IoError(truncated_);
}

std::uint16_t ByteReader::u16() {
  need(2);
  std::uint16_t v = 0;
  for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>((*bytes_)[offset_++] << (8 * i));
  return v;
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>((*bytes_)[offset_++]) << (8 * i);
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>((*bytes_)[offset_++]) << (8 * i);
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::raw(std::size_t n) {
  need(n);
  std::string s(reinterpret_cast<const char*>(bytes_->data() + offset_), n);
  offset_ += n;
  return s;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<std::uint8_t> make_container(const std::array<char, 4>& magic,
                                         std::uint16_t version,
                                         const std::string& header,
                                         const std::vector<std::uint8_t>& payload) {
  ByteWriter w;
  w.raw(std::string(magic.data(), 4));
  w.u16(version);
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.raw(header);
  std::vector<std::uint8_t> out = w.bytes();
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

Container parse_container(std::vector<std::uint8_t> bytes,
                          const std::array<char, 4>& magic,
                          const std::string& bad_magic_message) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), magic.data(), 4) != 0) {
    throw IoError(bad_magic_message);
  }
  Container c;
  c.bytes = std::move(bytes);
  ByteReader r(c.bytes, 4);
  r.set_truncated_message("truncated header");
  c.version = r.u16();
  const std::uint32_t len = r.u32();
  c.header = r.raw(len);
  c.payload_offset = 4 + 2 + 4 + len;
  return c;
}

}  // namespace dyrate
