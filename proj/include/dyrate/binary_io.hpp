#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dyrate {

// Little-endian byte buffer writer/reader, independent of host byte order.
class ByteWriter {
 public:
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void raw(const std::string& s);

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes, std::size_t offset = 0)
      : bytes_(&bytes), offset_(offset) {}

  // Each getter throws IoError(truncated_message) past the end.
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string raw(std::size_t n);

  std::size_t remaining() const { return bytes_->size() - offset_; }
  void set_truncated_message(std::string message) { truncated_ = std::move(message); }

 private:
  void need(std::size_t n) const;

  const std::vector<std::uint8_t>* bytes_;
  std::size_t offset_;
  std::string truncated_ = "truncated file";
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

// Container shared by checkpoints and traces:
//   4-byte magic, u16 version, u32 header length, JSON header, payload.
struct Container {
  std::uint16_t version = 0;
  std::string header;
  std::vector<std::uint8_t> bytes;  // whole file
  std::size_t payload_offset = 0;
};

std::vector<std::uint8_t> make_container(const std::array<char, 4>& magic,
                                         std::uint16_t version,
                                         const std::string& header,
                                         const std::vector<std::uint8_t>& payload);

// Throws IoError(bad_magic_message) when the magic differs.
Container parse_container(std::vector<std::uint8_t> bytes,
                          const std::array<char, 4>& magic,
                          const std::string& bad_magic_message);

}  // namespace dyrate
