#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace dyrate {

enum class Segment : std::uint8_t { kSys = 0, kImg = 1, kIns = 2, kRes = 3 };

inline constexpr std::array<Segment, 4> kSegments = {
    Segment::kSys, Segment::kImg, Segment::kIns, Segment::kRes};

std::string segment_name(Segment s);
// Accepts "sys", "img", "ins", "res"; throws ConfigError otherwise.
Segment parse_segment(const std::string& name);

struct Span {
  Segment type;
  std::size_t start;
  std::size_t end;  // exclusive

  std::size_t size() const { return end - start; }
  bool operator==(const Span&) const = default;
};

// Contiguous, ordered spans covering [0, length). sys, img and ins occur at
// most once and in that order; res, if present, is last.
class TokenSegmentation {
 public:
  TokenSegmentation() = default;
  explicit TokenSegmentation(std::vector<Span> spans);

  // Empty segments are omitted.
  static TokenSegmentation from_lengths(std::size_t n_sys, std::size_t n_img,
                                        std::size_t n_ins, std::size_t n_res = 0);

  const std::vector<Span>& spans() const { return spans_; }
  std::size_t length() const { return spans_.empty() ? 0 : spans_.back().end; }
  Segment at(std::size_t position) const;
  std::optional<Span> find(Segment type) const;
  std::size_t count(Segment type) const;

  // Grows (or opens) the trailing res span.
  void extend_response(std::size_t n = 1);

  bool operator==(const TokenSegmentation&) const = default;

 private:
  std::vector<Span> spans_;
};

}  // namespace dyrate
