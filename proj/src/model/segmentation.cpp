#include "dyrate/model/segmentation.hpp"

#include <string>

#include "dyrate/error.hpp"

namespace dyrate {

std::string segment_name(Segment s) {
  switch (s) {
    case Segment::kSys: return "sys";
    case Segment::kImg: return "img";
    case Segment::kIns: return "ins";
    case Segment::kRes: return "res";
  }
  return "?";
}

Segment parse_segment(const std::string& name) {
  for (Segment s : kSegments) {
    if (segment_name(s) == name) return s;
  }
  throw ConfigError("unknown segment type '" + name + "'");
}

TokenSegmentation::TokenSegmentation(std::vector<Span> spans)
    : spans_(std::move(spans)) {
  std::size_t cursor = 0;
  int last_type = -1;
  for (const Span& s : spans_) {
    if (s.start != cursor || s.end < s.start) {
      throw ConfigError("segmentation spans must be contiguous from 0");
    }
    const int type = static_cast<int>(s.type);
    if (type <= last_type) {
      throw ConfigError("segment types must be unique and ordered sys, img, ins, res");
    }
    last_type = type;
    cursor = s.end;
  }
}

TokenSegmentation TokenSegmentation::from_lengths(std::size_t n_sys,
                                                  std::size_t n_img,
                                                  std::size_t n_ins,
                                                  std::size_t n_res) {
  std::vector<Span> spans;
  std::size_t cursor = 0;
  const std::size_t lengths[] = {n_sys, n_img, n_ins, n_res};
  for (std::size_t i = 0; i < 4; ++i) {
    if (lengths[i] == 0) continue;
    spans.push_back({kSegments[i], cursor, cursor + lengths[i]});
    cursor += lengths[i];
  }
  return TokenSegmentation(std::move(spans));
}

Segment TokenSegmentation::at(std::size_t position) const {
  for (const Span& s : spans_) {
    if (position >= s.start && position < s.end) return s.type;
  }
  throw ConfigError("position " + std::to_string(position) +
                    " outside segmentation of length " + std::to_string(length()));
}

std::optional<Span> TokenSegmentation::find(Segment type) const {
  for (const Span& s : spans_) {
    if (s.type == type) return s;
  }
  return std::nullopt;
}

std::size_t TokenSegmentation::count(Segment type) const {
  const auto s = find(type);
  return s ? s->size() : 0;
}

void TokenSegmentation::extend_response(std::size_t n) {
  if (n == 0) return;
  if (!spans_.empty() && spans_.back().type == Segment::kRes) {
    spans_.back().end += n;
  } else {
    const std::size_t start = length();
    spans_.push_back({Segment::kRes, start, start + n});
  }
}

}  // namespace dyrate
