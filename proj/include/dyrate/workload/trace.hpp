#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dyrate/model/segmentation.hpp"
#include "dyrate/numerics/tensor.hpp"

namespace dyrate {

// Attention of one query at one layer over its alive keys.
struct TraceRecord {
  std::vector<std::size_t> positions;  // strictly increasing
  Tensor weights;                      // [H, positions.size()]

  bool operator==(const TraceRecord&) const = default;
};

// Records are stored step-major: record (step, layer) sits at
// step * n_layers + layer. Values are held as f64 but stored as f32, so
// only f32-representable values survive a round trip exactly.
struct AttentionTrace {
  std::size_t n_heads = 0;
  std::size_t n_layers = 0;
  std::size_t steps = 0;
  // Covers every position any record refers to.
  TokenSegmentation segmentation;
  std::vector<TraceRecord> records;

  const TraceRecord& at(std::size_t step, std::size_t layer) const {
    return records[step * n_layers + layer];
  }
  // Throws ConfigError on inconsistent counts or shapes.
  void validate() const;
  bool operator==(const AttentionTrace&) const = default;
};

std::vector<std::uint8_t> encode_trace(const AttentionTrace& trace);
// Throws IoError("not a trace file"), IoError("truncated payload") and
// IoError for version or header mismatches.
AttentionTrace decode_trace(std::vector<std::uint8_t> bytes);
void write_trace(const AttentionTrace& trace, const std::filesystem::path& path);
AttentionTrace read_trace(const std::filesystem::path& path);

struct ShareRow {
  std::size_t step;
  std::string group;  // "shallow" or "deep"
  // Mean over heads and layers of the group, in sys, img, ins, res order.
  std::array<double, 4> shares;
};

struct TraceShares {
  // Per record, the [H*4] segment_shares feature.
  std::vector<Tensor> features;
  // Two rows per step: layers below n_layers / 2, then the rest. A group
  // with no layers reports zeros.
  std::vector<ShareRow> table;
};

// Throws NumericError naming the record index when a head's row sum is
// more than 1e-3 away from 1.
TraceShares trace_shares(const AttentionTrace& trace);
std::string share_table_csv(const TraceShares& shares);

}  // namespace dyrate
