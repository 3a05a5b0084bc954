#include "dyrate/workload/trace.hpp"

#include <cmath>
#include <cstdio>
#include <json.hpp>

#include "dyrate/binary_io.hpp"
#include "dyrate/error.hpp"
#include "dyrate/pruner/pruner.hpp"

namespace dyrate {
namespace {

constexpr std::array<char, 4> kMagic = {'D', 'Y', 'T', 'R'};
constexpr std::uint16_t kVersion = 1;
constexpr double kRowSumTolerance = 1e-3;

}  // namespace

void AttentionTrace::validate() const {
  if (n_heads == 0 || n_layers == 0) throw ConfigError("trace: n_heads and n_layers must be positive");
  if (records.size() != steps * n_layers) {
    throw ConfigError("trace: expected " + std::to_string(steps * n_layers) + " records, got " +
                      std::to_string(records.size()));
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const std::string where = "trace record " + std::to_string(i);
    if (r.weights.rank() != 2 || r.weights.rows() != n_heads ||
        r.weights.cols() != r.positions.size()) {
      throw ConfigError(where + ": weights must be [n_heads, n_positions]");
    }
    for (std::size_t j = 0; j < r.positions.size(); ++j) {
      if (j > 0 && r.positions[j] <= r.positions[j - 1]) {
        throw ConfigError(where + ": positions not strictly increasing");
      }
      if (r.positions[j] >= segmentation.length()) {
        throw ConfigError(where + ": position outside the segmentation");
      }
    }
  }
}

std::vector<std::uint8_t> encode_trace(const AttentionTrace& trace) {
  trace.validate();
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& s : trace.segmentation.spans()) {
    spans.push_back({{"type", segment_name(s.type)}, {"start", s.start}, {"end", s.end}});
  }
  const nlohmann::json header = {{"format_version", kVersion},
                                 {"n_heads", trace.n_heads},
                                 {"n_layers", trace.n_layers},
                                 {"steps", trace.steps},
                                 {"segmentation", spans}};
  ByteWriter w;
  for (const auto& r : trace.records) {
    w.f32(static_cast<float>(r.positions.size()));
    for (auto p : r.positions) w.f32(static_cast<float>(p));
    for (double v : r.weights.values()) w.f32(static_cast<float>(v));
  }
  return make_container(kMagic, kVersion, header.dump(), w.bytes());
}

AttentionTrace decode_trace(std::vector<std::uint8_t> bytes) {
  Container c = parse_container(std::move(bytes), kMagic, "not a trace file");
  if (c.version != kVersion) {
    throw IoError("unsupported trace version " + std::to_string(c.version));
  }
  AttentionTrace trace;
  try {
    const auto header = nlohmann::json::parse(c.header);
    trace.n_heads = header.at("n_heads").get<std::size_t>();
    trace.n_layers = header.at("n_layers").get<std::size_t>();
    trace.steps = header.at("steps").get<std::size_t>();
    std::vector<Span> spans;
    for (const auto& s : header.at("segmentation")) {
      spans.push_back({parse_segment(s.at("type").get<std::string>()),
                       s.at("start").get<std::size_t>(), s.at("end").get<std::size_t>()});
    }
    trace.segmentation = TokenSegmentation(std::move(spans));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed trace header: ") + e.what());
  } catch (const ConfigError& e) {
    throw IoError(std::string("malformed trace header: ") + e.what());
  }

  ByteReader r(c.bytes, c.payload_offset);
  r.set_truncated_message("truncated payload");
  const std::size_t n_records = trace.steps * trace.n_layers;
  trace.records.reserve(n_records);
  for (std::size_t i = 0; i < n_records; ++i) {
    const float count_f = r.f32();
    if (!(count_f >= 0.0f) || count_f != std::floor(count_f)) {
      throw IoError("trace record " + std::to_string(i) + ": bad key count");
    }
    const auto count = static_cast<std::size_t>(count_f);
    TraceRecord rec;
    rec.positions.resize(count);
    for (auto& p : rec.positions) p = static_cast<std::size_t>(r.f32());
    rec.weights = Tensor({trace.n_heads, count});
    for (auto& v : rec.weights.data()) v = r.f32();
    trace.records.push_back(std::move(rec));
  }
  if (r.remaining() != 0) throw IoError("trailing bytes after trace payload");
  try {
    trace.validate();
  } catch (const ConfigError& e) {
    throw IoError(e.what());
  }
  return trace;
}

void write_trace(const AttentionTrace& trace, const std::filesystem::path& path) {
  write_file(path, encode_trace(trace));
}

AttentionTrace read_trace(const std::filesystem::path& path) {
  try {
    return decode_trace(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

TraceShares trace_shares(const AttentionTrace& trace) {
  trace.validate();
  TraceShares out;
  out.features.reserve(trace.records.size());
  const std::size_t H = trace.n_heads;
  for (std::size_t i = 0; i < trace.records.size(); ++i) {
    const auto& rec = trace.records[i];
    for (std::size_t h = 0; h < H; ++h) {
      double s = 0.0;
      for (double v : rec.weights.row(h)) s += v;
      if (std::abs(s - 1.0) > kRowSumTolerance) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "trace record %zu: head %zu row sums to %.6g", i, h, s);
        throw NumericError(buf);
      }
    }
    out.features.push_back(segment_shares(rec.weights, rec.positions, trace.segmentation));
  }

  const std::size_t split = trace.n_layers / 2;
  for (std::size_t step = 0; step < trace.steps; ++step) {
    for (int g = 0; g < 2; ++g) {
      const std::size_t lo = g == 0 ? 0 : split;
      const std::size_t hi = g == 0 ? split : trace.n_layers;
      ShareRow row{step, g == 0 ? "shallow" : "deep", {0, 0, 0, 0}};
      if (hi > lo) {
        for (std::size_t l = lo; l < hi; ++l) {
          const Tensor& f = out.features[step * trace.n_layers + l];
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t s = 0; s < 4; ++s) row.shares[s] += f[h * 4 + s];
          }
        }
        for (auto& v : row.shares) v /= static_cast<double>((hi - lo) * H);
      }
      out.table.push_back(row);
    }
  }
  return out;
}

std::string share_table_csv(const TraceShares& shares) {
  std::string out = "step,group,sys,img,ins,res\n";
  char buf[256];
  for (const auto& row : shares.table) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.9g,%.9g,%.9g,%.9g\n", row.step, row.group.c_str(),
                  row.shares[0], row.shares[1], row.shares[2], row.shares[3]);
    out += buf;
  }
  return out;
}

}  // namespace dyrate
