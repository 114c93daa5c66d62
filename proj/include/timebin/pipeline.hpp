#pragma once

#include <algorithm>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "timebin/certify.hpp"
#include "timebin/framing.hpp"
#include "timebin/parallel.hpp"
#include "timebin/timetag.hpp"

namespace timebin {

/// Per-block, per-delta_t certification record.
struct Certificate {
  std::size_t block_id = 0;
  Picoseconds delta_t_ps = 0;
  Picoseconds block_start_ps = 0;
  Picoseconds block_len_ps = 0;
  Picoseconds window_ps = 0;
  MultiClickPolicy policy = MultiClickPolicy::RandomOutcome;
  std::optional<Picoseconds> offset_ps;
  std::size_t pairs = 0;
  CoincidenceTables tables;
  std::optional<CertifyResult> result;
  std::string error;
};

struct AnalysisConfig {
  FrameConfig frame;
  std::vector<Picoseconds> delta_ts{540};
  Picoseconds block_len = 200 * kPicosecondsPerSecond;
  std::optional<Picoseconds> offset;
  OffsetParams offset_params;
  /// Count all detections per frame (not just matched ones) for the multi-click policy.
  bool full_stream_occupancy = true;
  int bootstrap_resamples = 0;
  unsigned threads = 1;

  void validate() const {
    if (block_len <= 0) throw Error(Errc::InvalidConfig, "block length must be > 0");
    if (delta_ts.empty()) throw Error(Errc::InvalidConfig, "at least one delta_t is required");
    for (Picoseconds dt : delta_ts) {
      FrameConfig f = frame;
      f.delta_t = dt;
      f.validate();
    }
  }
};

/// Number formatting shared by every output: 12 significant digits.
inline std::string format_number(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", x);
  return buf;
}

inline double round_significant(double x) { return std::stod(format_number(x)); }

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline nlohmann::json certificate_to_json(const Certificate& c) {
  using nlohmann::json;
  json j;
  j["block_id"] = c.block_id;
  j["delta_t_ps"] = c.delta_t_ps;
  j["block_start_ps"] = c.block_start_ps;
  j["block_len_ps"] = c.block_len_ps;
  j["window_ps"] = c.window_ps;
  j["policy"] = to_string(c.policy);
  j["offset_ps"] = c.offset_ps ? json(*c.offset_ps) : json(nullptr);
  json diag = {{"clamped", c.result ? c.result->bounds.clamped : false},
               {"multi_click_count", c.tables.multi_click_count},
               {"multi_click_discarded", c.tables.multi_click_discarded},
               {"discarded_slot0", c.tables.discarded_slot0},
               {"cross_frame", c.tables.cross_frame},
               {"mixed_arm", c.tables.totals.mixed},
               {"polarization_rejected", c.tables.polarization_rejected},
               {"pairs", c.pairs},
               {"toa_coincidences", c.tables.toa_sum()},
               {"tsup_coincidences", c.tables.tsup_sum()}};
  diag["error"] = c.error.empty() ? json(nullptr) : json(c.error);
  if (c.result) {
    const auto& r = *c.result;
    json p = json::array(), l = json::array();
    for (double x : r.bounds.p) p.push_back(round_significant(x));
    for (double x : r.bounds.lower) l.push_back(round_significant(x));
    j["p"] = p;
    j["L"] = l;
    j["L_primed"] = round_significant(r.bounds.lower_primed);
    j["F_cf"] = round_significant(r.fidelity_closed_form);
    j["F_sdp"] = round_significant(r.fidelity_sdp);
    j["schmidt_number"] = r.schmidt_number;
    j["stderr"] = r.standard_error ? json(round_significant(*r.standard_error)) : json(nullptr);
  } else {
    j["p"] = nullptr;
    j["L"] = nullptr;
    j["L_primed"] = nullptr;
    j["F_cf"] = nullptr;
    j["F_sdp"] = nullptr;
    j["schmidt_number"] = nullptr;
    j["stderr"] = nullptr;
  }
  j["diagnostics"] = diag;
  return j;
}

inline std::string summary_csv(std::span<const Certificate> certs) {
  std::string out = "block_start_ps,F_cf,F_sdp,schmidt_number,stderr\r\n";
  for (const auto& c : certs) {
    out += std::to_string(c.block_start_ps);
    if (c.result) {
      out += "," + format_number(c.result->fidelity_closed_form) + "," + format_number(c.result->fidelity_sdp) + "," +
             std::to_string(c.result->schmidt_number) + "," +
             (c.result->standard_error ? format_number(*c.result->standard_error) : std::string());
    } else {
      out += ",,,,";
    }
    out += "\r\n";
  }
  return out;
}

/// Rows = blocks, columns = delta_t values, cells = F_sdp (empty when the
/// block could not be certified).
inline std::string sweep_csv(const std::vector<std::vector<Certificate>>& by_block, std::span<const Picoseconds> delta_ts) {
  std::string out = "block_start_ps";
  for (Picoseconds dt : delta_ts) out += "," + csv_field("F_sdp_dt" + std::to_string(dt) + "ps");
  out += "\r\n";
  for (const auto& row : by_block) {
    if (row.empty()) continue;
    out += std::to_string(row.front().block_start_ps);
    for (const auto& c : row) out += "," + (c.result ? format_number(c.result->fidelity_sdp) : std::string());
    out += "\r\n";
  }
  return out;
}

namespace detail {

inline std::span<const DetectionEvent> time_slice(std::span<const DetectionEvent> s, Picoseconds lo, Picoseconds hi) {
  auto cmp = [](const DetectionEvent& e, Picoseconds t) { return e.timestamp < t; };
  auto first = std::lower_bound(s.begin(), s.end(), lo, cmp);
  auto last = std::lower_bound(first, s.end(), hi, cmp);
  return s.subspan(static_cast<std::size_t>(first - s.begin()), static_cast<std::size_t>(last - first));
}

}  // namespace detail

/// Splits stream A's time axis into blocks; for each block estimates (or
/// takes) the clock offset, matches coincidences once, then frames and
/// certifies the block for every requested delta_t. Returns [block][delta_t].
/// NoPeak and EmptySetting are reported per record, not thrown.
inline std::vector<std::vector<Certificate>> analyze_streams(std::span<const DetectionEvent> stream_a,
                                                             std::span<const DetectionEvent> stream_b,
                                                             const ChannelMap& channels, const AnalysisConfig& config) {
  config.validate();
  channels.validate();
  if (stream_a.empty()) return {};
  const Picoseconds len = config.block_len;
  const auto blocks = static_cast<std::size_t>(stream_a.back().timestamp / len + 1);
  const Picoseconds search = config.offset_params.search_half_width;

  std::vector<std::vector<Certificate>> out(blocks);
  const unsigned outer = std::min<unsigned>(config.threads, static_cast<unsigned>(blocks));
  const unsigned inner = blocks == 1 ? config.threads : 1;
  parallel_for(blocks, outer, [&](std::size_t blk) {
    const Picoseconds start = static_cast<Picoseconds>(blk) * len;
    const auto block_a = detail::time_slice(stream_a, start, start + len);

    std::vector<Certificate> row;
    for (Picoseconds dt : config.delta_ts) {
      Certificate c;
      c.block_id = blk;
      c.delta_t_ps = dt;
      c.block_start_ps = start;
      c.block_len_ps = len;
      c.window_ps = config.frame.window;
      c.policy = config.frame.policy;
      row.push_back(c);
    }
    auto fail_all = [&](const std::string& what) {
      for (auto& c : row) c.error = what;
    };

    std::optional<Picoseconds> offset = config.offset;
    if (!offset) {
      try {
        offset = estimate_offset(block_a, detail::time_slice(stream_b, start - search, start + len + search),
                                 config.offset_params)
                     .offset;
      } catch (const Error& e) {
        if (e.code() != Errc::NoPeak) throw;
        fail_all(e.what());
        out[blk] = std::move(row);
        return;
      }
    }
    const auto block_b = detail::time_slice(stream_b, start + *offset, start + len + *offset);
    const auto pairs = match_coincidences_parallel(block_a, block_b, *offset, config.frame.window, inner);

    for (std::size_t k = 0; k < config.delta_ts.size(); ++k) {
      auto& c = row[k];
      c.offset_ps = offset;
      c.pairs = pairs.size();
      FrameConfig frame = config.frame;
      frame.delta_t = config.delta_ts[k];
      const FrameOccupancy occupancy(stream_a, stream_b, *offset, channels, frame);
      c.tables = accumulate_tables(pairs, channels, frame, config.full_stream_occupancy ? &occupancy : nullptr, inner);
      try {
        CertifyOptions opt;
        opt.bootstrap_resamples = config.bootstrap_resamples;
        opt.seed = detail::mix64(frame.seed ^ detail::mix64(blk));
        opt.threads = inner;
        c.result = certify_tables(c.tables, opt);
      } catch (const Error& e) {
        if (e.code() != Errc::EmptySetting) throw;
        c.error = e.what();
      }
    }
    out[blk] = std::move(row);
  });
  return out;
}

}  // namespace timebin
