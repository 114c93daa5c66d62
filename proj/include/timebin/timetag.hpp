#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "timebin/channel_map.hpp"
#include "timebin/error.hpp"
#include "timebin/parallel.hpp"

namespace timebin {

struct DetectionEvent {
  Picoseconds timestamp = 0;
  std::uint16_t channel = 0;

  friend auto operator<=>(const DetectionEvent&, const DetectionEvent&) = default;
};

/// Two matched clicks; delta = tB - tA after removing the clock offset.
struct CoincidencePair {
  DetectionEvent a;
  DetectionEvent b;
  Picoseconds delta = 0;

  friend bool operator==(const CoincidencePair&, const CoincidencePair&) = default;
};

// ---------------------------------------------------------------------------
// TTAG binary format
//
//   header (16 bytes, little-endian):
//     magic "TTAG" | version u16 (=1) | channel-count u16 | record-count u64
//   records (16 bytes each):
//     timestamp u64 (ps) | channel u16 | reserved 6 bytes (zero)
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kTtagMagic{'T', 'T', 'A', 'G'};
inline constexpr std::uint16_t kTtagVersion = 1;
inline constexpr std::size_t kTtagHeaderSize = 16;
inline constexpr std::size_t kTtagRecordSize = 16;

struct TtagHeader {
  std::uint16_t version = kTtagVersion;
  std::uint16_t channel_count = 0;
  std::uint64_t record_count = 0;
};

namespace detail {

template <typename T>
inline void store_le(std::uint8_t* out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out[i] = static_cast<std::uint8_t>(static_cast<std::uint64_t>(value) >> (8 * i));
}

template <typename T>
inline T load_le(const std::uint8_t* in) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(in[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_stream(std::span<const DetectionEvent> events, std::uint16_t channel_count) {
  std::vector<std::uint8_t> out(kTtagHeaderSize + events.size() * kTtagRecordSize, 0);
  std::memcpy(out.data(), kTtagMagic.data(), kTtagMagic.size());
  detail::store_le<std::uint16_t>(out.data() + 4, kTtagVersion);
  detail::store_le<std::uint16_t>(out.data() + 6, channel_count);
  detail::store_le<std::uint64_t>(out.data() + 8, events.size());
  std::uint8_t* rec = out.data() + kTtagHeaderSize;
  for (const auto& e : events) {
    if (e.timestamp < 0) throw Error(Errc::InvalidRecord, "negative timestamp cannot be serialized");
    detail::store_le<std::uint64_t>(rec, static_cast<std::uint64_t>(e.timestamp));
    detail::store_le<std::uint16_t>(rec + 8, e.channel);
    rec += kTtagRecordSize;
  }
  return out;
}

inline TtagHeader parse_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kTtagHeaderSize) throw Error(Errc::MalformedHeader, "stream shorter than the 16-byte header");
  if (std::memcmp(bytes.data(), kTtagMagic.data(), kTtagMagic.size()) != 0)
    throw Error(Errc::MalformedHeader, "bad magic (expected \"TTAG\")");
  TtagHeader h;
  h.version = detail::load_le<std::uint16_t>(bytes.data() + 4);
  h.channel_count = detail::load_le<std::uint16_t>(bytes.data() + 6);
  h.record_count = detail::load_le<std::uint64_t>(bytes.data() + 8);
  if (h.version != kTtagVersion) throw Error(Errc::MalformedHeader, "unsupported version " + std::to_string(h.version));
  return h;
}

/// Decodes a TTAG byte stream. Equal consecutive timestamps are allowed;
/// decreasing ones are not. Decoding runs on `threads` workers over
/// contiguous record ranges; the result does not depend on the thread count.
inline std::vector<DetectionEvent> parse_stream(std::span<const std::uint8_t> bytes, unsigned threads = 1) {
  const TtagHeader header = parse_header(bytes);
  const std::size_t payload = bytes.size() - kTtagHeaderSize;
  if (header.record_count > payload / kTtagRecordSize)
    throw Error(Errc::TruncatedRecord, "header declares " + std::to_string(header.record_count) + " records but only " +
                                           std::to_string(payload / kTtagRecordSize) + " complete records are present");
  if (payload != header.record_count * kTtagRecordSize)
    throw Error(Errc::InvalidRecord, "trailing bytes after the declared records");

  const std::size_t n = header.record_count;
  std::vector<DetectionEvent> events(n);
  const std::uint8_t* base = bytes.data() + kTtagHeaderSize;

  constexpr std::size_t kChunk = 1 << 18;
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t lo = c * kChunk;
    const std::size_t hi = std::min(n, lo + kChunk);
    for (std::size_t i = lo; i < hi; ++i) {
      const std::uint8_t* rec = base + i * kTtagRecordSize;
      const auto raw = detail::load_le<std::uint64_t>(rec);
      if (raw > static_cast<std::uint64_t>(std::numeric_limits<Picoseconds>::max()))
        throw Error(Errc::InvalidRecord, "record " + std::to_string(i) + ": timestamp exceeds 2^63-1 ps");
      for (std::size_t k = 10; k < kTtagRecordSize; ++k)
        if (rec[k] != 0) throw Error(Errc::InvalidRecord, "record " + std::to_string(i) + ": reserved bytes not zero");
      events[i] = {static_cast<Picoseconds>(raw), detail::load_le<std::uint16_t>(rec + 8)};
    }
  });
  for (std::size_t i = 1; i < n; ++i) {
    if (events[i].timestamp < events[i - 1].timestamp)
      throw Error(Errc::NonMonotonicTimestamp, "record " + std::to_string(i) + " precedes record " + std::to_string(i - 1));
  }
  return events;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size)))
    throw Error(Errc::Io, "failed reading " + path.string());
  return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::Io, "cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::Io, "failed writing " + path.string());
}

inline std::vector<DetectionEvent> read_ttag_file(const std::filesystem::path& path, unsigned threads = 1) {
  const auto bytes = read_file_bytes(path);
  return parse_stream(bytes, threads);
}

inline void write_ttag_file(const std::filesystem::path& path, std::span<const DetectionEvent> events,
                            std::uint16_t channel_count) {
  const auto bytes = serialize_stream(events, channel_count);
  write_file_bytes(path, bytes);
}

// ---------------------------------------------------------------------------
// Clock offset estimation
// ---------------------------------------------------------------------------

struct OffsetParams {
  Picoseconds search_half_width = 10'000'000;
  Picoseconds hist_bin = 100;
  /// Use every k-th event of stream A.
  std::size_t decimation = 1;
  double significance_sigma = 5.0;
  /// Half width of the window whose median refines the peak position.
  Picoseconds refine_half_width = 1000;
};

struct OffsetEstimate {
  Picoseconds offset = 0;
  Picoseconds peak_bin_center = 0;
  std::uint64_t peak_count = 0;
  double background_mean = 0.0;
  double background_sd = 0.0;
  std::size_t bins = 0;
};

namespace detail {

/// log P(X >= k) for X ~ Poisson(lambda).
inline double log_poisson_upper_tail(std::uint64_t k, double lambda) {
  if (k == 0) return 0.0;
  if (lambda <= 0.0) return -std::numeric_limits<double>::infinity();
  if (static_cast<double>(k) <= lambda) return 0.0;
  const double log_lambda = std::log(lambda);
  double log_term = static_cast<double>(k) * log_lambda - lambda - std::lgamma(static_cast<double>(k) + 1.0);
  double sum = 1.0;
  double ratio_term = 1.0;
  for (std::uint64_t x = k + 1; x < k + 100000; ++x) {
    ratio_term *= lambda / static_cast<double>(x);
    sum += ratio_term;
    if (ratio_term < 1e-17 * sum) break;
  }
  return log_term + std::log(sum);
}

}  // namespace detail

/// Finds the clock offset (tB - tA) as the centre of the most populated bin of
/// the pairwise-difference histogram over [-W, W). The peak must exceed the
/// non-peak mean by `significance_sigma` standard deviations; in sparse
/// histograms it must also be that unlikely under a Poisson background after
/// correcting for the number of bins searched.
inline OffsetEstimate estimate_offset(std::span<const DetectionEvent> stream_a, std::span<const DetectionEvent> stream_b,
                                      const OffsetParams& params) {
  const Picoseconds half = params.search_half_width;
  const Picoseconds bin = params.hist_bin;
  if (bin <= 0 || half <= 0 || bin > half)
    throw Error(Errc::InvalidConfig, "offset search requires 0 < hist_bin <= search_half_width");
  if (params.decimation == 0) throw Error(Errc::InvalidConfig, "decimation must be >= 1");
  if (stream_a.empty() || stream_b.empty()) throw Error(Errc::NoPeak, "empty stream");

  const auto nbins = static_cast<std::size_t>((2 * half + bin - 1) / bin);
  constexpr std::size_t kDenseLimit = std::size_t{1} << 24;
  const bool dense = nbins <= kDenseLimit;
  std::vector<std::uint32_t> counts(dense ? nbins : 0, 0);
  std::vector<std::uint64_t> sparse;

  std::size_t lo = 0;
  for (std::size_t i = 0; i < stream_a.size(); i += params.decimation) {
    const Picoseconds ta = stream_a[i].timestamp;
    while (lo < stream_b.size() && stream_b[lo].timestamp < ta - half) ++lo;
    for (std::size_t j = lo; j < stream_b.size() && stream_b[j].timestamp < ta + half; ++j) {
      const auto idx = static_cast<std::size_t>((stream_b[j].timestamp - ta + half) / bin);
      if (idx >= nbins) continue;
      if (dense)
        ++counts[idx];
      else
        sparse.push_back(idx);
    }
  }

  std::uint64_t total = 0;
  double sumsq = 0.0;
  std::uint64_t peak = 0;
  std::size_t peak_idx = 0;
  auto visit = [&](std::size_t idx, std::uint64_t c) {
    total += c;
    sumsq += static_cast<double>(c) * static_cast<double>(c);
    if (c > peak || (c == peak && idx < peak_idx)) {
      peak = c;
      peak_idx = idx;
    }
  };
  if (dense) {
    for (std::size_t idx = 0; idx < nbins; ++idx)
      if (counts[idx] != 0) visit(idx, counts[idx]);
  } else {
    std::sort(sparse.begin(), sparse.end());
    for (std::size_t k = 0; k < sparse.size();) {
      std::size_t e = k;
      while (e < sparse.size() && sparse[e] == sparse[k]) ++e;
      visit(sparse[k], e - k);
      k = e;
    }
  }
  if (peak == 0) throw Error(Errc::NoPeak, "no time differences within the search range");

  OffsetEstimate est;
  est.bins = nbins;
  est.peak_count = peak;
  const double others = static_cast<double>(nbins - 1);
  if (others > 0) {
    est.background_mean = static_cast<double>(total - peak) / others;
    const double var = (sumsq - static_cast<double>(peak) * static_cast<double>(peak)) / others -
                       est.background_mean * est.background_mean;
    est.background_sd = std::sqrt(std::max(0.0, var));
  }
  est.offset = -half + static_cast<Picoseconds>(peak_idx) * bin + bin / 2;

  const double k = params.significance_sigma;
  if (!(static_cast<double>(peak) > est.background_mean + k * est.background_sd))
    throw Error(Errc::NoPeak, "peak " + std::to_string(peak) + " not above mean + " + std::to_string(k) + " sd");
  const double log_p_threshold = std::log(0.5 * std::erfc(k / std::sqrt(2.0)));
  const double log_p_peak = detail::log_poisson_upper_tail(peak, est.background_mean) + std::log(static_cast<double>(nbins));
  if (log_p_peak > log_p_threshold)
    throw Error(Errc::NoPeak, "peak " + std::to_string(peak) + " is consistent with Poisson background");

  // Refine to the median difference, re-centering the window until it settles.
  est.peak_bin_center = est.offset;
  const Picoseconds reach = std::max(params.refine_half_width, bin);
  std::vector<Picoseconds> near;
  lo = 0;
  for (std::size_t i = 0; i < stream_a.size(); i += params.decimation) {
    const Picoseconds from = stream_a[i].timestamp + est.peak_bin_center - 2 * reach;
    while (lo < stream_b.size() && stream_b[lo].timestamp < from) ++lo;
    for (std::size_t j = lo; j < stream_b.size() && stream_b[j].timestamp <= from + 4 * reach; ++j)
      near.push_back(stream_b[j].timestamp - stream_a[i].timestamp);
  }
  std::sort(near.begin(), near.end());
  Picoseconds center = est.peak_bin_center;
  for (int iter = 0; iter < 64; ++iter) {
    const auto first = std::lower_bound(near.begin(), near.end(), center - reach);
    const auto last = std::upper_bound(near.begin(), near.end(), center + reach);
    if (first == last) break;
    const Picoseconds median = *(first + (last - first) / 2);
    if (median == center) break;
    center = std::clamp(median, est.peak_bin_center - reach, est.peak_bin_center + reach);
  }
  est.offset = center;
  return est;
}

// ---------------------------------------------------------------------------
// Coincidence matching
// ---------------------------------------------------------------------------

namespace detail {

inline void match_range(std::span<const DetectionEvent> a, std::span<const DetectionEvent> b, Picoseconds offset,
                        Picoseconds window, std::vector<CoincidencePair>& out) {
  struct Candidate {
    Picoseconds abs_delta;
    std::uint32_t j;
    std::uint32_t i;
    Picoseconds delta;
  };
  std::vector<Candidate> candidates;
  std::size_t lo = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Picoseconds ta = a[i].timestamp;
    while (lo < b.size() && b[lo].timestamp - offset < ta - window) ++lo;
    for (std::size_t j = lo; j < b.size(); ++j) {
      const Picoseconds d = b[j].timestamp - offset - ta;
      if (d > window) break;
      candidates.push_back({d < 0 ? -d : d, static_cast<std::uint32_t>(j), static_cast<std::uint32_t>(i), d});
    }
  }
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& x, const Candidate& y) {
    if (x.abs_delta != y.abs_delta) return x.abs_delta < y.abs_delta;
    if (x.j != y.j) return x.j < y.j;
    return x.i < y.i;
  });
  std::vector<bool> used_a(a.size(), false), used_b(b.size(), false);
  const std::size_t first = out.size();
  for (const auto& c : candidates) {
    if (used_a[c.i] || used_b[c.j]) continue;
    used_a[c.i] = used_b[c.j] = true;
    out.push_back({a[c.i], b[c.j], c.delta});
  }
  // Report pairs in A-stream order (stable for equal timestamps via B order).
  std::sort(out.begin() + static_cast<std::ptrdiff_t>(first), out.end(), [](const auto& x, const auto& y) {
    if (x.a.timestamp != y.a.timestamp) return x.a.timestamp < y.a.timestamp;
    if (x.a.channel != y.a.channel) return x.a.channel < y.a.channel;
    return x.b.timestamp < y.b.timestamp;
  });
}

}  // namespace detail

/// Greedy one-to-one matching by smallest |delta| (ties go to the earlier B
/// event, then the earlier A event) over candidates with |delta| <= window.
/// Output is ordered by A timestamp.
inline std::vector<CoincidencePair> match_coincidences(std::span<const DetectionEvent> stream_a,
                                                       std::span<const DetectionEvent> stream_b, Picoseconds offset,
                                                       Picoseconds window) {
  if (window <= 0) throw Error(Errc::InvalidConfig, "coincidence window must be > 0");
  std::vector<CoincidencePair> out;
  detail::match_range(stream_a, stream_b, offset, window, out);
  return out;
}

/// Same result as match_coincidences, computed over chunks cut at quiet
/// gaps (> window between consecutive events of the merged stream), which no
/// candidate pair can straddle.
inline std::vector<CoincidencePair> match_coincidences_parallel(std::span<const DetectionEvent> stream_a,
                                                                std::span<const DetectionEvent> stream_b,
                                                                Picoseconds offset, Picoseconds window, unsigned threads,
                                                                std::size_t target_chunk_events = 1 << 16) {
  if (window <= 0) throw Error(Errc::InvalidConfig, "coincidence window must be > 0");
  struct Cut {
    std::size_t a, b;
  };
  std::vector<Cut> cuts{{0, 0}};
  {
    std::size_t i = 0, j = 0, since_cut = 0;
    bool have_prev = false;
    Picoseconds prev = 0;
    while (i < stream_a.size() || j < stream_b.size()) {
      const bool take_a =
          j >= stream_b.size() || (i < stream_a.size() && stream_a[i].timestamp <= stream_b[j].timestamp - offset);
      const Picoseconds t = take_a ? stream_a[i].timestamp : stream_b[j].timestamp - offset;
      if (have_prev && since_cut >= target_chunk_events && t - prev > window) {
        cuts.push_back({i, j});
        since_cut = 0;
      }
      prev = t;
      have_prev = true;
      ++since_cut;
      take_a ? ++i : ++j;
    }
  }
  cuts.push_back({stream_a.size(), stream_b.size()});

  const std::size_t chunks = cuts.size() - 1;
  std::vector<std::vector<CoincidencePair>> partial(chunks);
  parallel_for(chunks, threads, [&](std::size_t c) {
    detail::match_range(stream_a.subspan(cuts[c].a, cuts[c + 1].a - cuts[c].a),
                        stream_b.subspan(cuts[c].b, cuts[c + 1].b - cuts[c].b), offset, window, partial[c]);
  });
  std::vector<CoincidencePair> out;
  std::size_t total = 0;
  for (const auto& p : partial) total += p.size();
  out.reserve(total);
  for (auto& p : partial) out.insert(out.end(), p.begin(), p.end());
  return out;
}

}  // namespace timebin
