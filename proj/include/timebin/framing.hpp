#pragma once

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "timebin/channel_map.hpp"
#include "timebin/error.hpp"
#include "timebin/parallel.hpp"
#include "timebin/timetag.hpp"

namespace timebin {

inline constexpr int kDim = 4;
inline constexpr int kTsupProjectors = 8;

enum class MultiClickPolicy : std::uint8_t { RandomOutcome, DiscardFrame };
enum class Sign : std::uint8_t { Plus, Minus };

inline std::string_view to_string(MultiClickPolicy p) { return p == MultiClickPolicy::RandomOutcome ? "random" : "discard"; }

/// Interleaved frame geometry. An interval of length d * tau_mzi holds
/// tau_mzi / delta_t frames ("families"); frame o of interval n consists of
/// the d bins starting at n*d*tau + o*delta_t + k*tau, k = 0..d-1.
struct FrameConfig {
  Picoseconds delta_t = 540;
  Picoseconds tau_mzi = 2700;
  int d = kDim;
  Picoseconds window = 4 * 2700;
  MultiClickPolicy policy = MultiClickPolicy::RandomOutcome;
  /// Detector D reads the '+' superposition when true.
  bool d_is_plus = true;
  std::uint64_t seed = 0;

  Picoseconds interval_length() const { return d * tau_mzi; }
  std::int64_t families() const { return tau_mzi / delta_t; }

  void validate() const {
    if (d != kDim) throw Error(Errc::InvalidConfig, "only d = 4 is supported");
    if (delta_t <= 0) throw Error(Errc::InvalidConfig, "delta_t must be > 0");
    if (tau_mzi <= 0) throw Error(Errc::InvalidConfig, "tau_mzi must be > 0");
    if (tau_mzi % delta_t != 0)
      throw Error(Errc::InvalidConfig, "delta_t = " + std::to_string(delta_t) + " ps does not divide tau_mzi = " +
                                           std::to_string(tau_mzi) + " ps");
    if (window <= 0) throw Error(Errc::InvalidConfig, "coincidence window must be > 0");
  }

  nlohmann::json to_json() const {
    return {{"delta_t_ps", delta_t}, {"tau_mzi_ps", tau_mzi}, {"d", d}, {"window_ps", window},
            {"policy", to_string(policy)}, {"d_is_plus", d_is_plus}, {"seed", seed}};
  }

  static FrameConfig from_json(const nlohmann::json& j) {
    FrameConfig cfg;
    try {
      cfg.delta_t = j.value("delta_t_ps", cfg.delta_t);
      cfg.tau_mzi = j.value("tau_mzi_ps", cfg.tau_mzi);
      cfg.d = j.value("d", cfg.d);
      cfg.window = j.value("window_ps", 4 * cfg.tau_mzi);
      const std::string policy = j.value("policy", std::string("random"));
      if (policy == "random")
        cfg.policy = MultiClickPolicy::RandomOutcome;
      else if (policy == "discard")
        cfg.policy = MultiClickPolicy::DiscardFrame;
      else
        throw Error(Errc::InvalidConfig, "unknown multi-click policy '" + policy + "'");
      cfg.d_is_plus = j.value("d_is_plus", cfg.d_is_plus);
      cfg.seed = j.value("seed", cfg.seed);
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::InvalidConfig, e.what());
    }
    cfg.validate();
    return cfg;
  }
};

struct BinCoord {
  std::int64_t interval = 0;
  std::int64_t family = 0;
  int slot = 0;

  friend bool operator==(const BinCoord&, const BinCoord&) = default;
};

struct FrameRef {
  std::int64_t interval = 0;
  std::int64_t family = 0;

  friend auto operator<=>(const FrameRef&, const FrameRef&) = default;
};

inline BinCoord bin_index(Picoseconds t, const FrameConfig& cfg) {
  const Picoseconds len = cfg.interval_length();
  const Picoseconds r = t % len;
  const int slot = static_cast<int>(r / cfg.tau_mzi);
  return {t / len, (r - slot * cfg.tau_mzi) / cfg.delta_t, slot};
}

inline Picoseconds bin_start(const BinCoord& c, const FrameConfig& cfg) {
  return c.interval * cfg.interval_length() + c.family * cfg.delta_t + c.slot * cfg.tau_mzi;
}

/// (|k> +/- |k+1>)/sqrt(2), with k = 3 pairing |3> with the primed bin |0'>.
struct TsupProjector {
  int k = 0;
  Sign sign = Sign::Plus;

  /// Row/column in the 8x8 TSUP table: 2k for '+', 2k+1 for '-'.
  int index() const { return 2 * k + (sign == Sign::Minus ? 1 : 0); }
  /// 1 for TSUP_1 (k in {0,2}), 2 for TSUP_2 (k in {1,3}).
  int family() const { return k % 2 == 0 ? 1 : 2; }

  static TsupProjector from_index(int idx) { return {idx / 2, idx % 2 == 0 ? Sign::Plus : Sign::Minus}; }

  std::string label() const {
    const char s = sign == Sign::Plus ? '+' : '-';
    if (k == 3) return std::string("3") + s + "0'";
    return std::to_string(k) + s + std::to_string(k + 1);
  }

  friend bool operator==(const TsupProjector&, const TsupProjector&) = default;
};

struct TsupClick {
  TsupProjector projector;
  FrameRef frame;
};

inline Sign sign_for(Outcome detector, const FrameConfig& cfg) {
  const bool is_d = detector == Outcome::D;
  return (is_d == cfg.d_is_plus) ? Sign::Plus : Sign::Minus;
}

/// A TSUP click in slot k >= 1 superposes bins k-1 and k of its own frame; a
/// click in slot 0 closes the (3, 0') pair of the same family one interval
/// earlier. Returns nullopt when that earlier interval precedes the stream.
inline std::optional<TsupClick> tsup_projector_for_click(const BinCoord& bin, Outcome detector, const FrameConfig& cfg) {
  const Sign sign = sign_for(detector, cfg);
  if (bin.slot >= 1) return TsupClick{{bin.slot - 1, sign}, {bin.interval, bin.family}};
  if (bin.interval == 0) return std::nullopt;
  return TsupClick{{3, sign}, {bin.interval - 1, bin.family}};
}

// ---------------------------------------------------------------------------
// Coincidence tables
// ---------------------------------------------------------------------------

struct CoincidenceTables {
  struct Totals {
    std::uint64_t toa = 0;
    std::uint64_t tsup = 0;
    std::uint64_t mixed = 0;
    friend bool operator==(const Totals&, const Totals&) = default;
  };

  std::array<std::array<std::uint64_t, kDim>, kDim> toa{};
  std::array<std::array<std::uint64_t, kTsupProjectors>, kTsupProjectors> tsup{};
  Totals totals;
  std::uint64_t multi_click_count = 0;
  std::uint64_t multi_click_discarded = 0;
  std::uint64_t discarded_slot0 = 0;
  std::uint64_t cross_frame = 0;
  std::uint64_t polarization_rejected = 0;

  std::uint64_t toa_sum() const {
    std::uint64_t s = 0;
    for (const auto& row : toa)
      for (auto c : row) s += c;
    return s;
  }
  std::uint64_t tsup_sum() const {
    std::uint64_t s = 0;
    for (const auto& row : tsup)
      for (auto c : row) s += c;
    return s;
  }

  CoincidenceTables& operator+=(const CoincidenceTables& o) {
    for (int i = 0; i < kDim; ++i)
      for (int j = 0; j < kDim; ++j) toa[i][j] += o.toa[i][j];
    for (int i = 0; i < kTsupProjectors; ++i)
      for (int j = 0; j < kTsupProjectors; ++j) tsup[i][j] += o.tsup[i][j];
    totals.toa += o.totals.toa;
    totals.tsup += o.totals.tsup;
    totals.mixed += o.totals.mixed;
    multi_click_count += o.multi_click_count;
    multi_click_discarded += o.multi_click_discarded;
    discarded_slot0 += o.discarded_slot0;
    cross_frame += o.cross_frame;
    polarization_rejected += o.polarization_rejected;
    return *this;
  }

  friend bool operator==(const CoincidenceTables&, const CoincidenceTables&) = default;

  nlohmann::json to_json() const {
    std::vector<std::string> toa_labels{"0", "1", "2", "3"};
    std::vector<std::string> tsup_labels;
    for (int i = 0; i < kTsupProjectors; ++i) tsup_labels.push_back(TsupProjector::from_index(i).label());
    return {{"toa", {{"row_labels_A", toa_labels}, {"col_labels_B", toa_labels}, {"counts", toa}}},
            {"tsup", {{"row_labels_A", tsup_labels}, {"col_labels_B", tsup_labels}, {"counts", tsup}}},
            {"totals", {{"toa", totals.toa}, {"tsup", totals.tsup}, {"mixed", totals.mixed}}},
            {"multi_click_count", multi_click_count},
            {"multi_click_discarded", multi_click_discarded},
            {"discarded_slot0", discarded_slot0},
            {"cross_frame", cross_frame},
            {"polarization_rejected", polarization_rejected}};
  }
};

/// Counts each party's detections (any arm) that belong to a frame, using
/// the full event streams. TOA clicks belong to the frame of their bin; TSUP
/// clicks to the frame their projector refers to.
class FrameOccupancy {
 public:
  FrameOccupancy(std::span<const DetectionEvent> stream_a, std::span<const DetectionEvent> stream_b, Picoseconds offset,
                 const ChannelMap& channels, const FrameConfig& cfg)
      : a_(stream_a), b_(stream_b), offset_(offset), channels_(channels), cfg_(cfg) {}

  std::uint64_t count(Party party, const FrameRef& frame) const {
    const auto stream = party == Party::A ? a_ : b_;
    const Picoseconds shift = party == Party::A ? 0 : offset_;
    std::uint64_t n = 0;
    for (int slot = 0; slot < kDim; ++slot) {
      const Picoseconds start = bin_start({frame.interval, frame.family, slot}, cfg_);
      n += count_window(stream, start + shift, cfg_.delta_t, Arm::Toa);
    }
    for (int slot = 1; slot <= kDim; ++slot) {
      const BinCoord c = slot < kDim ? BinCoord{frame.interval, frame.family, slot}
                                     : BinCoord{frame.interval + 1, frame.family, 0};
      n += count_window(stream, bin_start(c, cfg_) + shift, cfg_.delta_t, Arm::Tsup);
    }
    return n;
  }

 private:
  std::uint64_t count_window(std::span<const DetectionEvent> stream, Picoseconds start, Picoseconds len, Arm arm) const {
    auto it = std::lower_bound(stream.begin(), stream.end(), start,
                               [](const DetectionEvent& e, Picoseconds t) { return e.timestamp < t; });
    std::uint64_t n = 0;
    for (; it != stream.end() && it->timestamp < start + len; ++it) {
      const auto* info = channels_.find(it->channel);
      if (info && info->arm == arm) ++n;
    }
    return n;
  }

  std::span<const DetectionEvent> a_;
  std::span<const DetectionEvent> b_;
  Picoseconds offset_;
  const ChannelMap& channels_;
  FrameConfig cfg_;
};

namespace detail {

struct SideClick {
  FrameRef frame;
  Arm arm = Arm::Toa;
  int outcome = 0;  // slot for TOA, projector index for TSUP
  Outcome polarization = Outcome::H;
};

inline std::optional<SideClick> resolve_click(Picoseconds t, const ChannelInfo& info, const FrameConfig& cfg) {
  const BinCoord bin = bin_index(t, cfg);
  if (info.arm == Arm::Toa) return SideClick{{bin.interval, bin.family}, Arm::Toa, bin.slot, info.outcome};
  auto click = tsup_projector_for_click(bin, info.outcome, cfg);
  if (!click) return std::nullopt;
  return SideClick{click->frame, Arm::Tsup, click->projector.index(), info.outcome};
}

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t frame_key(std::uint64_t seed, const FrameRef& f) {
  return mix64(mix64(mix64(seed) ^ static_cast<std::uint64_t>(f.interval)) ^ static_cast<std::uint64_t>(f.family));
}

inline void randomize(SideClick& side, std::mt19937_64& rng) {
  if (side.arm == Arm::Toa) {
    side.outcome = static_cast<int>(std::uniform_int_distribution<int>(0, kDim - 1)(rng));
    side.polarization = std::uniform_int_distribution<int>(0, 1)(rng) == 0 ? Outcome::H : Outcome::V;
  } else {
    side.outcome = static_cast<int>(std::uniform_int_distribution<int>(0, kTsupProjectors - 1)(rng));
  }
}

}  // namespace detail

/// Builds coincidence tables from matched pairs.
///
/// A pair counts only when both clicks fall in the same (interval, family)
/// frame and were recorded in the same arm. Each frame contributes at most one
/// entry. A frame with more than one detection on a side (counted from
/// `occupancy` when given, otherwise from the pairs themselves) is resolved by
/// cfg.policy; RandomOutcome draws that side's outcome from a generator keyed
/// by (seed, interval, family), so the result does not depend on thread count.
/// TOA entries additionally require matching polarization outcomes.
inline CoincidenceTables accumulate_tables(std::span<const CoincidencePair> pairs, const ChannelMap& channels,
                                           const FrameConfig& cfg, const FrameOccupancy* occupancy = nullptr,
                                           unsigned threads = 1) {
  cfg.validate();
  struct Entry {
    FrameRef frame;
    std::uint32_t pair;
    detail::SideClick a;
    detail::SideClick b;
  };

  CoincidenceTables result;
  std::vector<Entry> entries;
  entries.reserve(pairs.size());
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto& pair = pairs[p];
    const auto& info_a = channels.at(pair.a.channel);
    const auto& info_b = channels.at(pair.b.channel);
    if (info_a.party != Party::A || info_b.party != Party::B)
      throw Error(Errc::UnknownChannel, "pair " + std::to_string(p) + " mixes up party channels");
    const Picoseconds tb = pair.a.timestamp + pair.delta;
    if (tb < 0) {
      ++result.cross_frame;
      continue;
    }
    const auto side_a = detail::resolve_click(pair.a.timestamp, info_a, cfg);
    const auto side_b = detail::resolve_click(tb, info_b, cfg);
    if (!side_a || !side_b) {
      result.discarded_slot0 += !side_a + !side_b;
      continue;
    }
    if (side_a->frame != side_b->frame) {
      ++result.cross_frame;
      continue;
    }
    if (side_a->arm != side_b->arm) {
      ++result.totals.mixed;
      continue;
    }
    entries.push_back({side_a->frame, static_cast<std::uint32_t>(p), *side_a, *side_b});
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& x, const Entry& y) {
    if (x.frame != y.frame) return x.frame < y.frame;
    return x.pair < y.pair;
  });

  std::vector<std::size_t> group_begin;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (i == 0 || entries[i].frame != entries[i - 1].frame) group_begin.push_back(i);
  group_begin.push_back(entries.size());
  const std::size_t groups = group_begin.size() - 1;

  constexpr std::size_t kGroupsPerChunk = 1 << 14;
  const std::size_t chunks = (groups + kGroupsPerChunk - 1) / kGroupsPerChunk;
  std::vector<CoincidenceTables> partial(chunks);
  parallel_for(chunks, threads, [&](std::size_t c) {
    auto& t = partial[c];
    const std::size_t g_hi = std::min(groups, (c + 1) * kGroupsPerChunk);
    for (std::size_t g = c * kGroupsPerChunk; g < g_hi; ++g) {
      const std::size_t size = group_begin[g + 1] - group_begin[g];
      Entry e = entries[group_begin[g]];
      const std::uint64_t occ_a = occupancy ? occupancy->count(Party::A, e.frame) : size;
      const std::uint64_t occ_b = occupancy ? occupancy->count(Party::B, e.frame) : size;
      if (occ_a > 1 || occ_b > 1) {
        ++t.multi_click_count;
        if (cfg.policy == MultiClickPolicy::DiscardFrame) {
          ++t.multi_click_discarded;
          continue;
        }
        std::mt19937_64 rng(detail::frame_key(cfg.seed, e.frame));
        if (occ_a > 1) detail::randomize(e.a, rng);
        if (occ_b > 1) detail::randomize(e.b, rng);
      }
      if (e.a.arm == Arm::Toa) {
        ++t.totals.toa;
        if (e.a.polarization == e.b.polarization)
          ++t.toa[e.a.outcome][e.b.outcome];
        else
          ++t.polarization_rejected;
      } else {
        ++t.totals.tsup;
        ++t.tsup[e.a.outcome][e.b.outcome];
      }
    }
  });
  for (const auto& t : partial) result += t;
  return result;
}

// ---------------------------------------------------------------------------
// Outcome probabilities
// ---------------------------------------------------------------------------

/// P(i,j): TOA joint probabilities. tsup[vA][vB]: projector-pair expectation
/// <vA vB|rho|vA vB> for normalized TSUP projectors.
struct ProbabilityTables {
  std::array<std::array<double, kDim>, kDim> toa{};
  std::array<std::array<double, kTsupProjectors>, kTsupProjectors> tsup{};

  double expectation(TsupProjector a, TsupProjector b) const { return tsup[a.index()][b.index()]; }

  nlohmann::json to_json() const { return {{"toa", toa}, {"tsup", tsup}}; }
};

/// Each TSUP click selects its basis family by arrival slot, so the eight
/// projectors form a POVM with weights 1/2 per party; expectations are four
/// times the relative frequency, clamped to 1.
inline ProbabilityTables tables_to_probabilities(const CoincidenceTables& tables) {
  const std::uint64_t n_toa = tables.toa_sum();
  const std::uint64_t n_tsup = tables.tsup_sum();
  if (n_toa == 0) throw Error(Errc::EmptySetting, "no TOA x TOA coincidences");
  if (n_tsup == 0) throw Error(Errc::EmptySetting, "no TSUP x TSUP coincidences");
  ProbabilityTables p;
  for (int i = 0; i < kDim; ++i)
    for (int j = 0; j < kDim; ++j) p.toa[i][j] = static_cast<double>(tables.toa[i][j]) / static_cast<double>(n_toa);
  for (int i = 0; i < kTsupProjectors; ++i)
    for (int j = 0; j < kTsupProjectors; ++j)
      p.tsup[i][j] = std::min(1.0, 4.0 * static_cast<double>(tables.tsup[i][j]) / static_cast<double>(n_tsup));
  return p;
}

}  // namespace timebin
