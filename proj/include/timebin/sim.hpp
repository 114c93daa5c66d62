#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "timebin/certify.hpp"
#include "timebin/channel_map.hpp"
#include "timebin/error.hpp"
#include "timebin/framing.hpp"
#include "timebin/parallel.hpp"
#include "timebin/timetag.hpp"

namespace timebin {

/// Source + channel model. The frame-local two-photon state is
/// v |phi4+><phi4+| + (1 - v) I/16; the channel adds per-photon loss,
/// Gaussian timing jitter and Poissonian background clicks.
struct SourceModel {
  double visibility = 1.0;
  double pair_rate = 5000.0;        // pairs per second
  double background_rate = 0.0;     // counts per second per detector
  double jitter_sigma = 0.0;        // ps
  double loss_a = 0.0;
  double loss_b = 0.0;
  Picoseconds tau_mzi = 2700;
  Picoseconds clock_offset = 0;     // added to every B timestamp
  double duration = 1.0;            // seconds
  std::uint64_t seed = 1;

  void validate() const {
    auto bad = [](const std::string& what) { throw Error(Errc::InvalidConfig, what); };
    if (!(visibility >= 0.0 && visibility <= 1.0)) bad("visibility must lie in [0, 1]");
    if (!(pair_rate >= 0.0) || !std::isfinite(pair_rate)) bad("pair rate must be >= 0");
    if (!(background_rate >= 0.0) || !std::isfinite(background_rate)) bad("background rate must be >= 0");
    if (!(jitter_sigma >= 0.0) || !std::isfinite(jitter_sigma)) bad("jitter sigma must be >= 0");
    if (!(loss_a >= 0.0 && loss_a <= 1.0) || !(loss_b >= 0.0 && loss_b <= 1.0)) bad("loss must lie in [0, 1]");
    if (tau_mzi <= 0) bad("tau_mzi must be > 0");
    if (!(duration >= 0.0) || !std::isfinite(duration)) bad("duration must be >= 0");
  }

  nlohmann::json to_json() const {
    return {{"visibility", visibility}, {"pair_rate_per_s", pair_rate},  {"background_rate_per_s", background_rate},
            {"jitter_sigma_ps", jitter_sigma}, {"loss_a", loss_a}, {"loss_b", loss_b},
            {"tau_mzi_ps", tau_mzi}, {"clock_offset_ps", clock_offset}, {"duration_s", duration},
            {"seed", seed}};
  }
};

/// How the (3, 0') projector acts on the four-bin frame space: |0'> either
/// orthogonal to the frame, or identified with |0> so TSUP_2 is a complete
/// basis (the stream simulator uses the latter so that every TSUP click lands
/// in a frame and the 1/2-weighted POVM is normalized).
enum class PrimedBin : std::uint8_t { Orthogonal, Cyclic };

using FrameDensity = Eigen::Matrix<double, kDim * kDim, kDim * kDim>;
using FrameVector = Eigen::Matrix<double, kDim, 1>;

inline FrameDensity isotropic_state(double visibility) {
  Eigen::Matrix<double, kDim * kDim, 1> phi = Eigen::Matrix<double, kDim * kDim, 1>::Zero();
  for (int i = 0; i < kDim; ++i) phi[i * kDim + i] = 0.5;
  return visibility * phi * phi.transpose() +
         (1.0 - visibility) / (kDim * kDim) * FrameDensity::Identity();
}

inline FrameVector projector_vector(TsupProjector proj, PrimedBin primed) {
  FrameVector v = FrameVector::Zero();
  const double s = proj.sign == Sign::Plus ? 1.0 : -1.0;
  const double r = 1.0 / std::sqrt(2.0);
  v[proj.k] = r;
  if (proj.k < kDim - 1)
    v[proj.k + 1] = s * r;
  else if (primed == PrimedBin::Cyclic)
    v[0] = s * r;
  return v;
}

inline double joint_expectation(const FrameDensity& rho, const FrameVector& a, const FrameVector& b) {
  Eigen::Matrix<double, kDim * kDim, 1> ab;
  for (int i = 0; i < kDim; ++i)
    for (int j = 0; j < kDim; ++j) ab[i * kDim + j] = a[i] * b[j];
  return ab.dot(rho * ab);
}

/// Infinite-statistics tables of the isotropic frame state.
inline ProbabilityTables exact_probability_tables(const SourceModel& model, const FrameConfig& cfg,
                                                  PrimedBin primed = PrimedBin::Orthogonal) {
  model.validate();
  cfg.validate();
  const FrameDensity rho = isotropic_state(model.visibility);
  ProbabilityTables t;
  for (int i = 0; i < kDim; ++i)
    for (int j = 0; j < kDim; ++j) t.toa[i][j] = rho(i * kDim + j, i * kDim + j);
  for (int a = 0; a < kTsupProjectors; ++a)
    for (int b = 0; b < kTsupProjectors; ++b)
      t.tsup[a][b] = joint_expectation(rho, projector_vector(TsupProjector::from_index(a), primed),
                                       projector_vector(TsupProjector::from_index(b), primed));
  return t;
}

inline double ground_truth_fidelity(const SourceModel& model) {
  return model.visibility + (1.0 - model.visibility) / (kDim * kDim);
}

struct GeneratedStreams {
  std::vector<DetectionEvent> a;
  std::vector<DetectionEvent> b;
  ChannelMap channels;
};

namespace detail {

/// Joint and marginal outcome distributions for one pair. TOA outcomes are
/// slots 0..3, TSUP outcomes projector indices 0..7 (POVM weight 1/2 each).
struct OutcomeSampler {
  std::array<std::array<std::discrete_distribution<int>, 2>, 2> joint;
  std::array<std::discrete_distribution<int>, 2> marginal_a;
  std::array<std::discrete_distribution<int>, 2> marginal_b;

  explicit OutcomeSampler(double visibility) {
    const FrameDensity rho = isotropic_state(visibility);
    std::array<std::vector<FrameVector>, 2> effects;  // [arm] -> outcome vectors
    std::array<double, 2> weight{1.0, 0.5};
    for (int i = 0; i < kDim; ++i) effects[0].push_back(FrameVector::Unit(i));
    for (int k = 0; k < kTsupProjectors; ++k)
      effects[1].push_back(projector_vector(TsupProjector::from_index(k), PrimedBin::Cyclic));
    for (int arm_a = 0; arm_a < 2; ++arm_a) {
      for (int arm_b = 0; arm_b < 2; ++arm_b) {
        std::vector<double> w;
        for (const auto& ea : effects[arm_a])
          for (const auto& eb : effects[arm_b]) w.push_back(weight[arm_a] * weight[arm_b] * joint_expectation(rho, ea, eb));
        joint[arm_a][arm_b] = std::discrete_distribution<int>(w.begin(), w.end());
      }
    }
    // Reduced states are I/4 for every visibility.
    for (int arm = 0; arm < 2; ++arm) {
      std::vector<double> w(effects[arm].size(), 1.0);
      marginal_a[arm] = std::discrete_distribution<int>(w.begin(), w.end());
      marginal_b[arm] = marginal_a[arm];
    }
  }
};

}  // namespace detail

/// Two-party time-tag streams. Pairs arrive as a Poisson process; each photon
/// independently enters the TOA or TSUP arm and is lost with the party's loss
/// probability. Joint outcomes are drawn exactly from the frame state: a TOA
/// outcome i is a click in bin i of the pair's frame, a TSUP projector
/// (k, k+1) a click in bin k+1 (bin 4 meaning bin 0 of the next interval).
/// Both photons carry one shared, uniformly drawn H/V label.
///
/// The run is split into fixed 10 ms segments with per-segment generators,
/// so the output does not depend on `threads`. Events outside
/// [0, duration) of each party's clock are dropped.
inline GeneratedStreams generate_streams(const SourceModel& model, const FrameConfig& cfg, unsigned threads = 1) {
  model.validate();
  cfg.validate();
  if (model.tau_mzi != cfg.tau_mzi) throw Error(Errc::InvalidConfig, "model and frame tau_mzi differ");

  GeneratedStreams out;
  out.channels = ChannelMap::standard();
  const ChannelMap& ch = out.channels;
  std::array<std::array<std::uint16_t, 2>, 2> toa_channel{}, tsup_channel{};
  for (Party party : {Party::A, Party::B}) {
    const auto pi = static_cast<std::size_t>(party);
    toa_channel[pi] = {ch.require_channel(party, Arm::Toa, Outcome::H), ch.require_channel(party, Arm::Toa, Outcome::V)};
    const std::uint16_t d = ch.require_channel(party, Arm::Tsup, Outcome::D);
    const std::uint16_t a = ch.require_channel(party, Arm::Tsup, Outcome::A);
    tsup_channel[pi] = cfg.d_is_plus ? std::array<std::uint16_t, 2>{d, a} : std::array<std::uint16_t, 2>{a, d};
  }

  const auto duration_ps = static_cast<Picoseconds>(std::llround(model.duration * static_cast<double>(kPicosecondsPerSecond)));
  constexpr Picoseconds kSegment = 10'000'000'000;  // 10 ms
  const auto segments = static_cast<std::size_t>((duration_ps + kSegment - 1) / kSegment);
  const Picoseconds tau = model.tau_mzi;
  const Picoseconds interval = kDim * tau;
  const detail::OutcomeSampler sampler_proto(model.visibility);

  struct SegmentEvents {
    std::vector<DetectionEvent> a, b;
  };
  std::vector<SegmentEvents> seg_events(segments);

  parallel_for(segments, threads, [&](std::size_t s) {
    std::mt19937_64 rng(detail::mix64(detail::mix64(model.seed) ^ (s + 1)));
    detail::OutcomeSampler sampler = sampler_proto;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> jitter(0.0, model.jitter_sigma > 0.0 ? model.jitter_sigma : 1.0);
    auto& ev = seg_events[s];

    const Picoseconds seg_lo = static_cast<Picoseconds>(s) * kSegment;
    const Picoseconds seg_hi = std::min(duration_ps, seg_lo + kSegment);
    const double seg_seconds = static_cast<double>(seg_hi - seg_lo) / static_cast<double>(kPicosecondsPerSecond);
    auto uniform_time = [&] {
      return seg_lo + static_cast<Picoseconds>(std::floor(unit(rng) * static_cast<double>(seg_hi - seg_lo)));
    };
    auto smear = [&](Picoseconds t) {
      return model.jitter_sigma > 0.0 ? t + static_cast<Picoseconds>(std::llround(jitter(rng))) : t;
    };

    const auto n_pairs = std::poisson_distribution<long long>(model.pair_rate * seg_seconds)(rng);
    for (long long p = 0; p < n_pairs; ++p) {
      const Picoseconds t = uniform_time();
      const Picoseconds base = (t / interval) * interval + t % tau;
      const int arm_a = unit(rng) < 0.5 ? 0 : 1;
      const int arm_b = unit(rng) < 0.5 ? 0 : 1;
      const bool has_a = !(unit(rng) < model.loss_a);
      const bool has_b = !(unit(rng) < model.loss_b);
      const int pol = unit(rng) < 0.5 ? 0 : 1;
      int out_a = -1, out_b = -1;
      if (has_a && has_b) {
        const int cell = sampler.joint[arm_a][arm_b](rng);
        const int nb = arm_b == 0 ? kDim : kTsupProjectors;
        out_a = cell / nb;
        out_b = cell % nb;
      } else if (has_a) {
        out_a = sampler.marginal_a[arm_a](rng);
      } else if (has_b) {
        out_b = sampler.marginal_b[arm_b](rng);
      }
      auto emit = [&](std::vector<DetectionEvent>& dst, std::size_t party, int arm, int outcome, Picoseconds shift) {
        if (arm == 0) {
          dst.push_back({smear(base + outcome * tau + shift), toa_channel[party][pol]});
        } else {
          const TsupProjector proj = TsupProjector::from_index(outcome);
          dst.push_back({smear(base + (proj.k + 1) * tau + shift),
                         tsup_channel[party][proj.sign == Sign::Plus ? 0 : 1]});
        }
      };
      if (out_a >= 0) emit(ev.a, 0, arm_a, out_a, 0);
      if (out_b >= 0) emit(ev.b, 1, arm_b, out_b, model.clock_offset);
    }

    if (model.background_rate > 0.0) {
      for (const auto& [id, info] : ch.entries()) {
        const auto n_bg = std::poisson_distribution<long long>(model.background_rate * seg_seconds)(rng);
        auto& dst = info.party == Party::A ? ev.a : ev.b;
        for (long long k = 0; k < n_bg; ++k) dst.push_back({uniform_time(), id});
      }
    }
  });

  auto merge = [&](auto member) {
    std::vector<DetectionEvent> all;
    std::size_t total = 0;
    for (const auto& e : seg_events) total += (e.*member).size();
    all.reserve(total);
    for (const auto& e : seg_events)
      for (const auto& d : e.*member)
        if (d.timestamp >= 0 && d.timestamp < duration_ps) all.push_back(d);
    std::sort(all.begin(), all.end());
    return all;
  };
  out.a = merge(&SegmentEvents::a);
  out.b = merge(&SegmentEvents::b);
  return out;
}

}  // namespace timebin
