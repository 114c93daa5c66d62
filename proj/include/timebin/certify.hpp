#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "timebin/error.hpp"
#include "timebin/framing.hpp"
#include "timebin/parallel.hpp"

namespace timebin {

/// Bounds on the frame-diagonal block of the discretised state.
///
/// p[i]          <ii|rho|ii>
/// lower[i]      lower bound on Re<ii|rho|i+1,i+1>, i = 0..2
/// lower_primed  the same for the (3, 0') pair; diagnostic only, never used
///               in the fidelity because |0'> lies outside the frame
/// cross_plus/minus  P(i,i+1) and P(i+1,i)
struct DensityElementBounds {
  std::array<double, kDim> p{};
  std::array<double, kDim - 1> lower{};
  double lower_primed = 0.0;
  std::array<double, kDim - 1> cross_plus{};
  std::array<double, kDim - 1> cross_minus{};
  /// Set when any raw neighbor bound exceeded its Cauchy-Schwarz cap.
  bool clamped = false;
};

namespace detail {

inline double neighbor_raw(const ProbabilityTables& t, int i) {
  const int j = (i + 1) % kDim;
  const TsupProjector plus{i, Sign::Plus}, minus{i, Sign::Minus};
  const double interference =
      0.5 * (t.expectation(plus, plus) + t.expectation(minus, minus) - t.expectation(plus, minus) -
             t.expectation(minus, plus));
  return interference - std::sqrt(t.toa[i][j] * t.toa[j][i]);
}

inline double neighbor_cap(const ProbabilityTables& t, int i) {
  const int j = (i + 1) % kDim;
  return std::sqrt(std::max(0.0, t.toa[i][i]) * std::max(0.0, t.toa[j][j]));
}

}  // namespace detail

/// Lower bound on Re<ii|rho|i+1,i+1> from the four same-pair TSUP
/// expectations minus the Cauchy-Schwarz bound on Re<i,i+1|rho|i+1,i>,
/// clamped to +-sqrt(p_i p_{i+1}). i = 3 gives the (3, 0') diagnostic.
inline double neighbor_offdiag_lower_bound(const ProbabilityTables& tables, int i) {
  if (i < 0 || i >= kDim) throw Error(Errc::InvalidConfig, "neighbor index out of range");
  const double cap = detail::neighbor_cap(tables, i);
  return std::clamp(detail::neighbor_raw(tables, i), -cap, cap);
}

inline DensityElementBounds derive_bounds(const ProbabilityTables& tables) {
  DensityElementBounds b;
  for (int i = 0; i < kDim; ++i) b.p[i] = std::max(0.0, tables.toa[i][i]);
  for (int i = 0; i < kDim - 1; ++i) {
    const double raw = detail::neighbor_raw(tables, i);
    const double cap = detail::neighbor_cap(tables, i);
    if (raw > cap || raw < -cap) b.clamped = true;
    b.lower[i] = std::clamp(raw, -cap, cap);
    b.cross_plus[i] = tables.toa[i][i + 1];
    b.cross_minus[i] = tables.toa[i + 1][i];
  }
  b.lower_primed = neighbor_offdiag_lower_bound(tables, kDim - 1);
  const double total = std::accumulate(b.p.begin(), b.p.end(), 0.0);
  if (total > 1.0) {
    for (auto& x : b.p) x /= total;
    for (auto& x : b.lower) x /= total;
    b.lower_primed /= total;
    b.clamped = true;
  }
  return b;
}

/// Fidelity bound using only 2x2 principal minors for the far elements:
/// 1/4 [sum p + 2 sum L - 2 sum_{|i-j|>1} sqrt(p_i p_j)].
inline double fidelity_closed_form(const DensityElementBounds& b) {
  double f = 0.0;
  for (int i = 0; i < kDim; ++i) f += b.p[i];
  for (int i = 0; i < kDim - 1; ++i) f += 2.0 * b.lower[i];
  for (int i = 0; i < kDim; ++i)
    for (int j = i + 2; j < kDim; ++j) f -= 2.0 * std::sqrt(b.p[i] * b.p[j]);
  return f / 4.0;
}

// ---------------------------------------------------------------------------
// Completion SDP
//
//   minimize   1/4 sum_ij M_ij
//   subject to M >= 0 (4x4 real symmetric), M_ii = p_i, M_{i,i+1} >= L_i.
//
// Writing M = D C D with D = diag(sqrt p) turns this into minimizing w^T C w
// (w = sqrt(p)/2) over correlation matrices C with C_{i,i+1} >= l_i. A bound
// l_i = 1 forces the two Gram vectors to coincide, so such nodes are merged
// (weights add); nodes with p_i = 0 drop out. What remains always has a
// strictly feasible point and is solved with a log-barrier method.
// ---------------------------------------------------------------------------

struct SdpOptions {
  double gap_tolerance = 1e-10;
  /// Normalized bounds within this of 1 are treated as equal to 1.
  double merge_tolerance = 1e-12;
  /// L_i may exceed sqrt(p_i p_{i+1}) by this much before Infeasible.
  double feasibility_tolerance = 1e-9;
  int max_newton_per_stage = 100;
};

struct SdpResult {
  double value = 0.0;
  /// Barrier duality-gap bound on value - optimum.
  double gap_bound = 0.0;
  Eigen::Matrix4d completion = Eigen::Matrix4d::Zero();
  int newton_steps = 0;
};

namespace detail {

struct CorrelationEdge {
  int i = 0;
  int j = 0;
  double lower = -1.0;
};

struct CorrelationSolution {
  Eigen::MatrixXd c;
  double value = 0.0;
  double gap = 0.0;
  int steps = 0;
};

/// min w^T C w over m x m correlation matrices with C_ij >= lower on edges.
/// Requires every edge lower bound < 1.
inline CorrelationSolution solve_correlation_problem(const std::vector<double>& w,
                                                     const std::vector<CorrelationEdge>& edges, const SdpOptions& opt) {
  const int m = static_cast<int>(w.size());
  CorrelationSolution sol;
  sol.c = Eigen::MatrixXd::Identity(m, m);
  const Eigen::Map<const Eigen::VectorXd> wv(w.data(), m);
  if (m <= 1) {
    sol.value = m == 1 ? w[0] * w[0] : 0.0;
    return sol;
  }

  struct Var {
    int i, j;
    bool bounded;
    double lower;
  };
  std::vector<Var> vars;
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) vars.push_back({i, j, false, -1.0});
  for (const auto& e : edges) {
    for (auto& v : vars) {
      if (v.i == std::min(e.i, e.j) && v.j == std::max(e.i, e.j)) {
        v.lower = v.bounded ? std::max(v.lower, e.lower) : e.lower;
        v.bounded = true;
      }
    }
  }
  const int q = static_cast<int>(vars.size());
  double max_lower = 0.0;
  for (const auto& v : vars)
    if (v.bounded) max_lower = std::max(max_lower, v.lower);
  Eigen::VectorXd x = Eigen::VectorXd::Constant(q, (1.0 + max_lower) / 2.0);

  auto build = [&](const Eigen::VectorXd& xs) {
    Eigen::MatrixXd c = Eigen::MatrixXd::Identity(m, m);
    for (int a = 0; a < q; ++a) c(vars[a].i, vars[a].j) = c(vars[a].j, vars[a].i) = xs[a];
    return c;
  };
  auto feasible = [&](const Eigen::VectorXd& xs, Eigen::LLT<Eigen::MatrixXd>& llt) {
    for (int a = 0; a < q; ++a)
      if (vars[a].bounded && !(xs[a] - vars[a].lower > 0.0)) return false;
    llt.compute(build(xs));
    return llt.info() == Eigen::Success && (llt.matrixLLT().diagonal().array() > 0.0).all();
  };

  int bounded = 0;
  for (const auto& v : vars) bounded += v.bounded;
  const double nu = static_cast<double>(m + bounded);
  const double mu = 10.0;
  double t = 1.0;
  Eigen::LLT<Eigen::MatrixXd> llt;
  if (!feasible(x, llt)) throw Error(Errc::Infeasible, "no strictly feasible starting point");

  Eigen::VectorXd g(q);
  Eigen::MatrixXd h(q, q);
  for (;;) {
    for (int it = 0; it < opt.max_newton_per_stage; ++it) {
      feasible(x, llt);
      const Eigen::MatrixXd s = llt.solve(Eigen::MatrixXd::Identity(m, m));
      for (int a = 0; a < q; ++a) {
        const auto [i, j, has_lower, lo] = vars[a];
        g[a] = t * 2.0 * w[i] * w[j] - 2.0 * s(i, j);
        if (has_lower) g[a] -= 1.0 / (x[a] - lo);
        for (int b = 0; b <= a; ++b) {
          const int k = vars[b].i, l = vars[b].j;
          h(a, b) = h(b, a) = 2.0 * (s(i, k) * s(j, l) + s(i, l) * s(j, k));
        }
        if (has_lower) h(a, a) += 1.0 / ((x[a] - lo) * (x[a] - lo));
      }
      const Eigen::VectorXd dx = -h.ldlt().solve(g);
      const double decrement_sq = -g.dot(dx);
      ++sol.steps;
      if (!(decrement_sq > 1e-14)) break;
      const double lambda = std::sqrt(decrement_sq);
      double alpha = lambda > 0.25 ? 1.0 / (1.0 + lambda) : 1.0;
      Eigen::VectorXd next = x + alpha * dx;
      while (!feasible(next, llt) && alpha > 1e-18) {
        alpha *= 0.5;
        next = x + alpha * dx;
      }
      if (alpha <= 1e-18) break;
      x = next;
      if (lambda < 1e-7) break;
    }
    if (nu / t < opt.gap_tolerance) break;
    t *= mu;
  }
  sol.c = build(x);
  sol.value = wv.dot(sol.c * wv);
  sol.gap = nu / t;
  return sol;
}

}  // namespace detail

inline SdpResult fidelity_lower_bound_sdp(const DensityElementBounds& b, const SdpOptions& opt = {}) {
  for (int i = 0; i < kDim; ++i)
    if (!std::isfinite(b.p[i]) || b.p[i] < -opt.feasibility_tolerance)
      throw Error(Errc::Infeasible, "diagonal p[" + std::to_string(i) + "] is negative or not finite");
  std::array<double, kDim> p{};
  for (int i = 0; i < kDim; ++i) p[i] = std::max(0.0, b.p[i]);
  std::array<double, kDim - 1> lower{};
  for (int i = 0; i < kDim - 1; ++i) {
    const double cap = std::sqrt(p[i] * p[i + 1]);
    if (!std::isfinite(b.lower[i]) || b.lower[i] > cap + opt.feasibility_tolerance)
      throw Error(Errc::Infeasible, "L[" + std::to_string(i) + "] exceeds sqrt(p_i p_{i+1})");
    lower[i] = std::min(b.lower[i], cap);
  }

  // Group consecutive nodes whose normalized bound is 1; drop empty nodes.
  std::array<int, kDim> group{};
  group.fill(-1);
  std::vector<double> weights;
  std::vector<detail::CorrelationEdge> edges;
  for (int i = 0; i < kDim; ++i) {
    if (!(p[i] > 0.0)) continue;
    const double wi = std::sqrt(p[i]) / 2.0;
    if (i > 0 && group[i - 1] >= 0) {
      const double ell = lower[i - 1] / std::sqrt(p[i - 1] * p[i]);
      if (ell >= 1.0 - opt.merge_tolerance) {
        group[i] = group[i - 1];
        weights[group[i]] += wi;
        continue;
      }
      group[i] = static_cast<int>(weights.size());
      weights.push_back(wi);
      if (ell > -1.0) edges.push_back({group[i - 1], group[i], ell});
      continue;
    }
    group[i] = static_cast<int>(weights.size());
    weights.push_back(wi);
  }

  const auto sol = detail::solve_correlation_problem(weights, edges, opt);
  SdpResult r;
  for (int i = 0; i < kDim; ++i)
    for (int j = 0; j < kDim; ++j)
      if (group[i] >= 0 && group[j] >= 0) r.completion(i, j) = std::sqrt(p[i] * p[j]) * sol.c(group[i], group[j]);
  r.value = sol.value;
  r.gap_bound = sol.gap;
  r.newton_steps = sol.steps;
  return r;
}

/// Largest k with F > (k-1)/d: fidelity strictly above (k-1)/d to the
/// maximally entangled state certifies Schmidt number at least k.
inline int schmidt_number_certificate(double fidelity, int d = kDim) {
  int k = 1;
  for (int m = 2; m <= d; ++m)
    if (fidelity * d > static_cast<double>(m - 1)) k = m;
  return k;
}

struct CertifyOptions {
  /// Multinomial resamples for the standard error; 0 disables it.
  int bootstrap_resamples = 0;
  std::uint64_t seed = 0;
  SdpOptions sdp;
  unsigned threads = 1;
};

struct CertifyResult {
  DensityElementBounds bounds;
  double fidelity_closed_form = 0.0;
  double fidelity_sdp = 0.0;
  int schmidt_number = 1;
  std::optional<double> standard_error;
};

inline double certified_fidelity(const CoincidenceTables& tables, const SdpOptions& opt = {}) {
  return fidelity_lower_bound_sdp(derive_bounds(tables_to_probabilities(tables)), opt).value;
}

namespace detail {

template <std::size_t N>
void resample_multinomial(const std::array<std::uint64_t, N>& counts, std::array<std::uint64_t, N>& out,
                          std::mt19937_64& rng) {
  std::uint64_t remaining = 0;
  for (auto c : counts) remaining += c;
  double mass_left = static_cast<double>(remaining);
  for (std::size_t k = 0; k < N; ++k) {
    if (remaining == 0 || counts[k] == 0) {
      out[k] = 0;
      mass_left -= static_cast<double>(counts[k]);
      continue;
    }
    const double prob = std::min(1.0, static_cast<double>(counts[k]) / mass_left);
    const std::uint64_t draw = prob >= 1.0 ? remaining : std::binomial_distribution<std::uint64_t>(remaining, prob)(rng);
    out[k] = draw;
    remaining -= draw;
    mass_left -= static_cast<double>(counts[k]);
  }
}

}  // namespace detail

/// Standard deviation of F_sdp over multinomial resamples of the TOA and
/// TSUP count tables. Resample r draws from its own generator seeded by
/// (seed, r), so the result is independent of the thread count.
inline double bootstrap_uncertainty(const CoincidenceTables& tables, int resamples, std::uint64_t seed,
                                    const SdpOptions& opt = {}, unsigned threads = 1) {
  if (resamples < 100) throw Error(Errc::InvalidConfig, "bootstrap needs at least 100 resamples");
  if (tables.toa_sum() == 0) throw Error(Errc::EmptySetting, "no TOA x TOA coincidences");
  if (tables.tsup_sum() == 0) throw Error(Errc::EmptySetting, "no TSUP x TSUP coincidences");

  std::array<std::uint64_t, kDim * kDim> toa{};
  std::array<std::uint64_t, kTsupProjectors * kTsupProjectors> tsup{};
  for (int i = 0; i < kDim; ++i)
    for (int j = 0; j < kDim; ++j) toa[i * kDim + j] = tables.toa[i][j];
  for (int i = 0; i < kTsupProjectors; ++i)
    for (int j = 0; j < kTsupProjectors; ++j) tsup[i * kTsupProjectors + j] = tables.tsup[i][j];

  std::vector<double> values(static_cast<std::size_t>(resamples));
  parallel_for(values.size(), threads, [&](std::size_t r) {
    std::mt19937_64 rng(detail::mix64(detail::mix64(seed) ^ r));
    std::array<std::uint64_t, kDim * kDim> toa_r{};
    std::array<std::uint64_t, kTsupProjectors * kTsupProjectors> tsup_r{};
    detail::resample_multinomial(toa, toa_r, rng);
    detail::resample_multinomial(tsup, tsup_r, rng);
    CoincidenceTables t;
    for (int i = 0; i < kDim; ++i)
      for (int j = 0; j < kDim; ++j) t.toa[i][j] = toa_r[i * kDim + j];
    for (int i = 0; i < kTsupProjectors; ++i)
      for (int j = 0; j < kTsupProjectors; ++j) t.tsup[i][j] = tsup_r[i * kTsupProjectors + j];
    values[r] = certified_fidelity(t, opt);
  });
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

inline CertifyResult certify_tables(const CoincidenceTables& tables, const CertifyOptions& opt = {}) {
  CertifyResult r;
  r.bounds = derive_bounds(tables_to_probabilities(tables));
  r.fidelity_closed_form = fidelity_closed_form(r.bounds);
  r.fidelity_sdp = fidelity_lower_bound_sdp(r.bounds, opt.sdp).value;
  r.schmidt_number = schmidt_number_certificate(r.fidelity_sdp);
  if (opt.bootstrap_resamples > 0)
    r.standard_error = bootstrap_uncertainty(tables, opt.bootstrap_resamples, opt.seed, opt.sdp, opt.threads);
  return r;
}

}  // namespace timebin
