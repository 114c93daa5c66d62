#pragma once

// Brute-force reference for the fidelity completion problem. Correlation
// matrices are generated from D-vine partial correlations (every point of
// (-1,1)^6 gives a valid 4x4 correlation matrix and every one is reached), so
// the neighbor constraints become plain boxes on the first-level parameters.
// A coarse grid picks starting points that are then polished by compass
// search. Shares no code with the library solver.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

namespace oracle {

struct Instance {
  std::array<double, 4> p{};
  std::array<double, 3> lower{};
};

using Params = std::array<double, 6>;  // r01, r12, r23, r02|1, r13|2, r03|12
using Mat4 = std::array<std::array<double, 4>, 4>;

inline Mat4 vine_correlation(const Params& x) {
  Mat4 c{};
  for (int i = 0; i < 4; ++i) c[i][i] = 1.0;
  c[0][1] = c[1][0] = x[0];
  c[1][2] = c[2][1] = x[1];
  c[2][3] = c[3][2] = x[2];
  auto given_one = [&](int a, int s, int b, double partial) {
    return c[a][s] * c[s][b] + partial * std::sqrt(std::max(0.0, (1 - c[a][s] * c[a][s]) * (1 - c[s][b] * c[s][b])));
  };
  c[0][2] = c[2][0] = given_one(0, 1, 2, x[3]);
  c[1][3] = c[3][1] = given_one(1, 2, 3, x[4]);
  // Conditional on {1,2}: c03 = u^T S^-1 v + r * sqrt((1 - u^T S^-1 u)(1 - v^T S^-1 v)).
  const double s12 = c[1][2];
  const double det = 1 - s12 * s12;
  const double u1 = c[0][1], u2 = c[0][2], v1 = c[3][1], v2 = c[3][2];
  auto quad = [&](double a1, double a2, double b1, double b2) { return (a1 * b1 + a2 * b2 - s12 * (a1 * b2 + a2 * b1)) / det; };
  const double resid_u = std::max(0.0, 1 - quad(u1, u2, u1, u2));
  const double resid_v = std::max(0.0, 1 - quad(v1, v2, v1, v2));
  c[0][3] = c[3][0] = quad(u1, u2, v1, v2) + x[5] * std::sqrt(resid_u * resid_v);
  return c;
}

inline double objective(const Instance& in, const Params& x) {
  const Mat4 c = vine_correlation(x);
  std::array<double, 4> w{};
  for (int i = 0; i < 4; ++i) w[i] = std::sqrt(std::max(0.0, in.p[i])) / 2.0;
  double f = 0.0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) f += w[i] * w[j] * c[i][j];
  return f;
}

struct Box {
  Params lo, hi;
};

inline Box feasible_box(const Instance& in, double margin) {
  Box b;
  for (int k = 0; k < 6; ++k) {
    b.lo[k] = -1 + margin;
    b.hi[k] = 1 - margin;
  }
  for (int i = 0; i < 3; ++i) {
    const double cap = std::sqrt(in.p[i] * in.p[i + 1]);
    if (cap > 0) b.lo[i] = std::clamp(in.lower[i] / cap, -1 + margin, 1 - margin);
  }
  return b;
}

/// Minimum of 1/4 sum_ij M_ij over PSD M with M_ii = p_i, M_{i,i+1} >= L_i.
inline double minimum_fidelity(const Instance& in, int grid = 9, double margin = 1e-9) {
  const Box box = feasible_box(in, margin);
  struct Start {
    double f;
    Params x;
  };
  std::vector<Start> starts;
  Params x{};
  std::array<int, 6> idx{};
  for (;;) {
    for (int k = 0; k < 6; ++k) x[k] = box.lo[k] + (box.hi[k] - box.lo[k]) * idx[k] / (grid - 1);
    starts.push_back({objective(in, x), x});
    int k = 0;
    while (k < 6 && ++idx[k] == grid) idx[k++] = 0;
    if (k == 6) break;
  }
  const std::size_t keep = std::min<std::size_t>(12, starts.size());
  std::partial_sort(starts.begin(), starts.begin() + static_cast<std::ptrdiff_t>(keep), starts.end(),
                    [](const Start& a, const Start& b) { return a.f < b.f; });

  double best = starts.front().f;
  for (std::size_t s = 0; s < keep; ++s) {
    Params cur = starts[s].x;
    double fcur = starts[s].f;
    double step = 0.5 * (box.hi[0] - box.lo[0]) / (grid - 1) + 0.1;
    while (step > 1e-12) {
      bool improved = false;
      for (int k = 0; k < 6; ++k) {
        for (double dir : {-1.0, 1.0}) {
          Params t = cur;
          t[k] = std::clamp(t[k] + dir * step, box.lo[k], box.hi[k]);
          const double ft = objective(in, t);
          if (ft < fcur) {
            cur = t;
            fcur = ft;
            improved = true;
          }
        }
      }
      if (!improved) step *= 0.5;
    }
    best = std::min(best, fcur);
  }
  return best;
}

}  // namespace oracle
