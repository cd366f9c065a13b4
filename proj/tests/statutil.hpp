#pragma once

// Test-only statistics helpers.

#include <algorithm>
#include <vector>

#include "flowalign/util.hpp"

namespace teststat {

// Hartigan dip statistic: the smallest band radius d such that a CDF that is
// convex up to a mode and concave after fits inside [F_n - d, F_n + d].
//
// Computed in count units: a convex fit of the prefix 0..k exists within
// radius D iff the greatest convex minorant of the upper band touches every
// lower band value, which reduces to
//   D >= 1/2 * max_{m<=k} ((m+1) - hull_k(x_m))
// with hull_k the lower convex hull of the points (x_i, i). The concave
// suffix is the mirror image. dip = min over mode splits of the larger side,
// divided by n.
//
// Exact anchors: evenly spaced points -> 1/(2n); two equal atoms -> 1/4;
// three equal atoms -> 1/6.
inline double dip_statistic(std::vector<double> x) {
  const std::size_t n = x.size();
  if (n < 2) return 0.0;
  std::sort(x.begin(), x.end());
  if (x.front() == x.back()) return 0.0;

  auto side = [n](const std::vector<double>& xv) {
    std::vector<double> need(n, 0.0);
    std::vector<double> hx, hy;
    std::vector<std::size_t> span;  // first constraint index covered by segment
    hx.reserve(n);
    hy.reserve(n);
    span.reserve(n);
    double running = 0.0;
    auto seg_val = [](double x0, double y0, double x1, double y1, double xq) {
      if (x1 == x0) return std::min(y0, y1);
      return y0 + (y1 - y0) * (xq - x0) / (x1 - x0);
    };
    for (std::size_t i = 0; i < n; ++i) {
      const double xi = xv[i];
      const double yi = static_cast<double>(i);
      std::size_t lo_cover = i;
      while (hx.size() >= 2 &&
             (yi - hy[hx.size() - 2]) * (hx.back() - hx[hx.size() - 2]) <=
                 (hy.back() - hy[hx.size() - 2]) * (xi - hx[hx.size() - 2])) {
        hx.pop_back();
        hy.pop_back();
        lo_cover = span.back();
        span.pop_back();
      }
      if (!(!hx.empty() && xi == hx.back())) {
        if (!hx.empty()) span.push_back(lo_cover);
        hx.push_back(xi);
        hy.push_back(yi);
      }
      if (hx.size() >= 2) {
        const double x0 = hx[hx.size() - 2], y0 = hy[hx.size() - 2];
        const double x1 = hx.back(), y1 = hy.back();
        for (std::size_t m = span.back(); m <= i; ++m) {
          const double g = seg_val(x0, y0, x1, y1, xv[m]);
          running = std::max(running, (static_cast<double>(m + 1) - g) * 0.5);
        }
      } else {
        running = std::max(running, (static_cast<double>(i + 1) - hy.front()) * 0.5);
      }
      need[i] = running;
    }
    return need;
  };

  const std::vector<double> d_convex = side(x);
  std::vector<double> mirrored(n);
  for (std::size_t i = 0; i < n; ++i) mirrored[i] = -x[n - 1 - i];
  const std::vector<double> d_concave_rev = side(mirrored);

  double best = -1.0;
  for (std::size_t k = 0; k <= n; ++k) {  // suffix starts at index k
    const double a = (k > 0) ? d_convex[k - 1] : 0.0;
    const double b = (k < n) ? d_concave_rev[n - 1 - k] : 0.0;
    const double m = std::max(a, b);
    if (best < 0.0 || m < best) best = m;
  }
  return best / static_cast<double>(n);
}

// Largest dip over `reps` samples of size n drawn from the uniform
// distribution (the least favorable unimodal null for calibration).
inline double uniform_null_dip_max(std::size_t n, int reps, std::uint64_t seed) {
  flowalign::util::Rng rng(seed);
  double worst = 0.0;
  for (int r = 0; r < reps; ++r) {
    std::vector<double> x(n);
    for (auto& v : x) v = rng.uniform();
    worst = std::max(worst, dip_statistic(std::move(x)));
  }
  return worst;
}

}  // namespace teststat
