#pragma once

// Test-only reference computations, independent of the library code paths.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

namespace rali::testing {

/// Global minimum of the k-means objective by enumerating every assignment of
/// the points to k nonempty labelled groups.
inline double exhaustive_kmeans_objective(const std::vector<std::vector<double>>& points, std::size_t k) {
  const std::size_t n = points.size();
  const std::size_t dim = points.front().size();
  std::vector<std::size_t> label(n, 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    std::vector<std::size_t> count(k, 0);
    for (auto l : label) ++count[l];
    if (std::all_of(count.begin(), count.end(), [](std::size_t c) { return c > 0; })) {
      std::vector<std::vector<double>> mean(k, std::vector<double>(dim, 0.0));
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t d = 0; d < dim; ++d) mean[label[i]][d] += points[i][d] / static_cast<double>(count[label[i]]);
      }
      double sse = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t d = 0; d < dim; ++d) sse += (points[i][d] - mean[label[i]][d]) * (points[i][d] - mean[label[i]][d]);
      }
      best = std::min(best, sse);
    }
    std::size_t pos = 0;
    while (pos < n && ++label[pos] == k) label[pos++] = 0;
    if (pos == n) break;
  }
  return best;
}

/// Central difference (f(x+h) - f(x-h)) / 2h for one scalar parameter, restored afterwards.
inline double central_difference(double& param, const std::function<double()>& f, double h = 1e-5) {
  const double saved = param;
  param = saved + h;
  const double up = f();
  param = saved - h;
  const double down = f();
  param = saved;
  return (up - down) / (2.0 * h);
}

/// |a - b| relative to the larger magnitude, floored at 1e-6 so that
/// near-zero partials are compared on an absolute scale.
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

}  // namespace rali::testing
