#pragma once

// Brute-force reference implementations of the evaluation metrics.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "aetree/metrics.hpp"

namespace aetree::oracle {

/// Full distance matrix, then row and column minima.
inline double chamfer(const PointCloud& a, const PointCloud& b) {
  std::vector<std::vector<double>> d(a.size(), std::vector<double>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) {
        const double t = a.points[i][static_cast<std::size_t>(k)] - b.points[j][static_cast<std::size_t>(k)];
        s += t * t;
      }
      d[i][j] = s;
    }
  double ra = 0, rb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ra += *std::min_element(d[i].begin(), d[i].end());
  for (std::size_t j = 0; j < b.size(); ++j) {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < a.size(); ++i) m = std::min(m, d[i][j]);
    rb += m;
  }
  return ra / static_cast<double>(a.size()) + rb / static_cast<double>(b.size());
}

/// Exhaustive scan over all n! matchings; the matched distances of each
/// candidate are summed in ascending order.
inline double emd(const PointCloud& a, const PointCloud& b) {
  const std::size_t n = a.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> d(n);
  do {
    for (std::size_t i = 0; i < n; ++i) {
      const auto& p = a.points[i];
      const auto& q = b.points[perm[i]];
      d[i] = std::sqrt((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) + (p[2] - q[2]) * (p[2] - q[2]));
    }
    auto sorted = d;
    std::sort(sorted.begin(), sorted.end());
    double s = 0;
    for (double x : sorted) s += x;
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(n);
}

inline double coverage(const std::vector<PointCloud>& ref, const std::vector<PointCloud>& gen) {
  std::vector<bool> hit(ref.size(), false);
  for (const auto& g : gen) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < ref.size(); ++i)
      if (oracle::chamfer(ref[i], g) < oracle::chamfer(ref[arg], g)) arg = i;
    hit[arg] = true;
  }
  return static_cast<double>(std::count(hit.begin(), hit.end(), true)) / static_cast<double>(ref.size());
}

inline double mmd(const std::vector<PointCloud>& ref, const std::vector<PointCloud>& gen) {
  double s = 0;
  for (const auto& r : ref) {
    std::vector<double> d;
    for (const auto& g : gen) d.push_back(oracle::chamfer(r, g));
    s += *std::min_element(d.begin(), d.end());
  }
  return s / static_cast<double>(ref.size());
}

}  // namespace aetree::oracle
