#pragma once

// Layout evaluation: point-cloud distances (Chamfer, EMD), voxel-occupancy
// JSD, coverage / minimum matching distance, and the overlapping area ratio.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "aetree/errors.hpp"
#include "aetree/geometry.hpp"
#include "aetree/text_io.hpp"

namespace aetree {

enum class CloudMode : std::uint8_t { k2D, k3D };

/// Points are stored with three coordinates; 2D clouds keep z = 0.
struct PointCloud {
  int dim = 3;
  std::vector<std::array<double, 3>> points;

  std::size_t size() const { return points.size(); }
};

inline PointCloud layout_to_points(std::span<const Cuboid> set, CloudMode mode) {
  if (set.empty()) throw InvalidArgument("layout_to_points: empty layout");
  PointCloud pc;
  pc.dim = mode == CloudMode::k2D ? 2 : 3;
  pc.points.reserve(set.size() * (mode == CloudMode::k2D ? 4 : 8));
  for (const auto& c : set) {
    if (mode == CloudMode::k2D) {
      for (const auto& p : footprint_corners(c)) pc.points.push_back({p.x, p.y, 0.0});
    } else {
      for (const auto& p : cuboid_corners(c)) pc.points.push_back({p.x, p.y, p.z});
    }
  }
  return pc;
}

namespace detail {

inline void check_pair(const PointCloud& a, const PointCloud& b) {
  if (a.points.empty() || b.points.empty()) throw InvalidArgument("point clouds must be non-empty");
  if (a.dim != b.dim) throw InvalidArgument("point clouds differ in dimension");
}

inline double sq_dist(const std::array<double, 3>& p, const std::array<double, 3>& q) {
  const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
  return dx * dx + dy * dy + dz * dz;
}

inline double mean_nearest_sq(const PointCloud& from, const PointCloud& to) {
  double sum = 0.0;
  for (const auto& p : from.points) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to.points) best = std::min(best, sq_dist(p, q));
    sum += best;
  }
  return sum / static_cast<double>(from.size());
}

/// Sum in ascending order, so any permutation of the same values gives the
/// same result bit for bit.
inline double canonical_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace detail

/// Mean squared nearest-neighbour distance from a to b plus from b to a.
inline double chamfer(const PointCloud& a, const PointCloud& b) {
  detail::check_pair(a, b);
  return detail::mean_nearest_sq(a, b) + detail::mean_nearest_sq(b, a);
}

/// Minimum-cost perfect matching (Hungarian method with potentials).
/// Returns assignment[i] = column matched to row i.
inline std::vector<std::size_t> hungarian(const std::vector<double>& cost, std::size_t n) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assign(n);
  for (std::size_t j = 1; j <= n; ++j) assign[p[j] - 1] = j - 1;
  return assign;
}

/// Mean Euclidean distance under the optimal one-to-one matching. The matched
/// distances are summed in ascending order.
inline double emd(const PointCloud& a, const PointCloud& b) {
  detail::check_pair(a, b);
  if (a.size() != b.size()) throw InvalidArgument("emd requires clouds of equal size");
  const std::size_t n = a.size();
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) cost[i * n + j] = std::sqrt(detail::sq_dist(a.points[i], b.points[j]));
  const auto assign = hungarian(cost, n);
  std::vector<double> matched(n);
  for (std::size_t i = 0; i < n; ++i) matched[i] = cost[i * n + assign[i]];
  return detail::canonical_sum(std::move(matched)) / static_cast<double>(n);
}

/// Occupancy JSD on a res^dim grid spanning the union bounds of both sets,
/// widened by 1% (an axis with zero extent gets width 1).
inline double jsd(std::span<const PointCloud> ref, std::span<const PointCloud> gen, int resolution = 28) {
  if (ref.empty() || gen.empty()) throw InvalidArgument("jsd: empty set");
  if (resolution < 1) throw InvalidArgument("jsd: resolution must be positive");
  const int dim = ref.front().dim;
  std::array<double, 3> lo{}, hi{};
  lo.fill(std::numeric_limits<double>::infinity());
  hi.fill(-std::numeric_limits<double>::infinity());
  std::size_t total_points = 0;
  for (auto group : {ref, gen})
    for (const auto& pc : group) {
      if (pc.dim != dim) throw InvalidArgument("jsd: mixed dimensions");
      for (const auto& p : pc.points)
        for (int k = 0; k < 3; ++k) {
          lo[static_cast<std::size_t>(k)] = std::min(lo[static_cast<std::size_t>(k)], p[static_cast<std::size_t>(k)]);
          hi[static_cast<std::size_t>(k)] = std::max(hi[static_cast<std::size_t>(k)], p[static_cast<std::size_t>(k)]);
        }
      total_points += pc.size();
    }
  if (total_points == 0) throw InvalidArgument("jsd: no points");
  std::array<double, 3> start{}, width{};
  for (std::size_t k = 0; k < 3; ++k) {
    const double ext = hi[k] - lo[k];
    width[k] = ext > 0 ? ext * 1.01 : 1.0;
    start[k] = (lo[k] + hi[k]) / 2 - width[k] / 2;
  }
  const auto res = static_cast<std::size_t>(resolution);
  std::size_t cells = res * res;
  if (dim == 3) cells *= res;

  auto histogram = [&](std::span<const PointCloud> group) {
    std::vector<double> h(cells, 0.0);
    double count = 0;
    for (const auto& pc : group)
      for (const auto& p : pc.points) {
        std::size_t idx = 0;
        for (std::size_t k = 0; k < static_cast<std::size_t>(dim); ++k) {
          auto c = static_cast<long long>(std::floor((p[k] - start[k]) / width[k] * static_cast<double>(res)));
          c = std::clamp(c, 0LL, static_cast<long long>(res) - 1);
          idx = idx * res + static_cast<std::size_t>(c);
        }
        h[idx] += 1.0;
        count += 1.0;
      }
    if (count == 0) throw InvalidArgument("jsd: a set has no points");
    for (double& v : h) v /= count;
    return h;
  };
  const auto P = histogram(ref);
  const auto Q = histogram(gen);
  double kl_p = 0.0, kl_q = 0.0;
  for (std::size_t i = 0; i < cells; ++i) {
    const double m = (P[i] + Q[i]) / 2;
    if (P[i] > 0) kl_p += P[i] * std::log(P[i] / m);
    if (Q[i] > 0) kl_q += Q[i] * std::log(Q[i] / m);
  }
  return std::clamp(0.5 * kl_p + 0.5 * kl_q, 0.0, std::numbers::ln2);
}

/// Index of the Chamfer-nearest reference cloud; the lowest index wins ties.
inline std::size_t nearest_reference(std::span<const PointCloud> ref, const PointCloud& g) {
  std::size_t best_i = 0;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double d = chamfer(ref[i], g);
    if (d < best) {
      best = d;
      best_i = i;
    }
  }
  return best_i;
}

/// Fraction of reference clouds that are the nearest match of some generated cloud.
inline double coverage(std::span<const PointCloud> ref, std::span<const PointCloud> gen) {
  if (ref.empty() || gen.empty()) throw InvalidArgument("coverage: empty set");
  std::vector<char> hit(ref.size(), 0);
  for (const auto& g : gen) hit[nearest_reference(ref, g)] = 1;
  return static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / static_cast<double>(ref.size());
}

/// Mean over reference clouds of the smallest Chamfer distance to any generated cloud.
inline double mmd(std::span<const PointCloud> ref, std::span<const PointCloud> gen) {
  if (ref.empty() || gen.empty()) throw InvalidArgument("mmd: empty set");
  double sum = 0.0;
  for (const auto& r : ref) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& g : gen) best = std::min(best, chamfer(r, g));
    sum += best;
  }
  return sum / static_cast<double>(ref.size());
}

inline constexpr double kOverlapEpsilon = 1e-9;

/// Area of the objects that overlap any other object by more than epsilon,
/// over the total area. Zero-area objects are ignored.
inline double oar(std::span<const Cuboid> set) {
  if (set.empty()) throw InvalidArgument("oar: empty set");
  std::vector<double> area(set.size());
  double total = 0.0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    area[i] = set[i].footprint_area();
    if (!std::isfinite(area[i])) throw InvalidArgument("oar: non-finite footprint area");
    total += area[i];
  }
  if (!(total > 0)) throw InvalidArgument("oar: every footprint has zero area");
  std::vector<char> overlapped(set.size(), 0);
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (area[i] <= 0) continue;
    for (std::size_t j = i + 1; j < set.size(); ++j) {
      if (area[j] <= 0 || (overlapped[i] && overlapped[j])) continue;
      if (overlap_area(set[i], set[j]) > kOverlapEpsilon) overlapped[i] = overlapped[j] = 1;
    }
  }
  double num = 0.0;
  for (std::size_t i = 0; i < set.size(); ++i)
    if (overlapped[i]) num += area[i];
  return num / total;
}

/// Aggregate OAR over many layouts: overlapped area summed over layouts
/// divided by total area summed over layouts.
inline double oar_pooled(std::span<const std::vector<Cuboid>> layouts) {
  double num = 0.0, den = 0.0;
  for (const auto& l : layouts) {
    double total = 0.0;
    for (const auto& c : l) total += c.footprint_area();
    if (!(total > 0)) continue;
    num += oar(l) * total;
    den += total;
  }
  if (!(den > 0)) throw InvalidArgument("oar: every footprint has zero area");
  return num / den;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricReport {
  std::optional<double> jsd, cov, mmd, oar, cd, emd;
};

/// Columns in the order JSD, COV, MMD, OAR, CD, EMD; absent values are empty.
inline void write_report_csv(std::ostream& out, const MetricReport& r) {
  auto cell = [](const std::optional<double>& v) { return v ? text::fmt(*v) : std::string(); };
  out << "jsd,cov,mmd,oar,cd,emd\n";
  out << cell(r.jsd) << ',' << cell(r.cov) << ',' << cell(r.mmd) << ',' << cell(r.oar) << ',' << cell(r.cd) << ','
      << cell(r.emd) << '\n';
}

/// Human-readable table; fractions are shown as percentages.
inline void write_report_table(std::ostream& out, const MetricReport& r) {
  auto row = [&](const char* name, const std::optional<double>& v, bool percent) {
    if (!v) return;
    char buf[64];
    if (percent)
      std::snprintf(buf, sizeof buf, "%-4s %10.2f%%\n", name, *v * 100);
    else
      std::snprintf(buf, sizeof buf, "%-4s %11.4f\n", name, *v);
    out << buf;
  };
  row("JSD", r.jsd, false);
  row("COV", r.cov, true);
  row("MMD", r.mmd, false);
  row("OAR", r.oar, true);
  row("CD", r.cd, false);
  row("EMD", r.emd, false);
}

}  // namespace aetree
