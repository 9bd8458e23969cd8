#pragma once

// Oriented rectangles and cuboids: corners, minimum-area bounding rectangles
// and footprint overlap areas. Everything here is a pure function over values.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "aetree/errors.hpp"

namespace aetree {

inline constexpr double kPi = std::numbers::pi;

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
};

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend bool operator==(const Point3&, const Point3&) = default;
};

/// One building: footprint center (x, y), extents l >= w by convention,
/// height h (0 for flat boxes) and orientation a in [-pi/2, pi/2).
struct Cuboid {
  double x = 0.0;
  double y = 0.0;
  double l = 0.0;
  double w = 0.0;
  double h = 0.0;
  double a = 0.0;

  double footprint_area() const { return l * w; }

  friend bool operator==(const Cuboid&, const Cuboid&) = default;
};

using FootprintCorners = std::array<Point2, 4>;
using CuboidCorners = std::array<Point3, 8>;

/// Maps any finite angle onto [-pi/2, pi/2), modulo pi.
inline double normalize_angle(double a) {
  if (!std::isfinite(a)) throw InvalidArgument("normalize_angle: non-finite angle");
  double r = a - kPi * std::floor((a + kPi / 2) / kPi);
  // floor() can land one period off when a + pi/2 sits on a multiple of pi.
  if (r >= kPi / 2) r -= kPi;
  if (r < -kPi / 2) r += kPi;
  return r;
}

/// Distance between two orientations modulo pi, folded into [0, pi/2].
inline double angle_difference(double a, double b) {
  double d = std::fmod(std::abs(a - b), kPi);
  return d > kPi / 2 ? kPi - d : d;
}

inline bool is_valid(const Cuboid& c) {
  return std::isfinite(c.x) && std::isfinite(c.y) && std::isfinite(c.l) && std::isfinite(c.w) &&
         std::isfinite(c.h) && std::isfinite(c.a) && c.l >= 0 && c.w >= 0 && c.h >= 0;
}

inline void validate(const Cuboid& c) {
  if (!is_valid(c)) throw InvalidArgument("cuboid has non-finite or negative fields");
}

/// Builds a cuboid with its angle normalized; throws on invalid fields.
inline Cuboid make_cuboid(double x, double y, double l, double w, double h, double a) {
  Cuboid c{x, y, l, w, h, normalize_angle(a)};
  validate(c);
  return c;
}

/// Counter-clockwise footprint corners, starting at local (+l/2, +w/2).
inline FootprintCorners footprint_corners(const Cuboid& c) {
  const double ca = std::cos(c.a);
  const double sa = std::sin(c.a);
  const double hl = c.l / 2;
  const double hw = c.w / 2;
  constexpr std::array<std::array<double, 2>, 4> signs{{{1, 1}, {-1, 1}, {-1, -1}, {1, -1}}};
  FootprintCorners out;
  for (std::size_t k = 0; k < 4; ++k) {
    const double lx = signs[k][0] * hl;
    const double ly = signs[k][1] * hw;
    out[k] = {c.x + ca * lx - sa * ly, c.y + sa * lx + ca * ly};
  }
  return out;
}

/// Footprint corners at z = 0 followed by the same corners at z = h.
inline CuboidCorners cuboid_corners(const Cuboid& c) {
  const auto fp = footprint_corners(c);
  CuboidCorners out;
  for (std::size_t k = 0; k < 4; ++k) {
    out[k] = {fp[k].x, fp[k].y, 0.0};
    out[k + 4] = {fp[k].x, fp[k].y, c.h};
  }
  return out;
}

namespace detail {

inline double cross(const Point2& o, const Point2& a, const Point2& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

/// Andrew's monotone chain. Counter-clockwise, no collinear points, no repeats.
inline std::vector<Point2> convex_hull(std::vector<Point2> pts) {
  std::sort(pts.begin(), pts.end(),
            [](const Point2& a, const Point2& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return pts;
  std::vector<Point2> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

struct RectCandidate {
  double area;
  Cuboid rect;
};

// Keeps the smaller area; near-equal areas prefer the smallest |a|, then the smallest a.
inline void offer(RectCandidate& best, bool& have, const Cuboid& r) {
  const double area = r.l * r.w;
  if (!have) {
    best = {area, r};
    have = true;
    return;
  }
  const double tol = 1e-12 * std::max(1.0, std::abs(best.area));
  if (area < best.area - tol) {
    best = {area, r};
  } else if (area <= best.area + tol) {
    const double ab = std::abs(best.rect.a);
    const double ar = std::abs(r.a);
    if (ar < ab || (ar == ab && r.a < best.rect.a)) best = {area, r};
  }
}

// Emits the canonical (l >= w) rectangle(s) for box axis u at angle theta with
// projection ranges [u0,u1] x [v0,v1].
inline void offer_box(RectCandidate& best, bool& have, double theta, double ux, double uy, double u0,
                      double u1, double v0, double v1) {
  const double vx = -uy;
  const double vy = ux;
  const double cu = (u0 + u1) / 2;
  const double cv = (v0 + v1) / 2;
  const double cx = ux * cu + vx * cv;
  const double cy = uy * cu + vy * cv;
  const double lu = u1 - u0;
  const double lv = v1 - v0;
  const double sq_tol = 1e-12 * std::max(1.0, std::max(lu, lv));
  if (lu >= lv - sq_tol) offer(best, have, Cuboid{cx, cy, std::max(lu, lv), std::min(lu, lv), 0.0, normalize_angle(theta)});
  if (lv >= lu - sq_tol)
    offer(best, have, Cuboid{cx, cy, std::max(lu, lv), std::min(lu, lv), 0.0, normalize_angle(theta + kPi / 2)});
}

}  // namespace detail

/// Minimum-area oriented rectangle containing every point (rotating calipers
/// over the convex hull). The result has l >= w, h = 0 and a normalized angle;
/// among equal-area rectangles the one with the smallest |a| is returned.
inline Cuboid min_bounding_rect(std::span<const Point2> points) {
  if (points.empty()) throw InvalidArgument("min_bounding_rect: empty point set");
  for (const auto& p : points)
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw InvalidArgument("min_bounding_rect: non-finite point");

  const auto hull = detail::convex_hull(std::vector<Point2>(points.begin(), points.end()));
  if (hull.size() == 1) return Cuboid{hull[0].x, hull[0].y, 0.0, 0.0, 0.0, 0.0};

  detail::RectCandidate best{};
  bool have = false;
  const std::size_t n = hull.size();

  if (n == 2) {
    const double dx = hull[1].x - hull[0].x;
    const double dy = hull[1].y - hull[0].y;
    const double len = std::hypot(dx, dy);
    const double ux = dx / len;
    const double uy = dy / len;
    const double p0 = ux * hull[0].x + uy * hull[0].y;
    const double p1 = ux * hull[1].x + uy * hull[1].y;
    const double q = -uy * hull[0].x + ux * hull[0].y;
    detail::offer_box(best, have, std::atan2(uy, ux), ux, uy, std::min(p0, p1), std::max(p0, p1), q, q);
    return best.rect;
  }

  auto proj_u = [&](std::size_t k, double ux, double uy) { return ux * hull[k % n].x + uy * hull[k % n].y; };
  auto proj_v = [&](std::size_t k, double ux, double uy) { return -uy * hull[k % n].x + ux * hull[k % n].y; };

  // Calipers: for edge i, `far` maximizes the normal projection, `right` the
  // edge-direction projection and `left` minimizes it. All three only advance.
  std::size_t far = 1, right = 1, left = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Point2& a = hull[i];
    const Point2& b = hull[(i + 1) % n];
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    const double ux = (b.x - a.x) / len;
    const double uy = (b.y - a.y) / len;

    right = std::max(right, i + 1);
    for (std::size_t s = 0; s < n && proj_u(right + 1, ux, uy) >= proj_u(right, ux, uy); ++s) ++right;
    far = std::max(far, right);
    for (std::size_t s = 0; s < n && proj_v(far + 1, ux, uy) >= proj_v(far, ux, uy); ++s) ++far;
    left = std::max(left, far);
    for (std::size_t s = 0; s < n && proj_u(left + 1, ux, uy) <= proj_u(left, ux, uy); ++s) ++left;

    const double u0 = proj_u(left, ux, uy);
    const double u1 = proj_u(right, ux, uy);
    const double v0 = proj_v(i, ux, uy);
    const double v1 = proj_v(far, ux, uy);
    detail::offer_box(best, have, std::atan2(uy, ux), ux, uy, u0, u1, v0, v1);
  }
  return best.rect;
}

/// Signed shoelace area; positive for counter-clockwise polygons.
inline double polygon_signed_area(std::span<const Point2> poly) {
  double s = 0.0;
  for (std::size_t i = 0, n = poly.size(); i < n; ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % n];
    s += p.x * q.y - q.x * p.y;
  }
  return s / 2;
}

/// Area of the intersection of two footprints (Sutherland-Hodgman clipping).
/// Zero-area footprints never overlap anything.
inline double overlap_area(const Cuboid& p, const Cuboid& q) {
  if (p.footprint_area() <= 0.0 || q.footprint_area() <= 0.0) return 0.0;
  const auto subject = footprint_corners(p);
  const auto clip = footprint_corners(q);

  std::vector<Point2> poly(subject.begin(), subject.end());
  std::vector<Point2> next;
  next.reserve(8);
  for (std::size_t e = 0; e < 4 && !poly.empty(); ++e) {
    const Point2& a = clip[e];
    const Point2& b = clip[(e + 1) % 4];
    auto side = [&](const Point2& pt) { return detail::cross(a, b, pt); };
    next.clear();
    for (std::size_t i = 0, n = poly.size(); i < n; ++i) {
      const Point2& cur = poly[i];
      const Point2& prev = poly[(i + n - 1) % n];
      const double sc = side(cur);
      const double sp = side(prev);
      if (sc >= 0) {
        if (sp < 0) {
          const double t = sp / (sp - sc);
          next.push_back({prev.x + t * (cur.x - prev.x), prev.y + t * (cur.y - prev.y)});
        }
        next.push_back(cur);
      } else if (sp >= 0) {
        const double t = sp / (sp - sc);
        next.push_back({prev.x + t * (cur.x - prev.x), prev.y + t * (cur.y - prev.y)});
      }
    }
    poly.swap(next);
  }
  if (poly.size() < 3) return 0.0;
  return std::max(0.0, polygon_signed_area(poly));
}

}  // namespace aetree
