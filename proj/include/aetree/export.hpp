#pragma once

// Static renderings of layouts: SVG plans and OBJ meshes. Output bytes depend
// only on the input values.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "aetree/errors.hpp"
#include "aetree/geometry.hpp"

namespace aetree {

struct NamedLayout {
  std::string name;
  std::vector<Cuboid> cuboids;
};

struct SvgOptions {
  double cell_px = 240.0;
  double margin_px = 12.0;
  /// Layouts per row; 0 puts every layout on one row.
  int columns = 0;
  std::string fill = "#9ecae1";
  std::string stroke = "#08519c";
};

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  return out;
}

}  // namespace detail

/// One `<g>` per layout laid out on a grid, one `<polygon>` per footprint.
/// All layouts share a scale so sizes are comparable across cells; y points up.
inline void write_svg(std::ostream& out, std::span<const NamedLayout> layouts, const SvgOptions& opt = {}) {
  if (layouts.empty()) throw InvalidArgument("write_svg: nothing to draw");
  const int n = static_cast<int>(layouts.size());
  const int cols = opt.columns > 0 ? std::min(opt.columns, n) : n;
  const int rows = (n + cols - 1) / cols;
  double extent = 0.0;
  std::vector<Point2> centers;
  for (const auto& l : layouts) {
    double lo_x = std::numeric_limits<double>::infinity(), lo_y = lo_x, hi_x = -lo_x, hi_y = -lo_x;
    for (const auto& c : l.cuboids)
      for (const auto& p : footprint_corners(c)) {
        lo_x = std::min(lo_x, p.x);
        hi_x = std::max(hi_x, p.x);
        lo_y = std::min(lo_y, p.y);
        hi_y = std::max(hi_y, p.y);
      }
    if (l.cuboids.empty()) {
      centers.push_back({0, 0});
      continue;
    }
    centers.push_back({(lo_x + hi_x) / 2, (lo_y + hi_y) / 2});
    extent = std::max({extent, hi_x - lo_x, hi_y - lo_y});
  }
  const double inner = opt.cell_px - 2 * opt.margin_px;
  const double scale = extent > 0 ? inner / extent : 1.0;
  const double width = cols * opt.cell_px, height = rows * opt.cell_px;

  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::num(width) << "\" height=\""
      << detail::num(height) << "\" viewBox=\"0 0 " << detail::num(width) << ' ' << detail::num(height) << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int i = 0; i < n; ++i) {
    const auto& l = layouts[static_cast<std::size_t>(i)];
    const double ox = (i % cols + 0.5) * opt.cell_px, oy = (i / cols + 0.5) * opt.cell_px;
    out << "<g id=\"" << detail::xml_escape(l.name) << "\" fill=\"" << opt.fill << "\" fill-opacity=\"0.6\" stroke=\""
        << opt.stroke << "\" stroke-width=\"1\">\n";
    out << "<title>" << detail::xml_escape(l.name) << "</title>\n";
    for (const auto& c : l.cuboids) {
      out << "<polygon points=\"";
      bool first = true;
      for (const auto& p : footprint_corners(c)) {
        const double sx = ox + (p.x - centers[static_cast<std::size_t>(i)].x) * scale;
        const double sy = oy - (p.y - centers[static_cast<std::size_t>(i)].y) * scale;
        out << (first ? "" : " ") << detail::num(sx) << ',' << detail::num(sy);
        first = false;
      }
      out << "\"/>\n";
    }
    out << "</g>\n";
  }
  out << "</svg>\n";
}

/// Eight vertices and six outward-facing quads per cuboid, one object per layout.
inline void write_obj(std::ostream& out, std::span<const NamedLayout> layouts) {
  out << "# aetree layouts\n";
  std::size_t base = 1;
  for (const auto& l : layouts) {
    out << "o " << l.name << '\n';
    for (const auto& c : l.cuboids) {
      for (const auto& p : cuboid_corners(c)) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "v %.9g %.9g %.9g\n", p.x, p.y, p.z);
        out << buf;
      }
      // corners 0-3: bottom ring counter-clockwise seen from above, 4-7: top ring
      static constexpr int kFaces[6][4] = {{0, 3, 2, 1}, {4, 5, 6, 7}, {0, 1, 5, 4},
                                           {1, 2, 6, 5}, {2, 3, 7, 6}, {3, 0, 4, 7}};
      for (const auto& f : kFaces)
        out << "f " << base + static_cast<std::size_t>(f[0]) << ' ' << base + static_cast<std::size_t>(f[1]) << ' '
            << base + static_cast<std::size_t>(f[2]) << ' ' << base + static_cast<std::size_t>(f[3]) << '\n';
      base += 8;
    }
  }
}

}  // namespace aetree
