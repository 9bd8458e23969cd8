#pragma once

// Building ingestion, k-nearest layout sets, seeded dataset splits and the
// synthetic city generator.
//
// Buildings file (one JSON object per line):
//   {"format":"aetree-buildings","version":1}
//   {"id":"b1","footprint":[[x,y],[x,y],[x,y],...],"height":12.0}
// `height` is optional (0 means a flat, 2D record). A closing vertex equal to
// the first one is dropped.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "aetree/errors.hpp"
#include "aetree/geometry.hpp"
#include "aetree/spatial_tree.hpp"
#include "aetree/text_io.hpp"

namespace aetree {

struct BuildingRecord {
  std::string id;
  std::vector<Point2> footprint;
  double height = 0.0;
};

/// A building reduced to its box plus the footprint centroid used for k-NN.
struct Building {
  std::string id;
  Cuboid box;
  Point2 centroid;
};

inline constexpr const char* kBuildingsFormat = "aetree-buildings";

namespace detail {

inline bool segments_touch(Point2 a, Point2 b, Point2 c, Point2 d) {
  auto orient = [](Point2 p, Point2 q, Point2 r) {
    const double v = cross(p, q, r);
    return (v > 0) - (v < 0);
  };
  auto on_segment = [](Point2 p, Point2 q, Point2 r) {
    return std::min(p.x, q.x) <= r.x && r.x <= std::max(p.x, q.x) && std::min(p.y, q.y) <= r.y &&
           r.y <= std::max(p.y, q.y);
  };
  const int o1 = orient(a, b, c), o2 = orient(a, b, d), o3 = orient(c, d, a), o4 = orient(c, d, b);
  if (o1 != o2 && o3 != o4) return true;
  return (o1 == 0 && on_segment(a, b, c)) || (o2 == 0 && on_segment(a, b, d)) || (o3 == 0 && on_segment(c, d, a)) ||
         (o4 == 0 && on_segment(c, d, b));
}

}  // namespace detail

/// True when no two non-adjacent edges meet and adjacent edges share only
/// their common vertex.
inline bool is_simple_polygon(std::span<const Point2> poly) {
  const std::size_t n = poly.size();
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i) {
    const Point2 a = poly[i], b = poly[(i + 1) % n];
    if (a.x == b.x && a.y == b.y) return false;
    for (std::size_t j = i + 1; j < n; ++j) {
      const Point2 c = poly[j], d = poly[(j + 1) % n];
      const bool adjacent = j == i + 1 || (i == 0 && j == n - 1);
      if (adjacent) {
        // Adjacent edges may only fold back onto each other when collinear.
        const Point2 shared = j == i + 1 ? b : a;
        const Point2 p = j == i + 1 ? a : b;
        const Point2 q = j == i + 1 ? d : c;
        if (detail::cross(shared, p, q) == 0 && ((p.x - shared.x) * (q.x - shared.x) + (p.y - shared.y) * (q.y - shared.y)) > 0)
          return false;
        continue;
      }
      if (detail::segments_touch(a, b, c, d)) return false;
    }
  }
  return true;
}

inline void validate(const BuildingRecord& b, std::size_t line = 0) {
  if (b.id.empty() || b.id.find_first_of(" \t\r\n") != std::string::npos)
    throw SchemaError("building id must be a non-empty token without whitespace", line);
  if (b.footprint.size() < 3) throw SchemaError("footprint needs at least 3 vertices", line);
  for (const auto& p : b.footprint)
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw SchemaError("footprint has non-finite coordinates", line);
  if (!std::isfinite(b.height) || b.height < 0) throw SchemaError("height must be finite and non-negative", line);
  if (!is_simple_polygon(b.footprint)) throw SchemaError("footprint is not a simple polygon", line);
}

/// Parses and validates a buildings file. Errors carry the 1-based line.
inline std::vector<BuildingRecord> read_buildings(std::istream& in) {
  using nlohmann::json;
  std::vector<BuildingRecord> out;
  std::string line;
  std::size_t number = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw SchemaError(std::string("malformed JSON: ") + e.what(), number);
    }
    if (!j.is_object()) throw SchemaError("each line must be a JSON object", number);
    if (!header) {
      if (j.value("format", std::string()) != kBuildingsFormat || !j.contains("version") ||
          !j["version"].is_number_integer())
        throw SchemaError(std::string("first record must be {\"format\":\"") + kBuildingsFormat + "\",\"version\":1}",
                          number);
      if (j["version"].get<int>() != 1) throw SchemaError("unsupported buildings version", number);
      header = true;
      continue;
    }
    BuildingRecord b;
    try {
      const auto& id = j.at("id");
      b.id = id.is_string() ? id.get<std::string>() : id.dump();
      for (const auto& v : j.at("footprint")) {
        if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
          throw SchemaError("footprint vertices must be [x, y] number pairs", number);
        b.footprint.push_back({v[0].get<double>(), v[1].get<double>()});
      }
      if (j.contains("height") && !j["height"].is_null()) {
        if (!j["height"].is_number()) throw SchemaError("height must be a number", number);
        b.height = j["height"].get<double>();
      }
    } catch (const json::exception& e) {
      throw SchemaError(std::string("bad building record: ") + e.what(), number);
    }
    if (b.footprint.size() > 3 && b.footprint.front().x == b.footprint.back().x &&
        b.footprint.front().y == b.footprint.back().y)
      b.footprint.pop_back();
    validate(b, number);
    out.push_back(std::move(b));
  }
  if (!header) throw SchemaError("empty buildings file", number + 1);
  return out;
}

inline void write_buildings(std::ostream& out, std::span<const BuildingRecord> buildings) {
  out << "{\"format\":\"" << kBuildingsFormat << "\",\"version\":1}\n";
  for (const auto& b : buildings) {
    out << "{\"id\":" << nlohmann::json(b.id).dump() << ",\"footprint\":[";
    for (std::size_t k = 0; k < b.footprint.size(); ++k)
      out << (k ? "," : "") << '[' << text::fmt(b.footprint[k].x) << ',' << text::fmt(b.footprint[k].y) << ']';
    out << "],\"height\":" << text::fmt(b.height) << "}\n";
  }
}

/// Area-weighted centroid of a simple polygon; vertex mean when the area vanishes.
inline Point2 polygon_centroid(std::span<const Point2> poly) {
  const double a = polygon_signed_area(poly);
  if (std::abs(a) < 1e-300) {
    Point2 m{0, 0};
    for (const auto& p : poly) m = {m.x + p.x, m.y + p.y};
    return {m.x / static_cast<double>(poly.size()), m.y / static_cast<double>(poly.size())};
  }
  double cx = 0, cy = 0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Point2 p = poly[i], q = poly[(i + 1) % poly.size()];
    const double c = p.x * q.y - q.x * p.y;
    cx += (p.x + q.x) * c;
    cy += (p.y + q.y) * c;
  }
  return {cx / (6 * a), cy / (6 * a)};
}

inline constexpr double kDegenerateArea = 1e-12;

/// MBR of the footprint with the record height; empty for degenerate polygons.
inline std::optional<Cuboid> footprint_to_cuboid(const BuildingRecord& b) {
  if (std::abs(polygon_signed_area(b.footprint)) < kDegenerateArea) return std::nullopt;
  Cuboid c = min_bounding_rect(b.footprint);
  c.h = b.height;
  return c;
}

struct IngestResult {
  std::vector<Building> buildings;
  std::vector<std::string> warnings;
};

inline IngestResult to_buildings(std::span<const BuildingRecord> records) {
  IngestResult r;
  for (const auto& rec : records) {
    const auto box = footprint_to_cuboid(rec);
    if (!box) {
      r.warnings.push_back("skipped degenerate footprint '" + rec.id + "'");
      continue;
    }
    r.buildings.push_back({rec.id, *box, polygon_centroid(rec.footprint)});
  }
  return r;
}

/// Indices of the k buildings forming `anchor`'s set: the anchor first, then
/// the k-1 others nearest by centroid distance, ties by id.
inline std::vector<std::size_t> nearest_members(std::span<const Building> all, std::size_t anchor, std::size_t k) {
  std::vector<std::size_t> others;
  others.reserve(all.size() - 1);
  for (std::size_t i = 0; i < all.size(); ++i)
    if (i != anchor) others.push_back(i);
  const Point2 c = all[anchor].centroid;
  auto d2 = [&](std::size_t i) {
    const double dx = all[i].centroid.x - c.x, dy = all[i].centroid.y - c.y;
    return dx * dx + dy * dy;
  };
  const auto take = static_cast<std::ptrdiff_t>(k - 1);
  std::partial_sort(others.begin(), others.begin() + take, others.end(), [&](std::size_t a, std::size_t b) {
    const double da = d2(a), db = d2(b);
    if (da != db) return da < db;
    if (all[a].id != all[b].id) return all[a].id < all[b].id;
    return a < b;
  });
  std::vector<std::size_t> out{anchor};
  out.insert(out.end(), others.begin(), others.begin() + take);
  return out;
}

/// One frame-normalized set per anchor building, named after the anchor.
inline std::vector<LayoutSet> build_layout_sets(std::span<const Building> buildings, std::size_t k = 32) {
  if (k < 2) throw InvalidArgument("layout sets need k >= 2");
  if (buildings.size() < k)
    throw InvalidArgument("need at least k = " + std::to_string(k) + " buildings, got " +
                          std::to_string(buildings.size()));
  std::vector<LayoutSet> sets;
  sets.reserve(buildings.size());
  for (std::size_t a = 0; a < buildings.size(); ++a) {
    LayoutSet s;
    s.id = buildings[a].id;
    for (std::size_t i : nearest_members(buildings, a, k)) s.cuboids.push_back(buildings[i].box);
    sets.push_back(normalize_frame(s));
  }
  return sets;
}

// ---------------------------------------------------------------------------
// Splits

enum class Split : std::uint8_t { kTrain, kVal, kTest };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s, std::size_t line = 0) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw SchemaError("unknown split '" + std::string(s) + "'", line);
}

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::array<double, 3> ratios{0.7, 0.1, 0.2};
  /// (set id, split) in shuffled order.
  std::vector<std::pair<std::string, Split>> entries;
  std::vector<std::string> notes;

  std::vector<std::string> ids(Split s) const {
    std::vector<std::string> out;
    for (const auto& [id, sp] : entries)
      if (sp == s) out.push_back(id);
    return out;
  }
};

/// Largest-remainder allocation of n items; ties go to the earlier bucket.
inline std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& ratios) {
  double sum = 0;
  for (double r : ratios) {
    if (!(r >= 0) || !std::isfinite(r)) throw InvalidArgument("split ratios must be finite and non-negative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw InvalidArgument("split ratios must sum to 1");
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> rem{};
  std::size_t used = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    const double exact = static_cast<double>(n) * ratios[k];
    sizes[k] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[k] = exact - static_cast<double>(sizes[k]);
    used += sizes[k];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b] + 1e-12; });
  for (std::size_t k = 0; used < n; ++k, ++used) ++sizes[order[k % 3]];
  return sizes;
}

inline DatasetManifest split(std::span<const std::string> ids, const std::array<double, 3>& ratios = {0.7, 0.1, 0.2},
                             std::uint64_t seed = 0) {
  const auto sizes = split_sizes(ids.size(), ratios);
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  DatasetManifest m;
  m.seed = seed;
  m.ratios = ratios;
  std::size_t pos = 0;
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t k = 0; k < sizes[b]; ++k, ++pos) m.entries.emplace_back(ids[order[pos]], static_cast<Split>(b));
  return m;
}

inline constexpr const char* kManifestMagic = "aetree-manifest";

inline void write_manifest(std::ostream& out, const DatasetManifest& m) {
  out << kManifestMagic << " 1\n";
  out << "seed " << m.seed << '\n';
  out << "ratios " << text::fmt(m.ratios[0]) << ' ' << text::fmt(m.ratios[1]) << ' ' << text::fmt(m.ratios[2]) << '\n';
  for (const auto& n : m.notes) out << "# " << n << '\n';
  for (const auto& [id, s] : m.entries) out << "set " << id << ' ' << split_name(s) << '\n';
}

inline DatasetManifest read_manifest(std::istream& in) {
  text::LineReader r(in);
  std::string line;
  auto f = r.fields(line, "manifest header");
  if (f.size() != 2 || f[0] != kManifestMagic || f[1] != "1") throw SchemaError("expected 'aetree-manifest 1'", r.line());
  DatasetManifest m;
  while (r.next(line)) {
    f = text::split_ws(line);
    if (f.size() == 2 && f[0] == "seed") {
      m.seed = static_cast<std::uint64_t>(text::parse_int(f[1], r.line()));
    } else if (f.size() == 4 && f[0] == "ratios") {
      for (std::size_t k = 0; k < 3; ++k) m.ratios[k] = text::parse_double(f[k + 1], r.line());
    } else if (f.size() == 3 && f[0] == "set") {
      m.entries.emplace_back(std::string(f[1]), parse_split(f[2], r.line()));
    } else {
      throw SchemaError("unrecognized manifest line", r.line());
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic cities

/// Grid geometry for synth_city. Sizes are in scene units; at zero jitter
/// every footprint is an axis-aligned base_length x base_width rectangle
/// centered in its spacing x spacing cell.
struct SynthStyle {
  double spacing = 10.0;
  double base_length = 6.0;
  double base_width = 4.0;
  double min_height = 3.0;
  double max_height = 30.0;
};

/// Regular grid of rectangular footprints. `jitter` in [0, 1] scales the
/// seeded perturbation of position (up to 15% of spacing), size (up to 30%)
/// and rotation (up to 0.3 rad). Heights are always seeded. Pairwise
/// disjoint when jitter is 0 and the base rectangle fits its cell.
inline std::vector<BuildingRecord> synth_city(int rows, int cols, double jitter, std::uint64_t seed,
                                              const SynthStyle& style = {}, const std::string& id_prefix = "b") {
  if (rows < 1 || cols < 1 || rows * cols < 2) throw InvalidArgument("synth_city needs at least 2 cells");
  if (!(jitter >= 0 && jitter <= 1)) throw InvalidArgument("jitter must lie in [0, 1]");
  if (!(style.spacing > 0 && style.base_length > 0 && style.base_width > 0 && style.min_height >= 0 &&
        style.max_height >= style.min_height))
    throw InvalidArgument("invalid synth style");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  std::uniform_real_distribution<double> height(style.min_height, style.max_height);
  std::vector<BuildingRecord> out;
  out.reserve(static_cast<std::size_t>(rows * cols));
  const int digits = static_cast<int>(std::to_string(rows * cols - 1).size());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const double dx = jitter * 0.15 * style.spacing * sym(rng);
      const double dy = jitter * 0.15 * style.spacing * sym(rng);
      const double len = style.base_length * (1 + jitter * 0.3 * sym(rng));
      const double wid = style.base_width * (1 + jitter * 0.3 * sym(rng));
      const double rot = jitter * 0.3 * sym(rng);
      const double h = height(rng);
      const Cuboid box{(c + 0.5) * style.spacing + dx, (r + 0.5) * style.spacing + dy, len, wid, h, rot};
      std::string idx = std::to_string(r * cols + c);
      idx.insert(0, static_cast<std::size_t>(digits) - idx.size(), '0');
      BuildingRecord b{id_prefix + idx, {}, h};
      for (const auto& p : footprint_corners(box)) b.footprint.push_back(p);
      out.push_back(std::move(b));
    }
  return out;
}

}  // namespace aetree
