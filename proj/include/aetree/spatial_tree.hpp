#pragma once

// Binary hierarchy over one layout set, built by agglomerative merging under
// the spatial-geometric distance (SGD), with per-level index matrices so a
// forest of differently shaped trees can be processed level by level.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "aetree/errors.hpp"
#include "aetree/geometry.hpp"

namespace aetree {

/// Six geometric parameters (x, y, l, w, h, a), absolute or relative.
using Params = std::array<double, 6>;

inline Params to_params(const Cuboid& c) { return {c.x, c.y, c.l, c.w, c.h, c.a}; }
inline Cuboid from_params(const Params& p) { return {p[0], p[1], p[2], p[3], p[4], p[5]}; }

/// Affine map from world coordinates into the normalized frame:
/// p_normalized = (p_world - (tx, ty)) * scale, lengths * scale.
struct Frame {
  double tx = 0.0;
  double ty = 0.0;
  double scale = 1.0;
};

struct LayoutSet {
  std::string id;
  std::vector<Cuboid> cuboids;
  Frame frame;
};

/// Weights of the five SGD terms: center, area, shape, angle, merge.
struct SgdWeights {
  double center = 5.0;
  double area = 2.0;
  double shape = 0.1;
  double angle = 1.0;
  double merge = 1.0;

  void validate() const {
    const std::array<double, 5> all{center, area, shape, angle, merge};
    bool any = false;
    for (double v : all) {
      if (!std::isfinite(v) || v < 0) throw InvalidArgument("SGD weights must be finite and nonnegative");
      any = any || v > 0;
    }
    if (!any) throw InvalidArgument("SGD weights must not all be zero");
  }
};

struct SgdComponents {
  double center = 0.0;
  double area = 0.0;
  /// Empty when either width is zero (aspect ratio undefined).
  std::optional<double> shape;
  double angle = 0.0;
  double merge = 0.0;
};

inline std::array<Point2, 8> joint_corners(const Cuboid& i, const Cuboid& j) {
  const auto ci = footprint_corners(i);
  const auto cj = footprint_corners(j);
  std::array<Point2, 8> pts;
  std::copy(ci.begin(), ci.end(), pts.begin());
  std::copy(cj.begin(), cj.end(), pts.begin() + 4);
  return pts;
}

/// The five pairwise terms. Angle differences are taken modulo pi and folded
/// into [0, pi/2].
inline SgdComponents sgd_components(const Cuboid& i, const Cuboid& j) {
  validate(i);
  validate(j);
  const auto pts = joint_corners(i, j);
  const Cuboid mbr = min_bounding_rect(pts);
  SgdComponents d;
  d.center = std::hypot(i.x - j.x, i.y - j.y);
  d.area = std::abs(i.footprint_area() - j.footprint_area());
  if (i.w > 0 && j.w > 0) d.shape = std::abs(i.l / i.w - j.l / j.w);
  d.angle = angle_difference((i.a + j.a) / 2, mbr.a);
  d.merge = std::abs(i.footprint_area() + j.footprint_area() - mbr.footprint_area());
  return d;
}

inline double sgd_distance(const SgdComponents& d, const SgdWeights& w) {
  double shape = 0.0;
  if (w.shape > 0) {
    if (!d.shape) throw DegenerateShapeError("zero-width cuboid with nonzero shape weight");
    shape = w.shape * *d.shape;
  }
  return w.center * d.center + w.area * d.area + shape + w.angle * d.angle + w.merge * d.merge;
}

inline double sgd_distance(const Cuboid& i, const Cuboid& j, const SgdWeights& w) {
  return sgd_distance(sgd_components(i, j), w);
}

/// Child parameters relative to the parent: offsets scaled by the parent's
/// l and w, extents as ratios, angle as a folded difference. A flat parent
/// (h = 0) yields h' = 0.
inline Params to_relative(const Cuboid& child, const Cuboid& parent) {
  if (!(parent.l > 0) || !(parent.w > 0)) throw DegenerateParentError("parent has zero length or width");
  return {(child.x - parent.x) / parent.l,
          (child.y - parent.y) / parent.w,
          child.l / parent.l,
          child.w / parent.w,
          parent.h > 0 ? child.h / parent.h : 0.0,
          normalize_angle(child.a - parent.a)};
}

/// Inverse of to_relative.
inline Cuboid to_absolute(const Params& rel, const Cuboid& parent) {
  if (!(parent.l > 0) || !(parent.w > 0)) throw DegenerateParentError("parent has zero length or width");
  return {rel[0] * parent.l + parent.x, rel[1] * parent.w + parent.y, rel[2] * parent.l,
          rel[3] * parent.w, rel[4] * parent.h, normalize_angle(rel[5] + parent.a)};
}

/// Non-throwing variant for free-running decoding: negative extents clamp to
/// zero, non-finite angles collapse to zero.
inline Cuboid to_absolute_clamped(const Params& rel, const Cuboid& parent) {
  Cuboid c{rel[0] * parent.l + parent.x,
           rel[1] * parent.w + parent.y,
           std::max(0.0, rel[2] * parent.l),
           std::max(0.0, rel[3] * parent.w),
           std::max(0.0, rel[4] * parent.h),
           rel[5] + parent.a};
  c.a = std::isfinite(c.a) ? normalize_angle(c.a) : 0.0;
  return c;
}

/// Clamps extents and normalizes the angle of a directly predicted cuboid.
inline Cuboid sanitize(Params p) {
  Cuboid c = from_params(p);
  c.l = std::max(0.0, c.l);
  c.w = std::max(0.0, c.w);
  c.h = std::max(0.0, c.h);
  c.a = std::isfinite(c.a) ? normalize_angle(c.a) : 0.0;
  return c;
}

// ---------------------------------------------------------------------------
// Frame normalization

inline Cuboid apply_frame(const Cuboid& c, const Frame& f) {
  return {(c.x - f.tx) * f.scale, (c.y - f.ty) * f.scale, c.l * f.scale, c.w * f.scale, c.h * f.scale, c.a};
}

inline Cuboid invert_frame(const Cuboid& c, const Frame& f) {
  return {c.x / f.scale + f.tx, c.y / f.scale + f.ty, c.l / f.scale, c.w / f.scale, c.h / f.scale, c.a};
}

/// Moves the centroid of the centers to the origin and scales so every
/// footprint corner lies in [-0.5, 0.5]^2. The new frame is composed with any
/// existing one, so `frame` always maps the original world coordinates.
inline LayoutSet normalize_frame(const LayoutSet& set) {
  if (set.cuboids.empty()) throw InvalidArgument("normalize_frame: empty set");
  double cx = 0.0, cy = 0.0;
  for (const auto& c : set.cuboids) {
    validate(c);
    cx += c.x;
    cy += c.y;
  }
  cx /= static_cast<double>(set.cuboids.size());
  cy /= static_cast<double>(set.cuboids.size());
  double half = 0.0;
  for (const auto& c : set.cuboids)
    for (const auto& p : footprint_corners(c)) half = std::max({half, std::abs(p.x - cx), std::abs(p.y - cy)});
  if (!(half > 0)) throw InvalidArgument("normalize_frame: set has zero extent");

  const Frame step{cx, cy, 1.0 / (2.0 * half)};
  LayoutSet out{set.id, {}, {}};
  out.cuboids.reserve(set.cuboids.size());
  for (const auto& c : set.cuboids) out.cuboids.push_back(apply_frame(c, step));
  out.frame = {set.frame.tx + step.tx / set.frame.scale, set.frame.ty + step.ty / set.frame.scale,
               set.frame.scale * step.scale};
  return out;
}

/// Maps a normalized set back to world coordinates.
inline LayoutSet denormalize(const LayoutSet& set) {
  LayoutSet out{set.id, {}, {}};
  out.cuboids.reserve(set.cuboids.size());
  for (const auto& c : set.cuboids) out.cuboids.push_back(invert_frame(c, set.frame));
  return out;
}

// ---------------------------------------------------------------------------
// Tree

struct TreeNode {
  Cuboid box;
  /// Parameters relative to the parent; zeros for the root.
  Params rel{};
  bool is_leaf = true;
  int parent = -1;
  int left = -1;
  int right = -1;
  /// 0 for leaves, 1 + max(child levels) otherwise.
  int level = 0;
};

/// One merge: two children and the parent they form.
struct IndexRow {
  int left = -1;
  int right = -1;
  int parent = -1;

  friend bool operator==(const IndexRow&, const IndexRow&) = default;
};

/// All merges whose parent sits at `level`, in creation order.
struct IndexMatrix {
  int level = 1;
  std::vector<IndexRow> rows;
};

/// Leaves occupy indices [0, N); internal nodes follow in merge order, so the
/// root is always the last node.
struct SpatialTree {
  std::string id;
  std::vector<TreeNode> nodes;
  std::vector<IndexMatrix> levels;
  int root = -1;
  Frame frame;

  std::size_t leaf_count() const { return (nodes.size() + 1) / 2; }

  /// Edges from the root (root = 0).
  int depth_of(int node) const {
    int d = 0;
    for (int n = node; nodes[static_cast<std::size_t>(n)].parent >= 0; n = nodes[static_cast<std::size_t>(n)].parent) ++d;
    return d;
  }

  int height() const { return root >= 0 ? nodes[static_cast<std::size_t>(root)].level : 0; }

  std::vector<Cuboid> leaves() const {
    std::vector<Cuboid> out;
    for (const auto& n : nodes)
      if (n.is_leaf) out.push_back(n.box);
    return out;
  }

  /// Merges in creation order as (left, right) pairs.
  std::vector<std::pair<int, int>> merge_sequence() const {
    std::vector<std::pair<int, int>> seq;
    for (std::size_t k = leaf_count(); k < nodes.size(); ++k) seq.emplace_back(nodes[k].left, nodes[k].right);
    return seq;
  }
};

/// How an internal node's center is placed: the mean of its children's
/// centers, or the center of the children's bounding rectangle. Extents and
/// angle always come from the bounding rectangle.
enum class ParentCenter : std::uint8_t { kChildMean, kBoundingRect };

inline Cuboid merge_boxes(const Cuboid& a, const Cuboid& b, ParentCenter center = ParentCenter::kChildMean) {
  const auto pts = joint_corners(a, b);
  Cuboid parent = min_bounding_rect(pts);
  parent.h = std::max(a.h, b.h);
  if (center == ParentCenter::kChildMean) {
    parent.x = (a.x + b.x) / 2;
    parent.y = (a.y + b.y) / 2;
  }
  return parent;
}

/// Fills `rel` for every non-root node and regroups the index matrices.
inline void finalize_tree(SpatialTree& tree) {
  const auto n = tree.nodes.size();
  int max_level = 0;
  for (std::size_t k = 0; k < n; ++k) max_level = std::max(max_level, tree.nodes[k].level);
  tree.levels.assign(static_cast<std::size_t>(max_level), {});
  for (int l = 0; l < max_level; ++l) tree.levels[static_cast<std::size_t>(l)].level = l + 1;
  for (std::size_t k = 0; k < n; ++k) {
    auto& node = tree.nodes[k];
    if (node.parent >= 0) node.rel = to_relative(node.box, tree.nodes[static_cast<std::size_t>(node.parent)].box);
    if (!node.is_leaf)
      tree.levels[static_cast<std::size_t>(node.level - 1)].rows.push_back({node.left, node.right, static_cast<int>(k)});
  }
}

/// Agglomerative construction: repeatedly merge the closest active pair under
/// the SGD metric until one node remains. Ties go to the lexicographically
/// smallest (lower index, higher index) pair.
inline SpatialTree build_tree(const LayoutSet& set, const SgdWeights& weights = {},
                              ParentCenter center = ParentCenter::kChildMean) {
  weights.validate();
  const std::size_t n_leaves = set.cuboids.size();
  if (n_leaves < 2) throw InvalidArgument("build_tree: a layout set needs at least 2 cuboids");

  SpatialTree tree;
  tree.id = set.id;
  tree.frame = set.frame;
  const std::size_t total = 2 * n_leaves - 1;
  tree.nodes.reserve(total);
  for (const auto& c : set.cuboids) {
    validate(c);
    tree.nodes.push_back(TreeNode{c, {}, true, -1, -1, -1, 0});
  }

  constexpr double kUnset = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> dist(total * total, kUnset);
  auto distance = [&](std::size_t i, std::size_t j) {
    double& d = dist[i * total + j];
    if (std::isnan(d)) d = sgd_distance(tree.nodes[i].box, tree.nodes[j].box, weights);
    return d;
  };

  std::vector<std::size_t> active(n_leaves);
  for (std::size_t k = 0; k < n_leaves; ++k) active[k] = k;

  while (active.size() > 1) {
    // `active` stays sorted, so scanning i < j visits pairs lexicographically.
    std::size_t bi = 0, bj = 1;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < active.size(); ++a)
      for (std::size_t b = a + 1; b < active.size(); ++b) {
        const double d = distance(active[a], active[b]);
        if (d < best) {
          best = d;
          bi = a;
          bj = b;
        }
      }
    const std::size_t li = active[bi];
    const std::size_t ri = active[bj];
    const auto parent_index = tree.nodes.size();
    TreeNode parent{merge_boxes(tree.nodes[li].box, tree.nodes[ri].box, center), {}, false, -1,
                    static_cast<int>(li), static_cast<int>(ri),
                    1 + std::max(tree.nodes[li].level, tree.nodes[ri].level)};
    tree.nodes[li].parent = static_cast<int>(parent_index);
    tree.nodes[ri].parent = static_cast<int>(parent_index);
    tree.nodes.push_back(parent);
    active.erase(active.begin() + static_cast<std::ptrdiff_t>(bj));
    active.erase(active.begin() + static_cast<std::ptrdiff_t>(bi));
    active.push_back(parent_index);
  }
  tree.root = static_cast<int>(tree.nodes.size() - 1);
  finalize_tree(tree);
  return tree;
}

}  // namespace aetree
