#pragma once

// Text formats for layout sets and forests. Both are line oriented with a
// versioned header; numbers use shortest round-trip decimal so a write/read
// cycle is bit exact.
//
//   aetree-layouts 1
//   set <id> <count> <tx> <ty> <scale>
//   <x> <y> <l> <w> <h> <a>            (count lines)
//
//   aetree-forest 1
//   tree <id> <node_count> <root> <tx> <ty> <scale>
//   node <index> <x y l w h a> <rel x y l w h a> <leaf> <parent> <left> <right> <level>
//   level <m> <row_count>
//   row <left> <right> <parent>

#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "aetree/errors.hpp"
#include "aetree/spatial_tree.hpp"
#include "aetree/text_io.hpp"

namespace aetree {

inline constexpr const char* kLayoutsMagic = "aetree-layouts";
inline constexpr const char* kForestMagic = "aetree-forest";
inline constexpr int kFormatVersion = 1;

namespace detail {

inline void check_token(const std::string& s, const char* what) {
  if (s.empty() || s.find_first_of(" \t\r\n") != std::string::npos)
    throw InvalidArgument(std::string(what) + " must be a non-empty token without whitespace: '" + s + "'");
}

inline void read_header(text::LineReader& r, const char* magic) {
  std::string line;
  const auto f = r.fields(line, "file header");
  if (f.size() != 2 || f[0] != magic) throw SchemaError(std::string("expected header '") + magic + " 1'", r.line());
  if (text::parse_int(f[1], r.line()) != kFormatVersion) throw SchemaError("unsupported format version", r.line());
}

inline std::size_t to_index(long long v, std::size_t bound, std::size_t line) {
  if (v < 0 || static_cast<std::size_t>(v) >= bound) throw SchemaError("index out of range", line);
  return static_cast<std::size_t>(v);
}

}  // namespace detail

inline void write_layouts(std::ostream& out, const std::vector<LayoutSet>& sets) {
  out << kLayoutsMagic << ' ' << kFormatVersion << '\n';
  for (const auto& s : sets) {
    detail::check_token(s.id, "layout id");
    out << "set " << s.id << ' ' << s.cuboids.size() << ' ' << text::fmt(s.frame.tx) << ' ' << text::fmt(s.frame.ty)
        << ' ' << text::fmt(s.frame.scale) << '\n';
    for (const auto& c : s.cuboids) {
      const auto p = to_params(c);
      for (std::size_t k = 0; k < p.size(); ++k) out << (k ? " " : "") << text::fmt(p[k]);
      out << '\n';
    }
  }
}

inline std::vector<LayoutSet> read_layouts(std::istream& in) {
  text::LineReader r(in);
  detail::read_header(r, kLayoutsMagic);
  std::vector<LayoutSet> sets;
  std::string line;
  while (r.next(line)) {
    const auto f = text::split_ws(line);
    if (f.size() != 6 || f[0] != "set") throw SchemaError("expected 'set <id> <count> <tx> <ty> <scale>'", r.line());
    LayoutSet s;
    s.id = std::string(f[1]);
    const long long count = text::parse_int(f[2], r.line());
    if (count < 0) throw SchemaError("negative cuboid count", r.line());
    s.frame = {text::parse_double(f[3], r.line()), text::parse_double(f[4], r.line()),
               text::parse_double(f[5], r.line())};
    if (!(s.frame.scale > 0)) throw SchemaError("frame scale must be positive", r.line());
    std::string row;
    for (long long k = 0; k < count; ++k) {
      const auto v = r.fields(row, "cuboid row");
      if (v.size() != 6) throw SchemaError("cuboid row needs 6 numbers", r.line());
      Params p{};
      for (std::size_t j = 0; j < 6; ++j) p[j] = text::parse_double(v[j], r.line());
      const Cuboid c = from_params(p);
      if (!is_valid(c)) throw SchemaError("invalid cuboid", r.line());
      s.cuboids.push_back(c);
    }
    sets.push_back(std::move(s));
  }
  return sets;
}

inline void write_forest(std::ostream& out, const std::vector<SpatialTree>& forest) {
  out << kForestMagic << ' ' << kFormatVersion << '\n';
  for (const auto& t : forest) {
    detail::check_token(t.id, "tree id");
    out << "tree " << t.id << ' ' << t.nodes.size() << ' ' << t.root << ' ' << text::fmt(t.frame.tx) << ' '
        << text::fmt(t.frame.ty) << ' ' << text::fmt(t.frame.scale) << '\n';
    for (std::size_t k = 0; k < t.nodes.size(); ++k) {
      const auto& n = t.nodes[k];
      out << "node " << k;
      for (double v : to_params(n.box)) out << ' ' << text::fmt(v);
      for (double v : n.rel) out << ' ' << text::fmt(v);
      out << ' ' << (n.is_leaf ? 1 : 0) << ' ' << n.parent << ' ' << n.left << ' ' << n.right << ' ' << n.level << '\n';
    }
    for (const auto& m : t.levels) {
      out << "level " << m.level << ' ' << m.rows.size() << '\n';
      for (const auto& row : m.rows) out << "row " << row.left << ' ' << row.right << ' ' << row.parent << '\n';
    }
  }
}

/// Reads a forest and checks its structural invariants: 2N-1 nodes, the root
/// last, children before parents, and index matrices consistent with nodes.
inline std::vector<SpatialTree> read_forest(std::istream& in) {
  text::LineReader r(in);
  detail::read_header(r, kForestMagic);
  std::vector<SpatialTree> forest;
  std::string line, row;
  bool have_line = r.next(line);
  while (have_line) {
    auto f = text::split_ws(line);
    if (f.size() != 7 || f[0] != "tree") throw SchemaError("expected 'tree' record", r.line());
    SpatialTree t;
    t.id = std::string(f[1]);
    const long long count = text::parse_int(f[2], r.line());
    if (count < 3 || count % 2 == 0) throw SchemaError("node count must be odd and at least 3", r.line());
    const auto n = static_cast<std::size_t>(count);
    t.root = static_cast<int>(text::parse_int(f[3], r.line()));
    if (t.root != static_cast<int>(n) - 1) throw SchemaError("root must be the last node", r.line());
    t.frame = {text::parse_double(f[4], r.line()), text::parse_double(f[5], r.line()),
               text::parse_double(f[6], r.line())};
    const std::size_t leaves = (n + 1) / 2;
    for (std::size_t k = 0; k < n; ++k) {
      const auto v = r.fields(row, "node row");
      if (v.size() != 19 || v[0] != "node") throw SchemaError("node row needs 18 fields after 'node'", r.line());
      if (text::parse_int(v[1], r.line()) != static_cast<long long>(k)) throw SchemaError("nodes out of order", r.line());
      TreeNode node;
      Params box{};
      for (std::size_t j = 0; j < 6; ++j) box[j] = text::parse_double(v[2 + j], r.line());
      for (std::size_t j = 0; j < 6; ++j) node.rel[j] = text::parse_double(v[8 + j], r.line());
      node.box = from_params(box);
      node.is_leaf = text::parse_int(v[14], r.line()) != 0;
      node.parent = static_cast<int>(text::parse_int(v[15], r.line()));
      node.left = static_cast<int>(text::parse_int(v[16], r.line()));
      node.right = static_cast<int>(text::parse_int(v[17], r.line()));
      node.level = static_cast<int>(text::parse_int(v[18], r.line()));
      if (node.is_leaf != (k < leaves)) throw SchemaError("leaves must occupy the first N indices", r.line());
      if (!node.is_leaf) {
        const auto l = detail::to_index(node.left, k, r.line());
        const auto rr = detail::to_index(node.right, k, r.line());
        if (t.nodes[l].parent != static_cast<int>(k) || t.nodes[rr].parent != static_cast<int>(k))
          throw SchemaError("child/parent links disagree", r.line());
      }
      if (node.parent >= 0 && (node.parent <= static_cast<int>(k) || node.parent >= static_cast<int>(n)))
        throw SchemaError("parent must follow its children", r.line());
      if ((node.parent < 0) != (k + 1 == n)) throw SchemaError("only the root has no parent", r.line());
      t.nodes.push_back(node);
    }
    have_line = r.next(line);
    while (have_line) {
      f = text::split_ws(line);
      if (f.empty() || f[0] != "level") break;
      if (f.size() != 3) throw SchemaError("expected 'level <m> <rows>'", r.line());
      IndexMatrix m;
      m.level = static_cast<int>(text::parse_int(f[1], r.line()));
      const long long rows = text::parse_int(f[2], r.line());
      for (long long k = 0; k < rows; ++k) {
        const auto v = r.fields(row, "index row");
        if (v.size() != 4 || v[0] != "row") throw SchemaError("expected 'row <left> <right> <parent>'", r.line());
        IndexRow ir{static_cast<int>(text::parse_int(v[1], r.line())), static_cast<int>(text::parse_int(v[2], r.line())),
                    static_cast<int>(text::parse_int(v[3], r.line()))};
        const auto p = detail::to_index(ir.parent, n, r.line());
        const auto& pn = t.nodes[p];
        if (pn.is_leaf || pn.left != ir.left || pn.right != ir.right || pn.level != m.level)
          throw SchemaError("index row disagrees with node table", r.line());
        m.rows.push_back(ir);
      }
      t.levels.push_back(std::move(m));
      have_line = r.next(line);
    }
    std::size_t rows = 0;
    for (const auto& m : t.levels) rows += m.rows.size();
    if (rows != n - leaves) throw SchemaError("index matrices must list every internal node once", r.line());
    forest.push_back(std::move(t));
  }
  return forest;
}

inline void save_layouts(const std::string& path, const std::vector<LayoutSet>& sets) {
  auto out = text::open_out(path);
  write_layouts(out, sets);
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline std::vector<LayoutSet> load_layouts(const std::string& path) {
  auto in = text::open_in(path);
  return read_layouts(in);
}

inline void save_forest(const std::string& path, const std::vector<SpatialTree>& forest) {
  auto out = text::open_out(path);
  write_forest(out, forest);
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline std::vector<SpatialTree> load_forest(const std::string& path) {
  auto in = text::open_in(path);
  return read_forest(in);
}

}  // namespace aetree
