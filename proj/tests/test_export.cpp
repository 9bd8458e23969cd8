#include <gtest/gtest.h>

#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "aetree/export.hpp"

using namespace aetree;

namespace {

std::vector<NamedLayout> sample_layouts() {
  return {{"a", {{0, 0, 2, 1, 3, 0}, {3, 0, 1, 1, 2, 0.4}}},
          {"b", {{0, 0, 1, 1, 1, 0}, {1.5, 1.5, 1, 2, 4, -0.2}, {-2, 1, 0.5, 0.5, 1, 0}}}};
}

std::size_t count(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1)) ++n;
  return n;
}

}  // namespace

TEST(Svg, OneGroupPerLayoutOnePolygonPerCuboid) {
  std::ostringstream out;
  write_svg(out, sample_layouts());
  const auto s = out.str();
  EXPECT_EQ(count(s, "<g "), 2u);
  EXPECT_EQ(count(s, "<polygon "), 5u);
  EXPECT_NE(s.find("stroke=\""), std::string::npos);
  EXPECT_NE(s.find("fill=\""), std::string::npos);
  EXPECT_EQ(s.rfind("</svg>\n"), s.size() - 7);
}

TEST(Svg, PolygonsStayInsideTheirCell) {
  SvgOptions opt;
  opt.columns = 1;
  std::ostringstream out;
  write_svg(out, sample_layouts(), opt);
  const auto s = out.str();
  const std::regex pt("(-?[0-9.]+),(-?[0-9.]+)");
  const std::regex poly("points=\"([^\"]*)\"");
  int index = 0;
  for (auto it = std::sregex_iterator(s.begin(), s.end(), poly); it != std::sregex_iterator(); ++it) {
    const std::string pts = (*it)[1];
    const int cell = index++ < 2 ? 0 : 1;
    for (auto p = std::sregex_iterator(pts.begin(), pts.end(), pt); p != std::sregex_iterator(); ++p) {
      const double x = std::stod((*p)[1]), y = std::stod((*p)[2]);
      EXPECT_GE(x, opt.margin_px - 1e-3);
      EXPECT_LE(x, opt.cell_px - opt.margin_px + 1e-3);
      EXPECT_GE(y, cell * opt.cell_px + opt.margin_px - 1e-3);
      EXPECT_LE(y, (cell + 1) * opt.cell_px - opt.margin_px + 1e-3);
    }
  }
  EXPECT_EQ(index, 5);
}

TEST(Svg, EscapesNamesAndIsDeterministic) {
  std::vector<NamedLayout> l{{"x<&>\"y", {{0, 0, 1, 1, 1, 0}}}};
  std::ostringstream a, b;
  write_svg(a, l);
  write_svg(b, l);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_NE(a.str().find("x&lt;&amp;&gt;&quot;y"), std::string::npos);
  EXPECT_THROW(write_svg(a, std::vector<NamedLayout>{}), InvalidArgument);
}

TEST(Obj, EightVerticesAndSixQuadsPerCuboid) {
  std::ostringstream out;
  write_obj(out, sample_layouts());
  const auto s = out.str();
  EXPECT_EQ(count(s, "\nv "), 40u);
  EXPECT_EQ(count(s, "\nf "), 30u);
  EXPECT_EQ(count(s, "\no "), 2u);
  std::ostringstream again;
  write_obj(again, sample_layouts());
  EXPECT_EQ(s, again.str());
}

TEST(Obj, FacesPointOutward) {
  // For a convex solid every face normal must point away from the centroid.
  const Cuboid c{1, 2, 3, 2, 4, 0.7};
  std::ostringstream out;
  write_obj(out, std::vector<NamedLayout>{{"c", {c}}});
  std::istringstream in(out.str());
  std::vector<Point3> v;
  std::vector<std::array<int, 4>> faces;
  std::string tag;
  while (in >> tag) {
    if (tag == "v") {
      Point3 p;
      in >> p.x >> p.y >> p.z;
      v.push_back(p);
    } else if (tag == "f") {
      std::array<int, 4> f;
      for (int& i : f) in >> i;
      faces.push_back(f);
    } else {
      std::string rest;
      std::getline(in, rest);
    }
  }
  ASSERT_EQ(v.size(), 8u);
  ASSERT_EQ(faces.size(), 6u);
  const Point3 mid{c.x, c.y, c.h / 2};
  std::set<int> used;
  for (const auto& f : faces) {
    const auto& a = v[static_cast<std::size_t>(f[0] - 1)];
    const auto& b = v[static_cast<std::size_t>(f[1] - 1)];
    const auto& d = v[static_cast<std::size_t>(f[2] - 1)];
    const double ux = b.x - a.x, uy = b.y - a.y, uz = b.z - a.z;
    const double wx = d.x - a.x, wy = d.y - a.y, wz = d.z - a.z;
    const double nx = uy * wz - uz * wy, ny = uz * wx - ux * wz, nz = ux * wy - uy * wx;
    EXPECT_GT(nx * (a.x - mid.x) + ny * (a.y - mid.y) + nz * (a.z - mid.z), 0.0);
    for (int i : f) used.insert(i);
  }
  EXPECT_EQ(used.size(), 8u);
}
