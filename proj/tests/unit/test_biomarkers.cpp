#include <cmath>

#include "doctest.h"
#include "nervesynth/biomarkers/biomarkers.hpp"
#include "nervesynth/common/error.hpp"
#include "nervesynth/common/rng.hpp"

using namespace nervesynth;
using namespace nervesynth::biomarkers;

namespace {

void hline(Mask& m, std::size_t y, std::size_t x0, std::size_t x1, std::size_t thick = 1) {
  for (std::size_t t = 0; t < thick; ++t)
    for (std::size_t x = x0; x <= x1; ++x) m.at(x, y + t) = 1;
}

void vline(Mask& m, std::size_t x, std::size_t y0, std::size_t y1, std::size_t thick = 1) {
  for (std::size_t t = 0; t < thick; ++t)
    for (std::size_t y = y0; y <= y1; ++y) m.at(x + t, y) = 1;
}

void diag(Mask& m, std::size_t x, std::size_t y, std::size_t n, int dx) {
  for (std::size_t i = 0; i < n; ++i) m.at(x + static_cast<std::size_t>(dx * static_cast<long>(i)), y + i) = 1;
}

Mask plus_shape(std::size_t size, std::size_t arm, std::size_t thick = 1) {
  Mask m(size, size);
  const std::size_t c = size / 2;
  hline(m, c, c - arm, c + arm, thick);
  vline(m, c, c - arm, c + arm, thick);
  return m;
}

// A small branching tree with oblique pieces, used for rotation checks.
Mask tree(std::size_t size, unsigned seed) {
  Mask m(size, size);
  Rng rng(seed);
  const std::size_t y = 20 + static_cast<std::size_t>(uniform_int(rng, 0, 20));
  hline(m, y, 3, size - 4, 3);
  for (int b = 0; b < 3; ++b) {
    const std::size_t x = 15 + static_cast<std::size_t>(b) * 25;
    for (std::size_t i = 0; i < 18; ++i)
      for (std::size_t t = 0; t < 2; ++t) m.at(x + i + t, y + 3 + i) = 1;
  }
  vline(m, size - 15, 5, 14, 2);
  return m;
}

const Geometry kField;  // 384 x 384 at 400/384 um

}  // namespace

TEST_CASE("field geometry") {
  CHECK(kField.field_area_mm2() == doctest::Approx(0.16).epsilon(1e-14));
  CHECK(rotate90(rotate90(tree(96, 1), 1), 3) == tree(96, 1));
}

TEST_CASE("three pixel ribbon thins to a single line of the same span") {
  Mask m(100, 30);
  hline(m, 10, 20, 79, 3);
  Mask s = skeletonize(m);
  std::size_t xmin = 100, xmax = 0;
  for (std::size_t y = 0; y < 30; ++y)
    for (std::size_t x = 0; x < 100; ++x)
      if (s.at(x, y)) {
        CHECK(y == 11);
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
      }
  CHECK(xmin <= 21);
  CHECK(xmax >= 78);
  CHECK(s.count() == xmax - xmin + 1);
}

TEST_CASE("empty mask has an empty skeleton") {
  CHECK(skeletonize(Mask(16, 16)).count() == 0);
}

TEST_CASE("filled disk thins to a near point") {
  Mask m(31, 31);
  for (int y = 0; y < 31; ++y)
    for (int x = 0; x < 31; ++x)
      if ((x - 15) * (x - 15) + (y - 15) * (y - 15) <= 25) m.at(x, y) = 1;
  const auto n = skeletonize(m).count();
  CHECK(n >= 1);
  CHECK(n <= 3);
}

TEST_CASE("graph of simple shapes") {
  SUBCASE("plus") {
    auto g = build_graph(skeletonize(plus_shape(101, 30, 3)));
    CHECK(g.count(NodeKind::branch) == 1);
    CHECK(g.count(NodeKind::endpoint) == 4);
    CHECK(g.segments.size() == 4);
    CHECK(g.junctions() == 1);
  }
  SUBCASE("straight line") {
    Mask m(60, 10);
    hline(m, 4, 5, 54);
    auto g = build_graph(skeletonize(m));
    CHECK(g.count(NodeKind::branch) == 0);
    CHECK(g.count(NodeKind::endpoint) == 2);
    CHECK(g.segments.size() == 1);
    CHECK(g.total_length_px() == 50.0);
  }
  SUBCASE("Y shape") {
    Mask y(80, 80);
    vline(y, 40, 40, 75);
    for (std::size_t i = 1; i <= 25; ++i) {
      y.at(40 - i, 40 - i) = 1;
      y.at(40 + i, 40 - i) = 1;
    }
    auto g = build_graph(skeletonize(y));
    CHECK(g.count(NodeKind::branch) == 1);
    CHECK(g.count(NodeKind::endpoint) == 3);
    CHECK(g.segments.size() == 3);
    CHECK(g.total_length_px() == doctest::Approx(35.0 + 50.0 * std::sqrt(2.0) + 1.5));
  }
}

TEST_CASE("diagonal steps count as sqrt 2") {
  Mask m(40, 40);
  diag(m, 2, 2, 30, 1);
  auto g = build_graph(m);
  CHECK(g.total_length_px() == doctest::Approx(29.0 * std::sqrt(2.0) + 1.0).epsilon(1e-15));
}

TEST_CASE("short spurs are pruned and long branches kept") {
  Mask m(100, 40);
  hline(m, 20, 5, 94);
  vline(m, 30, 21, 23);   // 3 px spur
  vline(m, 60, 21, 35);   // 15 px branch
  auto g = build_graph(m);
  CHECK(g.junctions() == 1);
  CHECK(g.count(NodeKind::endpoint) == 3);
  CHECK(g.skeleton.at(30, 22) == 0);
  CHECK(g.skeleton.at(60, 30) == 1);
}

TEST_CASE("CNFL of a field-spanning line") {
  Mask m(384, 384);
  hline(m, 100, 0, 383);
  auto g = build_graph(m);
  CHECK(g.total_length_px() == 384.0);
  CHECK(cnfl(g, kField) == doctest::Approx(2.5).epsilon(1e-12));
  hline(m, 200, 0, 383);
  CHECK(cnfl(build_graph(m), kField) == 2.0 * cnfl(g, kField));
  CHECK(cnfl(build_graph(Mask(384, 384)), kField) == 0.0);
}

TEST_CASE("CNFD counts long components only") {
  Mask m(384, 384);
  hline(m, 100, 0, 383);
  hline(m, 200, 0, 383);
  CHECK(cnfd(build_graph(m), kField) == doctest::Approx(12.5).epsilon(1e-12));
  Mask s(384, 384);
  hline(s, 50, 10, 40);
  CHECK(cnfd(build_graph(s), kField) == 0.0);
  vline(m, 150, 101, 160);
  vline(m, 250, 101, 140);
  CHECK(cnfd(build_graph(m), kField) == doctest::Approx(12.5).epsilon(1e-12));
}

TEST_CASE("CNBD counts junctions on trunks") {
  Mask m(384, 384);
  const std::size_t c = 192;
  hline(m, c, c - 30, c + 30);
  vline(m, c, c - 30, c + 30);
  auto g = build_graph(m);
  CHECK(cnbd(g, kField) == doctest::Approx(6.25).epsilon(1e-12));
  Mask line(384, 384);
  hline(line, 10, 0, 383);
  CHECK(cnbd(build_graph(line), kField) == 0.0);
  // A short branched blob is not a trunk unless all fibers are counted.
  Mask small = Mask(384, 384);
  hline(small, c, c - 10, c + 10);
  vline(small, c, c - 10, c + 10);
  auto gs = build_graph(small);
  CHECK(cnbd(gs, kField) == 0.0);
  CHECK(cnbd(gs, kField, kDefaultTrunkMinLengthPx, true) == doctest::Approx(6.25));
}

TEST_CASE("distance transform matches brute force") {
  Rng rng(3);
  Mask m(23, 17);
  for (auto& v : m.data) v = uniform(rng, 0, 1) < 0.7;
  auto d = distance_transform(m);
  for (std::size_t y = 0; y < 17; ++y)
    for (std::size_t x = 0; x < 23; ++x) {
      double best = m.at(x, y) ? 1e9 : 0.0;
      for (std::size_t v = 0; v < 17; ++v)
        for (std::size_t u = 0; u < 23; ++u)
          if (!m.at(u, v)) {
            const double dx = double(x) - double(u), dy = double(y) - double(v);
            best = std::min(best, std::sqrt(dx * dx + dy * dy));
          }
      CHECK(d[y * 23 + x] == doctest::Approx(best).epsilon(1e-12));
    }
}

TEST_CASE("CNFW of ribbons") {
  Mask rib(200, 40);
  hline(rib, 18, 10, 189, 3);
  const double w3 = cnfw(rib, skeletonize(rib), kField);
  CHECK(std::abs(w3 - 3.0 * kField.pixel_pitch_um) <= 0.5);
  Mask line(200, 40);
  hline(line, 18, 10, 189);
  CHECK(cnfw(line, skeletonize(line), kField) == doctest::Approx(kField.pixel_pitch_um));
  Mask shorter(200, 40);
  hline(shorter, 18, 50, 120, 3);
  CHECK(cnfw(shorter, skeletonize(shorter), kField) == doctest::Approx(w3).epsilon(1e-12));
  CHECK_THROWS_AS(cnfw(Mask(10, 10), Mask(10, 10), kField), UndefinedValueError);
}

TEST_CASE("report on an empty mask") {
  auto r = report(Mask(384, 384), kField);
  CHECK(r.cnfl == 0.0);
  CHECK(r.cnfd == 0.0);
  CHECK(r.cnbd == 0.0);
  CHECK_FALSE(r.cnfw.has_value());
  auto c = summarize_cohort("Control", "Empty", {r, r});
  CHECK(c.cnfw.n == 0);
  CHECK(c.undefined_cnfw == 2);
  CHECK(format_table({c}).find("undefined") != std::string::npos);
  CHECK_THROWS_AS(report(Mask(10, 10), kField), DimensionError);
}

TEST_CASE("quarter turns leave length, trunk and branch counts unchanged") {
  Geometry g{128, 128, 1.0};
  for (unsigned seed = 0; seed < 5; ++seed) {
    Mask m(128, 128);
    Mask t = tree(96, seed);
    for (std::size_t y = 0; y < 96; ++y)
      for (std::size_t x = 0; x < 96; ++x) m.at(x + 10, y + 5) = t.at(x, y);
    const auto base = report(m, g);
    for (int q = 1; q < 4; ++q) {
      Mask r = rotate90(m, q);
      CHECK(skeletonize(r) == rotate90(skeletonize(m), q));
      const auto rr = report(r, g);
      CHECK(rr.cnfl == base.cnfl);
      CHECK(rr.cnfd == base.cnfd);
      CHECK(rr.cnbd == base.cnbd);
      CHECK(std::abs(*rr.cnfw - *base.cnfw) <= 0.02 * *base.cnfw);
    }
  }
}

TEST_CASE("adding a disjoint fiber never lowers CNFL or CNFD") {
  Geometry g{128, 128, 1.0};
  Mask m(128, 128);
  Mask t = tree(96, 2);
  for (std::size_t y = 0; y < 96; ++y)
    for (std::size_t x = 0; x < 96; ++x) m.at(x + 10, y) = t.at(x, y);
  const auto before = report(m, g);
  hline(m, 120, 5, 120, 2);
  const auto after = report(m, g);
  CHECK(after.cnfl > before.cnfl);
  CHECK(after.cnfd >= before.cnfd);
  CHECK(report(m, g).cnfl == after.cnfl);
}

TEST_CASE("cohort summary statistics") {
  auto s = summarize(std::vector<double>{1.0, 2.0, 3.0, 4.0});
  CHECK(s.mean == 2.5);
  CHECK(s.sd == doctest::Approx(std::sqrt(5.0 / 3.0)));
  CHECK(summarize(std::vector<std::optional<double>>{1.0, std::nullopt, 3.0}).n == 2);
}

TEST_CASE("oblique digital lines measure close to their Euclidean length") {
  for (double deg : {3.0, 7.0, 15.0, 22.5, 30.0, 40.0}) {
    const double slope = std::tan(deg * 3.141592653589793 / 180.0);
    Mask m(300, 300);
    for (std::size_t x = 0; x < 250; ++x)
      m.at(x + 10, 10 + static_cast<std::size_t>(std::lround(static_cast<double>(x) * slope))) = 1;
    const double truth = 249.0 / std::cos(deg * 3.141592653589793 / 180.0) + 1.0;
    CHECK(std::abs(build_graph(skeletonize(m)).total_length_px() - truth) <= 0.01 * truth);
  }
}
