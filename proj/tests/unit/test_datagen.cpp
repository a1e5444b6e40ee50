#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "nervesynth/biomarkers/biomarkers.hpp"
#include "nervesynth/common/error.hpp"
#include "nervesynth/common/rng.hpp"
#include "nervesynth/datagen/datagen.hpp"

using namespace nervesynth;
using namespace nervesynth::datagen;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("nervesynth_test_datagen_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

double truth_cnfl(const Truth& t, const biomarkers::Geometry& g) {
  return t.length_px * g.pixel_pitch_um / 1000.0 / g.field_area_mm2();
}

}  // namespace

TEST_CASE("class parameters are ordered by severity") {
  const auto c = MorphParams::for_class(0), n = MorphParams::for_class(1), d = MorphParams::for_class(2);
  CHECK(c.trunks_min >= n.trunks_min);
  CHECK(n.trunks_min >= d.trunks_min);
  CHECK(c.trunks_max >= n.trunks_max);
  CHECK(n.trunks_max >= d.trunks_max);
  CHECK(c.branch_prob >= n.branch_prob);
  CHECK(n.branch_prob >= d.branch_prob);
  CHECK_THROWS_AS(MorphParams::for_class(3), ConfigError);
  MorphParams bad;
  bad.branch_prob = 1.5;
  CHECK_THROWS_AS(gen_mask(bad, 1), ConfigError);
}

TEST_CASE("no branches without branch probability") {
  auto p = MorphParams::for_class(0);
  p.branch_prob = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto m = gen_mask(p, s);
    CHECK(m.truth.branch_points == 0);
    CHECK(biomarkers::report(m.mask, {}).cnbd == 0.0);
  }
}

TEST_CASE("a straight horizontal trunk spans the field") {
  MorphParams p;  // one trunk, no tilt, no tortuosity, no branches
  auto m = gen_mask(p, 7);
  CHECK(m.truth.trunks == 1);
  CHECK(m.truth.length_px == doctest::Approx(384.0).epsilon(1e-12));
  auto r = biomarkers::report(m.mask, {});
  CHECK(r.length_px == doctest::Approx(384.0).epsilon(1e-12));
  CHECK(*r.cnfw == doctest::Approx(3.0 * r.pixel_pitch_um).epsilon(0.2));
}

TEST_CASE("mask is exactly the rasterized fibers") {
  auto m = gen_mask(0, 11);
  biomarkers::Mask again(m.mask.width, m.mask.height);
  for (const auto& f : m.fibers) rasterize(f, again);
  CHECK(again == m.mask);
  CHECK(m.fibers.size() == static_cast<std::size_t>(m.truth.trunks + m.truth.branch_points));
  double len = 0.0;
  for (const auto& f : m.fibers) len += f.length_px;
  CHECK(len == doctest::Approx(m.truth.length_px).epsilon(1e-12));
  CHECK(gen_mask(0, 11).mask == m.mask);
}

TEST_CASE("biomarkers recover the construction truth") {
  const biomarkers::Geometry g;
  double mean[3] = {0, 0, 0}, trunks[3] = {0, 0, 0};
  const int n = 100;
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < n; ++i) {
      const auto m = gen_mask(c, derive_seed(99, static_cast<std::uint64_t>(c * n + i)));
      const auto r = biomarkers::report(m.mask, g);
      const double expect = truth_cnfl(m.truth, g);
      CHECK(std::abs(r.cnfl - expect) <= 0.05 * expect);
      CHECK(r.cnbd == doctest::Approx(m.truth.branch_points / g.field_area_mm2()).epsilon(1e-12));
      CHECK(r.trunks == static_cast<std::size_t>(m.truth.trunks));
      mean[c] += r.cnfl / n;
      trunks[c] += static_cast<double>(m.truth.trunks) / n;
    }
  }
  CHECK(trunks[0] > trunks[1]);
  CHECK(trunks[1] > trunks[2]);
  CHECK(mean[0] > mean[1]);
  CHECK(mean[1] > mean[2]);
  CHECK(std::abs(mean[0] - 19.4) <= 3.0);
}

TEST_CASE("rendered images") {
  SUBCASE("empty mask gives background only") {
    for (std::uint64_t s = 0; s < 5; ++s) {
      auto img = render_image(biomarkers::Mask(384, 384), s);
      double mean = 0.0;
      for (double v : img.pixels) mean += v / static_cast<double>(img.pixels.size());
      CHECK(mean >= 0.2);
      CHECK(mean <= 0.6);
    }
  }
  SUBCASE("fibers are brighter than stroma") {
    for (std::uint64_t s = 0; s < 5; ++s) {
      auto m = gen_mask(static_cast<int>(s % 3), s);
      auto img = render_image(m.mask, s);
      double fg = 0.0, bg = 0.0;
      std::size_t nf = 0, nb = 0;
      for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        (m.mask.data[i] ? fg : bg) += img.pixels[i];
        (m.mask.data[i] ? nf : nb) += 1;
      }
      CHECK(fg / nf - bg / nb >= 0.2);
      for (double v : img.pixels) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
      }
    }
  }
  SUBCASE("same seed, same image") {
    auto m = gen_mask(1, 5).mask;
    CHECK(render_image(m, 3).pixels == render_image(m, 3).pixels);
    CHECK(render_image(m, 3).pixels != render_image(m, 4).pixels);
  }
}

TEST_CASE("downsampling") {
  io::GrayImage img{4, 4, {0, 1, 0, 0, 1, 0, 0, 0, 0.5, 0.5, 1, 1, 0.5, 0.5, 1, 1}};
  auto d = downsample_image(img, 2);
  CHECK(d.pixels == std::vector<double>{0.5, 0.0, 0.5, 1.0});
  biomarkers::Mask m(4, 4);
  m.at(0, 0) = 1;
  m.at(3, 3) = 1;
  m.at(2, 3) = 1;
  CHECK(downsample_mask(m, 2, 0.5).data == std::vector<std::uint8_t>{0, 0, 0, 1});
  CHECK(downsample_mask(m, 2, 0.1).data == std::vector<std::uint8_t>{1, 0, 0, 1});
  CHECK_THROWS_AS(downsample_image(img, 3), DimensionError);
  auto big = gen_mask(0, 3).mask;
  CHECK(downsample_mask(big, 12).count() > 0);
}

TEST_CASE("dataset generation") {
  const auto dir = scratch("a");
  DatasetOptions opt;
  opt.image_size = 96;
  auto m = gen_dataset(10, 42, dir, opt);
  CHECK(m.samples.size() == 30);
  CHECK(m.select(Split::train).size() == 24);
  CHECK(m.select(Split::test).size() == 6);
  for (int c = 0; c < 3; ++c) CHECK(m.select(Split::test, c).size() == 2);

  auto back = load_manifest(dir / "manifest.json");
  REQUIRE(back.samples.size() == 30);
  for (std::size_t i = 0; i < 30; ++i) {
    CHECK(back.samples[i].id == m.samples[i].id);
    CHECK(back.samples[i].split == m.samples[i].split);
    CHECK(back.samples[i].class_id == m.samples[i].class_id);
    CHECK(back.samples[i].seed == m.samples[i].seed);
    REQUIRE(back.samples[i].truth.has_value());
    CHECK(*back.samples[i].truth == *m.samples[i].truth);
  }
  auto s = load_sample(back, back.samples[0]);
  CHECK(s.image.width == 96);
  CHECK(s.mask == gen_mask(0, back.samples[0].seed, 96, 96).mask);
  CHECK(manifest_hash(back) == manifest_hash(m));

  const auto dir2 = scratch("b");
  gen_dataset(10, 42, dir2, opt);
  for (const auto& r : m.samples) {
    CHECK(slurp(dir / r.image) == slurp(dir2 / r.image));
    CHECK(slurp(dir / r.mask) == slurp(dir2 / r.mask));
  }
  CHECK(slurp(dir / "manifest.json") == slurp(dir2 / "manifest.json"));

  std::ofstream(dir2 / m.samples[0].image) << "x";
  CHECK(manifest_hash(load_manifest(dir2 / "manifest.json")) != manifest_hash(m));
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
}

TEST_CASE("manifest errors") {
  const auto dir = scratch("c");
  std::filesystem::create_directories(dir);
  CHECK_THROWS_AS(load_manifest(dir / "missing.json"), DataError);
  std::ofstream(dir / "bad.json") << "{\"version\": 1, \"image_size\": 32, \"samples\": [{\"id\": \"x\", \"class\": \"nope\", \"image\": \"a.png\"}]}";
  CHECK_THROWS_AS(load_manifest(dir / "bad.json"), DataError);
  std::ofstream(dir / "real.json") << "{\"version\": 1, \"image_size\": 32, \"samples\": [{\"id\": \"x\", \"class\": \"T1DPN\", \"image\": \"a.png\"}]}";
  auto m = load_manifest(dir / "real.json");
  CHECK(m.samples[0].class_id == 2);
  CHECK_FALSE(m.samples[0].truth.has_value());
  CHECK_THROWS_AS(gen_dataset(0, 1, dir), ConfigError);
  std::filesystem::remove_all(dir);
}
