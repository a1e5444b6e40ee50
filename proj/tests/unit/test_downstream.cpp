#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "nervesynth/common/error.hpp"
#include "nervesynth/downstream/downstream.hpp"
#include "nervesynth/metrics/metrics.hpp"

using namespace nervesynth;
using namespace nervesynth::downstream;

namespace {

// Classes told apart by mean intensity, with pixel noise.
std::vector<Example> intensity_classes(std::size_t per_class, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Example> out;
  for (std::size_t i = 0; i < per_class; ++i)
    for (int c = 0; c < 3; ++c) {
      Example e;
      e.label = c;
      e.image = {16, 16, std::vector<double>(256)};
      for (auto& v : e.image.pixels) v = 0.2 + 0.3 * c + normal(rng, 0.0, 0.03);
      out.push_back(std::move(e));
    }
  return out;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("nervesynth_test_downstream_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("models stay small") {
  CHECK(Classifier(1).param_count() < 100000);
  CHECK(Segmenter(1).param_count() < 100000);
  const std::size_t idx[2] = {0, 1};
  const auto ex = intensity_classes(1, 1);
  CHECK(Classifier(1).forward(images_tensor(ex, idx)).shape() == Shape{2, 3});
  CHECK(Segmenter(1).forward(images_tensor(ex, idx)).shape() == Shape{2, 2, 16, 16});
}

TEST_CASE("separable toy classes are learned exactly") {
  TrainOptions o;
  o.epochs = 40;
  o.batch_size = 8;
  const auto r = train_classifier(intensity_classes(10, 1), intensity_classes(10, 2), 3, o);
  CHECK(r.accuracy == 1.0);
  CHECK(r.test_size == 30);
}

TEST_CASE("shuffled labels give chance accuracy") {
  TrainOptions o;
  o.epochs = 20;
  o.batch_size = 8;
  o.shuffle_labels = true;
  double mean = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s)
    mean += train_classifier(intensity_classes(10, 10 + s), intensity_classes(30, 20 + s), s, o).accuracy / 5.0;
  CHECK(std::abs(mean - 1.0 / 3.0) <= 0.1);
}

TEST_CASE("segmenter overfits a single image") {
  Example e;
  e.image = {16, 16, std::vector<double>(256, 0.3)};
  e.mask = biomarkers::Mask(16, 16);
  for (std::size_t x = 0; x < 16; ++x)
    for (std::size_t y = 6; y < 9; ++y) {
      e.mask.at(x, y) = 1;
      e.image.pixels[y * 16 + x] = 0.8;
    }
  TrainOptions o;
  o.epochs = 150;
  o.batch_size = 1;
  o.lr = 1e-2;
  const auto r = train_segmenter({e}, {e}, 4, o);
  CHECK(r.miou >= 0.99);

  std::vector<std::uint8_t> background(256, 0);
  CHECK(metrics::class_iou(background, e.mask.data, 1) == 0.0);
}

TEST_CASE("training is deterministic per seed") {
  TrainOptions o;
  o.epochs = 3;
  const auto a = train_classifier(intensity_classes(4, 1), intensity_classes(4, 2), 9, o);
  const auto b = train_classifier(intensity_classes(4, 1), intensity_classes(4, 2), 9, o);
  CHECK(a.final_loss == b.final_loss);
  CHECK(a.predictions == b.predictions);
  CHECK_THROWS_AS(train_classifier({}, intensity_classes(1, 1), 0, o), DataError);
  CHECK_THROWS_AS(train_segmenter(intensity_classes(1, 1), intensity_classes(1, 1), 0, o), DataError);
}

TEST_CASE("regimes") {
  const auto real = scratch("real"), syn = scratch("syn");
  datagen::DatasetOptions opt;
  opt.image_size = 64;
  datagen::gen_dataset(5, 1, real, opt);
  datagen::gen_dataset(8, 2, syn, opt);

  Regime a{RegimeKind::real_only, real / "manifest.json", {}, 1.0};
  Regime b{RegimeKind::hybrid, real / "manifest.json", syn / "manifest.json", 1.0};
  Regime c{RegimeKind::synthetic_only, real / "manifest.json", syn / "manifest.json", 1.0};
  const auto ta = assemble(a, 0), tb = assemble(b, 0), tc = assemble(c, 0);
  CHECK(ta.train.size() == 12);
  CHECK(tb.train.size() == 24);
  CHECK(tc.train.size() == 24);
  CHECK(ta.test.size() == 3);
  CHECK(tb.test.size() == 3);
  CHECK(tc.test.size() == 3);
  CHECK(ta.train.front().image.width == 32);
  CHECK(ta.test_hash == tb.test_hash);
  b.hybrid_ratio = 0.5;
  CHECK(assemble(b, 0).train.size() == 18);

  CHECK(parse_regime(regime_name(RegimeKind::hybrid)) == RegimeKind::hybrid);
  CHECK_THROWS_AS(parse_regime("D"), ConfigError);

  verify_isolation(a, ta.test_hash);
  const auto m = datagen::load_manifest(real / "manifest.json");
  std::ofstream(real / m.select(datagen::Split::test).front()->image, std::ios::app) << "x";
  CHECK_THROWS_AS(verify_isolation(a, ta.test_hash), ContractError);

  TrainOptions o;
  o.epochs = 1;
  CHECK(train_classifier(c, 0, o).train_size == 24);
  std::filesystem::remove_all(real);
  std::filesystem::remove_all(syn);
}
