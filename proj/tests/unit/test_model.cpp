#include <chrono>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "nervesynth/common/error.hpp"
#include "nervesynth/model/mmdit.hpp"
#include "nervesynth/tensor/ops.hpp"
#include "support/gradcheck.hpp"

using namespace nervesynth;
using namespace nervesynth::model;
using nervesynth::testing::gradcheck;
using nervesynth::testing::random_tensor;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.numel() == b.numel());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a.at(i) - b.at(i)));
  return worst;
}

MmditConfig tiny_config() {
  MmditConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.n_blocks = 1;
  c.n_heads = 2;
  c.mlp_ratio = 2;
  c.head_init_std = 0.3;
  c.seed = 5;
  return c;
}

Tensor random_mask(std::size_t batch, std::size_t px, Rng& rng) {
  std::vector<double> m(batch * px);
  for (auto& x : m) x = uniform(rng, 0, 1) < 0.3 ? 1.0 : 0.0;
  return Tensor({batch, px}, std::move(m));
}

}  // namespace

TEST_CASE("config validation") {
  MmditConfig c;
  c.patch_size = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = MmditConfig{};
  c.n_heads = 5;
  CHECK_THROWS_AS(Mmdit{c}, ConfigError);
  CHECK_NOTHROW(MmditConfig{}.validate());
  CHECK(MmditConfig{}.n_patches() == 64);
}

TEST_CASE("class names") {
  CHECK(parse_class_name("T1DPN") == 2);
  CHECK(class_name(1) == "t1nodpn");
  CHECK_THROWS_AS(parse_class_name("healthy"), ConfigError);
}

TEST_CASE("patchify produces one token per patch") {
  Mmdit model(MmditConfig{});
  Tensor tokens = model.patchify(Tensor::zeros({1, 2, 32, 32}));
  CHECK(tokens.shape() == Shape{64, 64});
  CHECK_THROWS_AS(model.patchify(Tensor::zeros({1, 2, 16, 16})), DimensionError);
}

TEST_CASE("patchify of a zero image equals the projection bias") {
  Mmdit model(MmditConfig{});
  auto bias = model.patch_embed().bias().mutable_data();
  for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = 0.01 * static_cast<double>(i) - 0.2;
  Tensor tokens = model.patchify(Tensor::zeros({2, 2, 32, 32}));
  for (std::size_t r = 0; r < tokens.dim(0); ++r)
    for (std::size_t j = 0; j < 64; ++j) CHECK(tokens.at(r * 64 + j) == bias[j]);
}

TEST_CASE("patch round trip with an identity projection") {
  MmditConfig c;
  c.embed_dim = 32;  // equals patch^2 * 2 channels
  c.n_heads = 4;
  Mmdit model(c);
  auto w = model.patch_embed().weight().mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t i = 0; i < 32; ++i) w[i * 32 + i] = 1.0;
  Rng rng(2);
  Tensor img = random_tensor({3, 2, 32, 32}, rng, 0, 1, false);
  Tensor back = from_patches(model.patchify(img), 3, 2, 32, 4);
  CHECK(back.shape() == img.shape());
  CHECK(max_abs_diff(back, img) == 0.0);
}

TEST_CASE("joint attention is row stochastic over the full sequence") {
  Mmdit model(MmditConfig{});
  Rng rng(3);
  Tensor img = random_tensor({2 * 64, 64}, rng, -1, 1, false);
  Tensor cond = random_tensor({2 * 2, 64}, rng, -1, 1, false);
  auto out = joint_attention(model.blocks()[0], img, cond, 2, 4);
  CHECK(out.image.shape() == Shape{128, 64});
  CHECK(out.cond.shape() == Shape{4, 64});
  REQUIRE(out.probs.size() == 2 * 4 * 66 * 66);
  double worst = 0.0;
  for (std::size_t row = 0; row < out.probs.size() / 66; ++row) {
    double s = 0.0;
    for (std::size_t j = 0; j < 66; ++j) s += out.probs[row * 66 + j];
    worst = std::max(worst, std::abs(s - 1.0));
  }
  CHECK(worst <= 1e-9);
  CHECK_THROWS_AS(joint_attention(model.blocks()[0], img, Tensor::zeros({4, 32}), 2, 4),
                  DimensionError);
}

TEST_CASE("a single token attends only to itself") {
  Mmdit model(MmditConfig{});
  const auto& blk = model.blocks()[0];
  Rng rng(4);
  Tensor x = random_tensor({1, 64}, rng, -1, 1, false);
  auto out = joint_attention(blk, x, Tensor::zeros({0, 64}), 1, 4);
  CHECK(max_abs_diff(out.image, blk.out_proj.forward(blk.v.forward(x))) <= 1e-12);
}

TEST_CASE("without positions, permuting condition tokens leaves image outputs unchanged") {
  MmditConfig c;
  c.position_encoding = false;
  Mmdit model(c);
  Rng rng(6);
  Tensor img = random_tensor({64, 64}, rng, -1, 1, false);
  Tensor a = random_tensor({1, 64}, rng, -1, 1, false);
  Tensor b = random_tensor({1, 64}, rng, -1, 1, false);
  auto x = joint_attention(model.blocks()[0], img, concat({a, b}, 0), 1, 4);
  auto y = joint_attention(model.blocks()[0], img, concat({b, a}, 0), 1, 4);
  CHECK(max_abs_diff(x.image, y.image) <= 1e-12);
  CHECK(max_abs_diff(slice(x.cond, 0, 0, 1), slice(y.cond, 0, 1, 2)) <= 1e-12);
}

TEST_CASE("denoise_predict contract") {
  Mmdit model(MmditConfig{});
  Rng rng(7);
  std::vector<double> x(1024);
  for (auto& v : x) v = normal(rng);
  ConditionBundle bundle{std::vector<double>(1024, 0.0), 0, 500};
  Tensor eps = model.denoise_predict(x, bundle);
  CHECK(eps.shape() == Shape{1024});
  CHECK(max_abs_diff(eps, model.denoise_predict(x, bundle)) == 0.0);

  bundle.class_id = 3;
  CHECK_THROWS_AS(model.denoise_predict(x, bundle), ConfigError);
  bundle.class_id = 0;
  bundle.mask[0] = 0.5;
  CHECK_THROWS_AS(model.denoise_predict(x, bundle), DataError);
}

TEST_CASE("class and mask conditioning reach the output") {
  Mmdit model(MmditConfig{});
  Rng rng(8);
  std::vector<double> x(1024);
  for (auto& v : x) v = normal(rng);
  ConditionBundle a{std::vector<double>(1024, 0.0), 0, 300};
  ConditionBundle b = a;
  b.class_id = 2;
  auto table = model.class_table().mutable_data();
  for (std::size_t j = 0; j < 64; ++j) table[2 * 64 + j] += 3.0;
  CHECK(max_abs_diff(model.denoise_predict(x, a), model.denoise_predict(x, b)) > 1e-6);
  ConditionBundle c = a;
  std::fill(c.mask.begin(), c.mask.begin() + 512, 1.0);
  CHECK(max_abs_diff(model.denoise_predict(x, a), model.denoise_predict(x, c)) > 1e-6);
}

TEST_CASE("loss gradient with respect to adapter parameters matches finite differences") {
  for (auto kind : {adapt::AdapterKind::wdlora, adapt::AdapterKind::lora}) {
    Mmdit model(tiny_config());
    adapt::AttachOptions opt;
    opt.kind = kind;
    opt.rank = 2;
    adapt::attach_adapters(model, adapt::all_roles(), opt);
    Rng rng(9);
    auto params = adapt::trainable_parameters(model);
    // Move away from b = 0 so every adapter tensor has a nontrivial gradient.
    for (auto& p : params)
      for (auto& v : p.mutable_data()) v += uniform(rng, -0.2, 0.2);
    Tensor x = random_tensor({2, 64}, rng, -1, 1, false);
    Tensor m = random_mask(2, 64, rng);
    Tensor eps = random_tensor({2, 64}, rng, -1, 1, false);
    Tensor w = add_scalar(m, 1.0);
    const std::vector<int> cls{0, 2}, ts{10, 700};
    auto loss = [&] { return weighted_mse(model.forward(x, m, cls, ts), eps, w); };
    CHECK(gradcheck(loss, params) <= 1e-4);
  }
}

TEST_CASE("attached model matches the frozen model at init") {
  Mmdit model(MmditConfig{});
  Rng rng(10);
  Tensor x = random_tensor({2, 1024}, rng, -1, 1, false);
  Tensor m = random_mask(2, 1024, rng);
  const std::vector<int> cls{1, 2}, ts{3, 999};
  Tensor before = model.forward(x, m, cls, ts);
  auto report = adapt::attach_adapters(model, adapt::default_targets(), {});
  CHECK(max_abs_diff(model.forward(x, m, cls, ts), before) <= 1e-9);
  CHECK(report.layers.size() == 8);
}

TEST_CASE("checkpoint round trip preserves outputs and adapter setup") {
  const auto dir = std::filesystem::temp_directory_path() / "nervesynth_test_model";
  std::filesystem::create_directories(dir);
  Mmdit model(tiny_config());
  AdapterSetup setup{{adapt::AdapterKind::wdlora, 2, 0.5, 11, adapt::NormAxis::columns},
                     {"q", "v", "mlp_out"}};
  adapt::attach_adapters(model, setup.targets, setup.options);
  Rng rng(12);
  for (auto& p : adapt::trainable_parameters(model))
    for (auto& v : p.mutable_data()) v += uniform(rng, -0.2, 0.2);
  save_model(model, setup, dir / "ckpt");
  auto loaded = load_model(dir / "ckpt");
  REQUIRE(loaded.setup.has_value());
  CHECK(loaded.setup->targets == setup.targets);
  CHECK(loaded.setup->options.rank == 2);
  Tensor x = random_tensor({1, 64}, rng, -1, 1, false);
  Tensor m = random_mask(1, 64, rng);
  const std::vector<int> cls{1}, ts{42};
  CHECK(max_abs_diff(loaded.model.forward(x, m, cls, ts), model.forward(x, m, cls, ts)) == 0.0);
  CHECK(loaded.model.base_hash() == model.base_hash());
  CHECK_THROWS_AS(load_model(dir / "absent"), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("forward and backward on the default config stay under a second for a batch of 8") {
  Mmdit model(MmditConfig{});
  adapt::AttachOptions opt;
  opt.rank = 8;
  adapt::attach_adapters(model, adapt::default_targets(), opt);
  Rng rng(13);
  Tensor x = random_tensor({8, 1024}, rng, -1, 1, false);
  Tensor m = random_mask(8, 1024, rng);
  Tensor eps = random_tensor({8, 1024}, rng, -1, 1, false);
  const std::vector<int> cls{0, 1, 2, 0, 1, 2, 0, 1}, ts{1, 100, 200, 300, 400, 500, 600, 999};
  const auto start = std::chrono::steady_clock::now();
  weighted_mse(model.forward(x, m, cls, ts), eps, add_scalar(m, 1.0)).backward();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  MESSAGE("forward+backward seconds: " << secs);
  CHECK(secs < 1.0);
}
