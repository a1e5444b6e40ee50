#include <cmath>
#include <numeric>

#include "doctest.h"
#include "nervesynth/common/error.hpp"
#include "nervesynth/diffusion/ddpm.hpp"
#include "nervesynth/tensor/ops.hpp"

using namespace nervesynth;
using namespace nervesynth::diffusion;

namespace {

// Closed-form ε for a known clean image: inverts q_sample exactly.
std::vector<double> true_eps(std::span<const double> x_t, std::span<const double> x0, int t,
                             const NoiseSchedule& s) {
  std::vector<double> e(x_t.size());
  for (std::size_t i = 0; i < e.size(); ++i)
    e[i] = (x_t[i] - std::sqrt(s.alpha_bar[t]) * x0[i]) / std::sqrt(1.0 - s.alpha_bar[t]);
  return e;
}

Batch make_batch(std::size_t b, std::size_t px, double mask_fill, Rng& rng) {
  std::vector<double> x(b * px), m(b * px);
  for (auto& v : x) v = uniform(rng, -1, 1);
  for (auto& v : m) v = uniform(rng, 0, 1) < mask_fill ? 1.0 : 0.0;
  return {Tensor({b, px}, x), Tensor({b, px}, m), std::vector<int>(b, 0)};
}

}  // namespace

TEST_CASE("default schedule endpoints") {
  auto s = make_schedule(1000, 1e-4, 0.02);
  CHECK(s.alpha_bar[0] == doctest::Approx(0.9999).epsilon(1e-15));
  double log_prod = 0.0;
  for (int t = 0; t < 1000; ++t) log_prod += std::log1p(-(1e-4 + (0.02 - 1e-4) * t / 999.0));
  CHECK(s.alpha_bar[999] == doctest::Approx(std::exp(log_prod)).epsilon(1e-10));
  CHECK(s.alpha_bar[999] < 0.01);
  for (int t = 1; t < 1000; ++t) {
    CHECK(s.beta[t] > s.beta[t - 1]);
    CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
  }
}

TEST_CASE("single step schedule and invalid ranges") {
  auto s = make_schedule(1, 0.3, 0.3);
  REQUIRE(s.alpha_bar.size() == 1);
  CHECK(s.alpha_bar[0] == doctest::Approx(0.7));
  CHECK_THROWS_AS(make_schedule(0), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.02), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, 0.03, 0.02), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0), ConfigError);
}

TEST_CASE("q_sample limits") {
  const std::vector<double> x0{0.1, -0.4, 0.9}, eps{1.5, -0.2, 0.3};
  NoiseSchedule clean{1, {0.0}, {1.0}, {1.0}};
  NoiseSchedule noise{1, {1.0}, {0.0}, {0.0}};
  CHECK(q_sample(x0, 0, eps, clean) == x0);
  CHECK(q_sample(x0, 0, eps, noise) == eps);
  auto s = make_schedule();
  CHECK_THROWS_AS(q_sample(x0, 1000, eps, s), ConfigError);
  CHECK_THROWS_AS(q_sample(x0, -1, eps, s), ConfigError);
}

TEST_CASE("q_sample variance matches the Monte-Carlo oracle") {
  auto s = make_schedule();
  Rng rng(1);
  const int t = 250;
  const std::size_t n = 10000;
  std::vector<double> x0(n), eps(n);
  for (auto& v : x0) v = uniform(rng, -1, 1);  // variance 1/3
  for (auto& v : eps) v = normal(rng);
  auto xt = q_sample(x0, t, eps, s);
  const double mu = std::accumulate(xt.begin(), xt.end(), 0.0) / n;
  double var = 0.0;
  for (double v : xt) var += (v - mu) * (v - mu);
  var /= n - 1;
  const double expected = s.alpha_bar[t] / 3.0 + (1.0 - s.alpha_bar[t]);
  CHECK(std::abs(var - expected) / expected <= 0.05);
}

TEST_CASE("predict_x0 inverts q_sample") {
  auto s = make_schedule();
  Rng rng(2);
  std::vector<double> x0(50), eps(50);
  for (auto& v : x0) v = uniform(rng, -1, 1);
  for (auto& v : eps) v = normal(rng);
  for (int t : {0, 10, 500, 999}) {
    auto back = predict_x0(q_sample(x0, t, eps, s), t, eps, s);
    for (std::size_t i = 0; i < x0.size(); ++i) CHECK(std::abs(back[i] - x0[i]) <= 1e-9);
  }
}

TEST_CASE("zero predictor loss is the mean squared noise") {
  auto s = make_schedule();
  Rng rng(3);
  Batch batch = make_batch(32, 256, 0.3, rng);
  NoisePredictor zero = [](const Tensor& x, const Tensor&, std::span<const int>, std::span<const int>) {
    return Tensor::zeros(x.shape());
  };
  CHECK(training_loss(zero, batch, s, rng).item() == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("untrained model loss is close to one") {
  model::MmditConfig cfg;
  model::Mmdit net(cfg);
  auto s = make_schedule();
  Rng rng(4);
  Batch batch = make_batch(16, 1024, 0.2, rng);
  CHECK(training_loss(net, batch, s, rng).item() == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("perfect predictor has zero loss") {
  auto s = make_schedule();
  Rng rng(5);
  Batch batch = make_batch(4, 64, 0.5, rng);
  NoisePredictor oracle = [&](const Tensor& x, const Tensor&, std::span<const int>,
                              std::span<const int> t) {
    std::vector<double> out;
    for (std::size_t r = 0; r < t.size(); ++r) {
      auto e = true_eps(x.data().subspan(r * 64, 64), batch.x0.data().subspan(r * 64, 64), t[r], s);
      out.insert(out.end(), e.begin(), e.end());
    }
    return Tensor(x.shape(), out);
  };
  CHECK(training_loss(oracle, batch, s, rng).item() <= 1e-18);
}

TEST_CASE("mask weighting reduces to plain MSE when it is uniform") {
  auto s = make_schedule();
  for (double fill : {0.0, 0.4}) {
    Rng data_rng(6);
    Batch batch = make_batch(3, 64, fill, data_rng);
    std::vector<double> plain;
    NoisePredictor half = [&](const Tensor& x, const Tensor&, std::span<const int>,
                              std::span<const int> t) {
      double acc = 0.0;
      for (std::size_t r = 0; r < t.size(); ++r) {
        auto e = true_eps(x.data().subspan(r * 64, 64), batch.x0.data().subspan(r * 64, 64), t[r], s);
        for (double v : e) acc += (0.5 - v) * (0.5 - v);
      }
      plain.push_back(acc / x.numel());
      return Tensor::full(x.shape(), 0.5);
    };
    Rng a(7), b(7);
    const LossWeights uniform_weights{3.0, 3.0};
    const double weighted = training_loss(half, batch, s, a, uniform_weights).item();
    CHECK(weighted == doctest::Approx(plain.back()).epsilon(1e-12));
    if (fill == 0.0) {
      CHECK(training_loss(half, batch, s, b).item() == doctest::Approx(plain.back()).epsilon(1e-12));
    }
  }
}

TEST_CASE("strided timesteps end at zero") {
  auto ts = sampling_timesteps(1000, 20);
  CHECK(ts.front() == 999);
  CHECK(ts.back() == 0);
  CHECK(ts.size() == 51);
  CHECK(sampling_timesteps(5, 1) == std::vector<int>{4, 3, 2, 1, 0});
  CHECK_THROWS_AS(sampling_timesteps(5, 0), ConfigError);
}

TEST_CASE("sampler with an exact predictor returns the data point") {
  auto s = make_schedule();
  std::vector<double> target(16);
  for (std::size_t i = 0; i < 16; ++i) target[i] = -0.9 + 0.1 * static_cast<double>(i);
  NoisePredictor exact = [&](const Tensor& x, const Tensor&, std::span<const int>,
                             std::span<const int> t) {
    std::vector<double> out;
    for (std::size_t r = 0; r < t.size(); ++r) {
      auto e = true_eps(x.data().subspan(r * 16, 16), target, t[r], s);
      out.insert(out.end(), e.begin(), e.end());
    }
    return Tensor(x.shape(), out);
  };
  std::vector<model::ConditionBundle> bundles(2, {std::vector<double>(16, 0.0), 0, 0});
  for (std::size_t stride : {1, 20, 333}) {
    auto imgs = sample(exact, 16, bundles, s, {stride, 9});
    for (const auto& img : imgs)
      for (std::size_t i = 0; i < 16; ++i) CHECK(std::abs(img[i] - from_model_range(target[i])) <= 1e-9);
  }
}

TEST_CASE("model sampling is deterministic, finite and batch independent") {
  model::MmditConfig cfg;
  cfg.image_size = 16;
  model::Mmdit net(cfg);
  auto s = make_schedule();
  model::ConditionBundle a{std::vector<double>(256, 0.0), 1, 0};
  model::ConditionBundle b{std::vector<double>(256, 1.0), 2, 0};
  SampleOptions opt{100, 42};
  auto x = sample(net, a, s, opt);
  CHECK(x.size() == 256);
  CHECK(x == sample(net, a, s, opt));
  for (double v : x) CHECK((std::isfinite(v) && v >= 0.0 && v <= 1.0));
  auto pair = sample(net, {a, b}, s, opt);
  // Batched GEMM may round differently from a single row.
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(pair[0][i] - x[i]) <= 1e-9);
  opt.seed = 43;
  CHECK(sample(net, a, s, opt) != x);
}
