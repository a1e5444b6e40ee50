#include <cmath>
#include <random>

#include "doctest.h"
#include "nervesynth/common/error.hpp"
#include "nervesynth/common/rng.hpp"
#include "nervesynth/metrics/metrics.hpp"

using namespace nervesynth;
using namespace nervesynth::metrics;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat matmul(const Mat& a, const Mat& b) {
  const std::size_t n = a.size();
  Mat c(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < n; ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

Mat inverse(Mat a) {
  const std::size_t n = a.size();
  Mat inv(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) inv[i][i] = 1.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    std::swap(inv[c], inv[piv]);
    const double d = a[c][c];
    for (std::size_t j = 0; j < n; ++j) {
      a[c][j] /= d;
      inv[c][j] /= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = a[r][c];
      for (std::size_t j = 0; j < n; ++j) {
        a[r][j] -= f * a[c][j];
        inv[r][j] -= f * inv[c][j];
      }
    }
  }
  return inv;
}

// Denman-Beavers iteration for the principal square root of A.
Mat sqrtm(const Mat& a) {
  const std::size_t n = a.size();
  Mat y = a, z(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) z[i][i] = 1.0;
  for (int it = 0; it < 100; ++it) {
    const Mat yi = inverse(y), zi = inverse(z);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double ny = 0.5 * (y[i][j] + zi[i][j]), nz = 0.5 * (z[i][j] + yi[i][j]);
        y[i][j] = ny;
        z[i][j] = nz;
      }
  }
  return y;
}

// FID straight from the definition, Tr((S_r S_g)^1/2) via Denman-Beavers.
double fid_oracle(const std::vector<double>& mr, const Mat& sr, const std::vector<double>& mg, const Mat& sg) {
  double v = 0.0;
  for (std::size_t i = 0; i < mr.size(); ++i) v += (mr[i] - mg[i]) * (mr[i] - mg[i]);
  const Mat root = sqrtm(matmul(sr, sg));
  for (std::size_t i = 0; i < mr.size(); ++i) v += sr[i][i] + sg[i][i] - 2.0 * root[i][i];
  return v;
}

Mat random_spd(std::size_t n, Rng& rng) {
  Mat a(n, std::vector<double>(n));
  for (auto& r : a)
    for (auto& v : r) v = normal(rng);
  Mat s(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < n; ++k) s[i][j] += a[i][k] * a[j][k];
      s[i][j] /= static_cast<double>(n);
    }
  for (std::size_t i = 0; i < n; ++i) s[i][i] += 0.1;
  return s;
}

GaussianStats stats(const std::vector<double>& mu, const Mat& s) {
  GaussianStats g;
  g.dim = mu.size();
  g.mu = mu;
  for (const auto& r : s) g.sigma.insert(g.sigma.end(), r.begin(), r.end());
  return g;
}

io::GrayImage constant(std::size_t n, double v) { return {n, n, std::vector<double>(n * n, v)}; }

io::GrayImage noise_image(std::size_t n, Rng& rng) {
  io::GrayImage im{n, n, std::vector<double>(n * n)};
  for (auto& v : im.pixels) v = uniform(rng, 0.0, 1.0);
  return im;
}

}  // namespace

TEST_CASE("FID closed forms") {
  CHECK(fid(stats({0.0}, {{1.0}}), stats({1.0}, {{1.0}})) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(fid(stats({0.0}, {{4.0}}), stats({0.0}, {{1.0}})) == doctest::Approx(1.0).epsilon(1e-12));
  Rng rng(1);
  const auto s = random_spd(5, rng);
  const auto g = stats({1, 2, 3, 4, 5}, s);
  CHECK(fid(g, g) <= 1e-9);
  CHECK(std::abs(fid(g, stats({0, 2, 3, 4, 7}, s)) - 5.0) <= 1e-6);
  // Diagonal covariances: sum of (dmu)^2 + (sd_r - sd_g)^2.
  Mat dr(3, std::vector<double>(3, 0.0)), dg = dr;
  dr[0][0] = 1;  dr[1][1] = 4;  dr[2][2] = 9;
  dg[0][0] = 4;  dg[1][1] = 4;  dg[2][2] = 0.25;
  CHECK(std::abs(fid(stats({0, 0, 0}, dr), stats({1, 0, 0}, dg)) - (1 + 1 + 0 + 6.25)) <= 1e-9);
}

TEST_CASE("FID matches the definition on random covariances") {
  Rng rng(7);
  for (int t = 0; t < 10; ++t) {
    const std::size_t n = 2 + static_cast<std::size_t>(t % 5);
    std::vector<double> mr(n), mg(n);
    for (auto& v : mr) v = normal(rng);
    for (auto& v : mg) v = normal(rng);
    const auto sr = random_spd(n, rng), sg = random_spd(n, rng);
    const double a = fid(stats(mr, sr), stats(mg, sg));
    CHECK(std::abs(a - fid_oracle(mr, sr, mg, sg)) <= 1e-6);
    CHECK(std::abs(a - fid(stats(mg, sg), stats(mr, sr))) <= 1e-8);
    CHECK(a >= 0.0);
  }
}

TEST_CASE("FID input checks") {
  CHECK_THROWS_AS(fid(stats({0.0}, {{1.0}}), stats({0.0, 0.0}, {{1, 0}, {0, 1}})), DimensionError);
  CHECK_THROWS_AS(fid(stats({0, 0}, {{1, 0.5}, {0.4, 1}}), stats({0, 0}, {{1, 0}, {0, 1}})), NumericalError);
  CHECK_THROWS_AS(fid(stats({0, 0}, {{1, 2}, {2, 1}}), stats({0, 0}, {{1, 0}, {0, 1}})), NumericalError);
}

TEST_CASE("Gaussian stats of samples") {
  auto g = gaussian_stats({{1, 0}, {3, 0}, {2, 3}});
  CHECK(g.mu == std::vector<double>{2, 1});
  CHECK(g.sigma[0] == doctest::Approx(1.0));
  CHECK(g.sigma[3] == doctest::Approx(3.0));
  CHECK(g.sigma[1] == doctest::Approx(0.0));
  CHECK(g.sigma[1] == g.sigma[2]);
  CHECK_THROWS_AS(gaussian_stats({{1.0}}), UndefinedValueError);
}

TEST_CASE("PSNR") {
  Rng rng(2);
  auto x = noise_image(16, rng);
  CHECK(psnr(x, x) == kInfinity);
  std::vector<double> a(100, 0.0), b(100, 0.1);
  CHECK(psnr(a, b, 1.0) == doctest::Approx(20.0).epsilon(1e-12));
  std::vector<double> c(100, std::sqrt(0.02));
  CHECK(psnr(a, b) - psnr(a, c) == doctest::Approx(10.0 * std::log10(2.0)).epsilon(1e-12));
  CHECK_THROWS_AS(psnr(std::vector<double>(3), std::vector<double>(4)), DimensionError);
}

TEST_CASE("SSIM") {
  Rng rng(3);
  auto x = noise_image(16, rng), y = noise_image(16, rng);
  CHECK(ssim(x, x) == doctest::Approx(1.0).epsilon(1e-12));
  const double c1 = 1e-4, c2 = 9e-4;
  CHECK(std::abs(ssim(constant(8, 0.0), constant(8, 1.0)) - c1 * c2 / ((1 + c1) * c2)) <= 1e-6);
  CHECK(ssim(x, y) == doctest::Approx(ssim(y, x)).epsilon(1e-14));
  CHECK(ssim(x, y) >= -1.0);
  CHECK(ssim(x, y) <= 1.0);
  CHECK_THROWS_AS(ssim(constant(7, 0.0), constant(7, 0.0)), DimensionError);

  // One window covering the whole image, two-pass statistics.
  auto p = noise_image(8, rng), q = noise_image(8, rng);
  double mp = 0, mq = 0;
  for (std::size_t i = 0; i < 64; ++i) {
    mp += p.pixels[i] / 64;
    mq += q.pixels[i] / 64;
  }
  double vp = 0, vq = 0, cpq = 0;
  for (std::size_t i = 0; i < 64; ++i) {
    vp += (p.pixels[i] - mp) * (p.pixels[i] - mp) / 64;
    vq += (q.pixels[i] - mq) * (q.pixels[i] - mq) / 64;
    cpq += (p.pixels[i] - mp) * (q.pixels[i] - mq) / 64;
  }
  const double expect = (2 * mp * mq + c1) * (2 * cpq + c2) / ((mp * mp + mq * mq + c1) * (vp + vq + c2));
  CHECK(ssim(p, q) == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("intra-class diversity") {
  CHECK(intra_class_diversity({{1, 1}, {1, 1}, {1, 1}}) == 0.0);
  CHECK(intra_class_diversity({{0, 0}, {3, 4}}) == doctest::Approx(5.0));
  std::vector<FeatureVec> f{{0, 1}, {2, 5}, {-1, 3}}, f2;
  for (auto v : f) f2.push_back({2 * v[0], 2 * v[1]});
  CHECK(intra_class_diversity(f2) == doctest::Approx(2 * intra_class_diversity(f)));
  CHECK_THROWS_AS(intra_class_diversity({{1.0}}), UndefinedValueError);
  const std::vector<int> labels{0, 0, 1};
  CHECK_THROWS_AS(intra_class_diversity(f, labels), UndefinedValueError);
}

TEST_CASE("inter-class separability") {
  Rng rng(4);
  std::vector<FeatureVec> tight, loose, same;
  std::vector<int> labels;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 20; ++i) {
      tight.push_back({10.0 * c + 0.1 * normal(rng), 0.1 * normal(rng)});
      loose.push_back({0.5 * c + normal(rng), normal(rng)});
      same.push_back({normal(rng), normal(rng)});
      labels.push_back(c);
    }
  CHECK(inter_class_separability(tight, labels) > inter_class_separability(loose, labels));
  CHECK(inter_class_separability(same, labels) < 0.5);
  auto shifted = loose;
  for (auto& v : shifted) {
    v[0] += 100.0;
    v[1] -= 3.0;
  }
  CHECK(inter_class_separability(shifted, labels) ==
        doctest::Approx(inter_class_separability(loose, labels)).epsilon(1e-9));
  const std::vector<int> pts{0, 1};
  CHECK(inter_class_separability({{0.0}, {1.0}}, pts) == kInfinity);
  const std::vector<int> one{0, 0};
  CHECK_THROWS_AS(inter_class_separability({{0.0}, {1.0}}, one), ContractError);
  CHECK(relative_difference(3.87, 4.76) == doctest::Approx(0.89 / 4.76));
  CHECK(relative_difference(4.76, 3.87) == relative_difference(3.87, 4.76));
  CHECK(relative_difference(0.0, 0.0) == 0.0);
}

TEST_CASE("mIoU") {
  std::vector<std::uint8_t> t(100, 0), p(100, 0);
  for (int i = 0; i < 20; ++i) t[i] = 1;
  CHECK(miou(t, t) == 1.0);
  CHECK(class_iou(p, t, 1) == 0.0);
  std::vector<std::uint8_t> d(100, 0);
  for (int i = 20; i < 40; ++i) d[i] = 1;
  CHECK(class_iou(d, t, 1) == 0.0);
  // Two 10x10 squares overlapping by half: IoU = 50 / 150.
  std::vector<std::uint8_t> a(400, 0), b(400, 0);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) {
      a[y * 20 + x] = 1;
      b[y * 20 + x + 5] = 1;
    }
  CHECK(class_iou(a, b, 1) == doctest::Approx(1.0 / 3.0));
  CHECK(miou(a, b) == doctest::Approx((1.0 / 3.0 + 250.0 / 350.0) / 2.0));
  std::vector<std::uint8_t> zeros(4, 0);
  CHECK(miou(zeros, zeros) == 1.0);
  CHECK_THROWS_AS(miou(zeros, t), DimensionError);
}

TEST_CASE("accuracy") {
  const std::vector<int> y{0, 1, 2, 1};
  CHECK(accuracy(y, y) == 1.0);
  const std::vector<int> p{0, 2, 2, 0}, pr{0, 2, 0, 2}, yr{1, 2, 0, 1};
  CHECK(accuracy(p, y) == 0.5);
  CHECK(accuracy(pr, yr) == accuracy(p, y));
  Rng rng(5);
  std::vector<int> guess(30000), truth(30000);
  for (std::size_t i = 0; i < guess.size(); ++i) {
    guess[i] = uniform_int(rng, 0, 2);
    truth[i] = uniform_int(rng, 0, 2);
  }
  CHECK(std::abs(accuracy(guess, truth) - 1.0 / 3.0) < 0.01);
  CHECK_THROWS_AS(accuracy(std::vector<int>{}, std::vector<int>{}), UndefinedValueError);
}

TEST_CASE("feature extractor is a fixed function of its seed") {
  Rng rng(6);
  auto im = noise_image(32, rng);
  FeatureExtractor a, b, c(1);
  const auto fa = a(im);
  CHECK(fa.size() == 64);
  CHECK(fa == b(im));
  CHECK(fa != c(im));
  CHECK(a(constant(32, 0.3)) != a(constant(32, 0.7)));
  CHECK_THROWS_AS(a(constant(4, 0.0)), DimensionError);
}
