#include <benchmark/benchmark.h>

#include "nervesynth/common/rng.hpp"
#include "nervesynth/metrics/metrics.hpp"

using namespace nervesynth;

namespace {

std::vector<metrics::FeatureVec> random_features(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<metrics::FeatureVec> f(n, metrics::FeatureVec(dim));
  for (auto& v : f)
    for (auto& x : v) x = normal(rng);
  return f;
}

void BM_Fid(benchmark::State& state) {
  const auto dim = static_cast<std::size_t>(state.range(0));
  const auto a = metrics::gaussian_stats(random_features(4 * dim, dim, 1));
  const auto b = metrics::gaussian_stats(random_features(4 * dim, dim, 2));
  for (auto _ : state) benchmark::DoNotOptimize(metrics::fid(a, b));
}
BENCHMARK(BM_Fid)->Arg(16)->Arg(64);

void BM_Features(benchmark::State& state) {
  const metrics::FeatureExtractor fx;
  Rng rng(3);
  io::GrayImage img{32, 32, std::vector<double>(1024)};
  for (auto& v : img.pixels) v = uniform(rng, 0.0, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(fx(img));
}
BENCHMARK(BM_Features);

void BM_Ssim(benchmark::State& state) {
  Rng rng(4);
  io::GrayImage a{32, 32, std::vector<double>(1024)}, b = a;
  for (auto& v : a.pixels) v = uniform(rng, 0.0, 1.0);
  for (auto& v : b.pixels) v = uniform(rng, 0.0, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(metrics::ssim(a, b));
}
BENCHMARK(BM_Ssim);

}  // namespace

BENCHMARK_MAIN();
