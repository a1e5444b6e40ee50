#include <benchmark/benchmark.h>

#include "nervesynth/biomarkers/biomarkers.hpp"
#include "nervesynth/datagen/datagen.hpp"

using namespace nervesynth;

namespace {

const biomarkers::Mask& control_mask() {
  static const auto m = datagen::gen_mask(0, 17).mask;
  return m;
}

void BM_Skeletonize(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(biomarkers::skeletonize(control_mask()));
}
BENCHMARK(BM_Skeletonize)->Unit(benchmark::kMillisecond);

void BM_DistanceTransform(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(biomarkers::distance_transform(control_mask()));
}
BENCHMARK(BM_DistanceTransform)->Unit(benchmark::kMillisecond);

void BM_Report(benchmark::State& state) {
  const biomarkers::Geometry g;
  for (auto _ : state) benchmark::DoNotOptimize(biomarkers::report(control_mask(), g));
}
BENCHMARK(BM_Report)->Unit(benchmark::kMillisecond);

void BM_GenMask(benchmark::State& state) {
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(datagen::gen_mask(static_cast<int>(seed % 3), seed++));
}
BENCHMARK(BM_GenMask)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
