#include <benchmark/benchmark.h>

#include "nervesynth/adapt/attach.hpp"
#include "nervesynth/common/rng.hpp"
#include "nervesynth/diffusion/ddpm.hpp"
#include "nervesynth/model/mmdit.hpp"
#include "nervesynth/tensor/ops.hpp"

using namespace nervesynth;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool grad = false) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = normal(rng);
  return Tensor(std::move(shape), std::move(v), grad);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  Tensor a = random_tensor({n, n}, rng, true), b = random_tensor({n, n}, rng, true);
  for (auto _ : state) {
    a.zero_grad();
    b.zero_grad();
    sum(matmul(a, b)).backward();
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(64)->Arg(128);

void BM_Conv2d(benchmark::State& state) {
  Rng rng(3);
  const Tensor x = random_tensor({16, 8, 32, 32}, rng);
  const Tensor w = random_tensor({16, 8, 3, 3}, rng);
  const Tensor bias = random_tensor({16}, rng);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, bias, 1, 1));
}
BENCHMARK(BM_Conv2d);

// One adapter training step of the default model at batch 8.
void BM_AdapterTrainStep(benchmark::State& state) {
  model::MmditConfig cfg;
  model::Mmdit net(cfg);
  adapt::attach_adapters(net, adapt::default_targets(), adapt::AttachOptions{});
  const auto schedule = diffusion::make_schedule();
  Rng rng(4);
  const std::size_t b = 8, p = cfg.pixels();
  diffusion::Batch batch{random_tensor({b, p}, rng), Tensor::zeros({b, p}), std::vector<int>(b, 0)};
  for (auto _ : state) {
    Tensor loss = diffusion::training_loss(net, batch, schedule, rng);
    loss.backward();
  }
}
BENCHMARK(BM_AdapterTrainStep)->Unit(benchmark::kMillisecond);

void BM_MmditForward(benchmark::State& state) {
  model::MmditConfig cfg;
  model::Mmdit net(cfg);
  Rng rng(5);
  const auto b = static_cast<std::size_t>(state.range(0));
  const Tensor x = random_tensor({b, cfg.pixels()}, rng);
  const Tensor masks = Tensor::zeros({b, cfg.pixels()});
  const std::vector<int> cls(b, 1), t(b, 500);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(x, masks, cls, t));
}
BENCHMARK(BM_MmditForward)->Arg(1)->Arg(16)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
