#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "nervesynth/common/rng.hpp"
#include "nervesynth/model/mmdit.hpp"
#include "nervesynth/tensor/tensor.hpp"

namespace nervesynth::diffusion {

struct NoiseSchedule {
  std::size_t steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
};

// Linear beta from beta_start to beta_end over `steps` timesteps.
NoiseSchedule make_schedule(std::size_t steps = 1000, double beta_start = 1e-4,
                            double beta_end = 0.02);

// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
std::vector<double> q_sample(std::span<const double> x0, int t, std::span<const double> eps,
                             const NoiseSchedule& schedule);
// Batched over rows of [batch x pixels], one timestep per row. Constant result.
Tensor q_sample(const Tensor& x0, std::span<const int> t, const Tensor& eps,
                const NoiseSchedule& schedule);

// Inverts q_sample for a given noise estimate.
std::vector<double> predict_x0(std::span<const double> x_t, int t, std::span<const double> eps,
                               const NoiseSchedule& schedule);

// Images live in [0, 1] outside the diffusion process and in [-1, 1] inside it.
inline double to_model_range(double v) { return 2.0 * v - 1.0; }
inline double from_model_range(double v) { return 0.5 * (v + 1.0); }

struct LossWeights {
  double foreground = 2.0;
  double background = 1.0;
};

// x0 and masks are [batch x pixels]; x0 already in model range.
struct Batch {
  Tensor x0;
  Tensor masks;
  std::vector<int> class_ids;
};

using NoisePredictor = std::function<Tensor(const Tensor& x_t, const Tensor& masks,
                                            std::span<const int> class_ids,
                                            std::span<const int> timesteps)>;

// Draws t ~ U{0..T-1} and eps ~ N(0, 1) per row and returns the mask-weighted
// MSE between predicted and true noise, normalized by the total weight.
Tensor training_loss(const NoisePredictor& predict, const Batch& batch,
                     const NoiseSchedule& schedule, Rng& rng, const LossWeights& weights = {});
Tensor training_loss(const model::Mmdit& model, const Batch& batch, const NoiseSchedule& schedule,
                     Rng& rng, const LossWeights& weights = {});

// Decreasing timesteps visited by the strided sampler; always ends at 0.
std::vector<int> sampling_timesteps(std::size_t steps, std::size_t stride);

struct SampleOptions {
  std::size_t stride = 20;
  std::uint64_t seed = 0;
};

// Ancestral reverse chain from pure noise. Chain i uses derive_seed(seed, i),
// so results depend on batching only through float rounding. Returns images in
// [0, 1], one vector of pixels per bundle.
std::vector<std::vector<double>> sample(const model::Mmdit& model,
                                        const std::vector<model::ConditionBundle>& bundles,
                                        const NoiseSchedule& schedule, const SampleOptions& options);
std::vector<double> sample(const model::Mmdit& model, const model::ConditionBundle& bundle,
                           const NoiseSchedule& schedule, const SampleOptions& options);

// Core loop, exposed for tests with analytic predictors.
std::vector<std::vector<double>> sample(const NoisePredictor& predict, std::size_t pixels,
                                        const std::vector<model::ConditionBundle>& bundles,
                                        const NoiseSchedule& schedule, const SampleOptions& options);

}  // namespace nervesynth::diffusion
