#include "nervesynth/diffusion/ddpm.hpp"

#include <algorithm>
#include <cmath>

#include "nervesynth/common/error.hpp"
#include "nervesynth/tensor/ops.hpp"

namespace nervesynth::diffusion {

namespace {

void check_t(int t, const NoiseSchedule& s) {
  if (t < 0 || static_cast<std::size_t>(t) >= s.steps) {
    throw ConfigError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(s.steps) +
                      ")");
  }
}

}  // namespace

NoiseSchedule make_schedule(std::size_t steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("schedule needs 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta.resize(steps);
  s.alpha.resize(steps);
  s.alpha_bar.resize(steps);
  double prod = 1.0;
  for (std::size_t t = 0; t < steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(steps - 1);
    s.beta[t] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[t] = 1.0 - s.beta[t];
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
  }
  return s;
}

std::vector<double> q_sample(std::span<const double> x0, int t, std::span<const double> eps,
                             const NoiseSchedule& schedule) {
  check_t(t, schedule);
  if (x0.size() != eps.size()) throw DimensionError("q_sample: x0 and eps differ in size");
  const double a = std::sqrt(schedule.alpha_bar[t]), b = std::sqrt(1.0 - schedule.alpha_bar[t]);
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

Tensor q_sample(const Tensor& x0, std::span<const int> t, const Tensor& eps,
                const NoiseSchedule& schedule) {
  if (x0.rank() != 2 || eps.shape() != x0.shape() || t.size() != x0.dim(0)) {
    throw DimensionError("batched q_sample expects matching [batch x pixels] inputs");
  }
  const std::size_t px = x0.dim(1);
  std::vector<double> out(x0.numel());
  for (std::size_t r = 0; r < t.size(); ++r) {
    auto row = q_sample(x0.data().subspan(r * px, px), t[r], eps.data().subspan(r * px, px), schedule);
    std::copy(row.begin(), row.end(), out.begin() + static_cast<std::ptrdiff_t>(r * px));
  }
  return Tensor(x0.shape(), std::move(out));
}

std::vector<double> predict_x0(std::span<const double> x_t, int t, std::span<const double> eps,
                               const NoiseSchedule& schedule) {
  check_t(t, schedule);
  const double ab = schedule.alpha_bar[t];
  const double a = 1.0 / std::sqrt(ab), b = std::sqrt(1.0 - ab);
  std::vector<double> out(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) out[i] = a * (x_t[i] - b * eps[i]);
  return out;
}

Tensor training_loss(const NoisePredictor& predict, const Batch& batch,
                     const NoiseSchedule& schedule, Rng& rng, const LossWeights& weights) {
  const Tensor& x0 = batch.x0;
  if (x0.rank() != 2 || batch.masks.shape() != x0.shape() ||
      batch.class_ids.size() != x0.dim(0)) {
    throw DimensionError("training batch expects x0 and masks [batch x pixels] with one class per row");
  }
  const std::size_t b = x0.dim(0);
  std::vector<int> t(b);
  for (auto& v : t) v = uniform_int(rng, 0, static_cast<int>(schedule.steps) - 1);
  std::vector<double> eps(x0.numel());
  for (auto& v : eps) v = normal(rng);
  Tensor noise(x0.shape(), std::move(eps));
  Tensor x_t = q_sample(x0, t, noise, schedule);
  std::vector<double> w(x0.numel());
  const auto m = batch.masks.data();
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = m[i] > 0.5 ? weights.foreground : weights.background;
  }
  Tensor pred = predict(x_t, batch.masks, batch.class_ids, t);
  return weighted_mse(pred, noise, Tensor(x0.shape(), std::move(w)));
}

Tensor training_loss(const model::Mmdit& model, const Batch& batch, const NoiseSchedule& schedule,
                     Rng& rng, const LossWeights& weights) {
  return training_loss(
      [&](const Tensor& x, const Tensor& m, std::span<const int> c, std::span<const int> t) {
        return model.forward(x, m, c, t);
      },
      batch, schedule, rng, weights);
}

std::vector<int> sampling_timesteps(std::size_t steps, std::size_t stride) {
  if (stride == 0) throw ConfigError("sampling stride must be positive");
  std::vector<int> ts;
  for (std::size_t t = steps; t-- > 0;) {
    if ((steps - 1 - t) % stride == 0) ts.push_back(static_cast<int>(t));
  }
  if (ts.back() != 0) ts.push_back(0);
  return ts;
}

std::vector<std::vector<double>> sample(const NoisePredictor& predict, std::size_t pixels,
                                        const std::vector<model::ConditionBundle>& bundles,
                                        const NoiseSchedule& schedule, const SampleOptions& options) {
  NoGradGuard guard;
  const std::size_t n = bundles.size();
  if (n == 0) return {};
  std::vector<Rng> rngs;
  rngs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) rngs.emplace_back(derive_seed(options.seed, i));

  std::vector<double> x(n * pixels), masks(n * pixels);
  std::vector<int> cls(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (bundles[i].mask.size() != pixels) throw DimensionError("bundle mask size mismatch");
    std::copy(bundles[i].mask.begin(), bundles[i].mask.end(), masks.begin() + static_cast<std::ptrdiff_t>(i * pixels));
    cls[i] = bundles[i].class_id;
    for (std::size_t p = 0; p < pixels; ++p) x[i * pixels + p] = normal(rngs[i]);
  }
  Tensor mask_tensor({n, pixels}, masks);

  const auto ts = sampling_timesteps(schedule.steps, options.stride);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const double ab = schedule.alpha_bar[t];
    const double ab_prev = k + 1 < ts.size() ? schedule.alpha_bar[ts[k + 1]] : 1.0;
    // Respaced step from t to the next visited timestep.
    const double beta = 1.0 - ab / ab_prev;
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    const bool last = k + 1 == ts.size();

    std::vector<int> tvec(n, t);
    Tensor eps = predict(Tensor({n, pixels}, x), mask_tensor, cls, tvec);
    const auto e = eps.data();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < pixels; ++p) {
        const std::size_t j = i * pixels + p;
        double x0 = (x[j] - std::sqrt(1.0 - ab) * e[j]) / std::sqrt(ab);
        x0 = std::clamp(x0, -1.0, 1.0);
        double mean = c0 * x0 + ct * x[j];
        x[j] = last ? mean : mean + std::sqrt(beta) * normal(rngs[i]);
      }
    }
    for (double v : x) {
      if (!std::isfinite(v)) throw NumericalError("sampler produced a non-finite value");
    }
  }
  std::vector<std::vector<double>> out(n, std::vector<double>(pixels));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < pixels; ++p)
      out[i][p] = std::clamp(from_model_range(x[i * pixels + p]), 0.0, 1.0);
  return out;
}

std::vector<std::vector<double>> sample(const model::Mmdit& model,
                                        const std::vector<model::ConditionBundle>& bundles,
                                        const NoiseSchedule& schedule, const SampleOptions& options) {
  for (const auto& b : bundles) b.validate(model.config());
  return sample(
      [&](const Tensor& x, const Tensor& m, std::span<const int> c, std::span<const int> t) {
        return model.forward(x, m, c, t);
      },
      model.config().pixels(), bundles, schedule, options);
}

std::vector<double> sample(const model::Mmdit& model, const model::ConditionBundle& bundle,
                           const NoiseSchedule& schedule, const SampleOptions& options) {
  return sample(model, std::vector<model::ConditionBundle>{bundle}, schedule, options).front();
}

}  // namespace nervesynth::diffusion
