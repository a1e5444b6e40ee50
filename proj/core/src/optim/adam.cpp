#include "nervesynth/optim/adam.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "nervesynth/common/error.hpp"

namespace nervesynth::optim {

Adam::Adam(std::vector<Tensor> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    if (!p.requires_grad()) throw ContractError("Adam given a parameter that does not require grad");
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto w = p.mutable_data();
    const auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] + options_.weight_decay * w[j];
      m[j] = b1 * m[j] + (1.0 - b1) * gj;
      v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + options_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

CosineWarmup::CosineWarmup(double base_lr, std::size_t warmup_steps, std::size_t total_steps,
                           double cycles)
    : base_(base_lr), warmup_(warmup_steps), total_(total_steps), cycles_(cycles) {
  if (total_steps == 0) throw ConfigError("schedule needs at least one step");
}

double CosineWarmup::lr(std::size_t step) const {
  if (step < warmup_) {
    return base_ * static_cast<double>(step + 1) / static_cast<double>(warmup_ + 1);
  }
  const double span = static_cast<double>(std::max<std::size_t>(1, total_ - warmup_));
  const double progress = std::min(1.0, static_cast<double>(step - warmup_) / span);
  return base_ * std::max(0.0, 0.5 * (1.0 + std::cos(std::numbers::pi * cycles_ * 2.0 * progress)));
}

}  // namespace nervesynth::optim
