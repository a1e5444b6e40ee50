#pragma once

#include <vector>

#include "nervesynth/tensor/tensor.hpp"

namespace nervesynth::optim {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options = {});

  // One update at learning rate `lr` (overrides options.lr for this step).
  void step(double lr);
  void step() { step(options_.lr); }
  void zero_grad();

  std::size_t steps_taken() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Linear warmup followed by cosine decay over `cycles` periods (0.5 decays
// once from base to zero).
class CosineWarmup {
 public:
  CosineWarmup(double base_lr, std::size_t warmup_steps, std::size_t total_steps,
               double cycles = 0.5);
  double lr(std::size_t step) const;

 private:
  double base_;
  std::size_t warmup_, total_;
  double cycles_;
};

}  // namespace nervesynth::optim
