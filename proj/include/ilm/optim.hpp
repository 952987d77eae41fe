#pragma once

#include <cstddef>
#include <vector>

#include "ilm/tensor.hpp"

namespace ilm {

enum class LrSchedule { kConstant, kCosine, kLinear };

// Learning rate at `step` of `total` steps; decays to zero at the end.
double scheduled_lr(double base, std::size_t step, std::size_t total, LrSchedule schedule);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

// Global L2 norm of the gradients of `params` (unreached params count as zero).
double gradient_norm(const Gradients& grads, const std::vector<Tensor>& params);

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config = {});

  // Applies one update in place; returns the pre-clipping gradient norm.
  double step(const Gradients& grads, double lr);

  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t t_ = 0;
};

}  // namespace ilm
