#include "ilm/optim.hpp"

#include <cmath>
#include <numbers>

#include "ilm/error.hpp"

namespace ilm {

double scheduled_lr(double base, std::size_t step, std::size_t total, LrSchedule schedule) {
  if (total == 0) return base;
  const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  switch (schedule) {
    case LrSchedule::kConstant:
      return base;
    case LrSchedule::kCosine:
      return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    case LrSchedule::kLinear:
      return base * (1.0 - progress);
  }
  return base;
}

double gradient_norm(const Gradients& grads, const std::vector<Tensor>& params) {
  double total = 0.0;
  for (const auto& p : params) {
    if (!grads.reached(p)) continue;
    for (double g : grads.view(p)) total += g * g;
  }
  return std::sqrt(total);
}

Adam::Adam(std::vector<Tensor> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    if (!p.is_leaf()) throw UsageError("optimizer parameters must be leaves");
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

double Adam::step(const Gradients& grads, double lr) {
  const double norm = gradient_norm(grads, params_);
  if (!std::isfinite(norm)) throw NumericalError("non-finite gradient norm in optimizer step");
  const double clip = (config_.clip_norm > 0.0 && norm > config_.clip_norm) ? config_.clip_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (!grads.reached(params_[k])) continue;
    const auto g = grads.view(params_[k]);
    auto w = params_[k].mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
    }
  }
  return norm;
}

}  // namespace ilm
