#include "miw/optim.hpp"

#include <cmath>
#include <string>

#include "miw/errors.hpp"

namespace miw {

AdamState::AdamState(AdamConfig cfg, std::span<const Tensor> params) : cfg_(cfg) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const Tensor& p : params) {
    m_.emplace_back(p.shape());
    v_.emplace_back(p.shape());
  }
}

void AdamState::step(std::span<Tensor*> params, std::span<const Tensor> grads) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw ShapeError("adam: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i].all_finite())
      throw TrainingError("adam: non-finite gradient in parameter " + std::to_string(i) +
                          " at step " + std::to_string(step_ + 1));
    if (!grads[i].same_shape(*params[i]))
      throw ShapeError("adam: gradient shape mismatch in parameter " + std::to_string(i));
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t j = 0; j < p.numel(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon);
    }
  }
}

}  // namespace miw
