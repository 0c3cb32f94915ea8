#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "miw/tensor.hpp"

namespace miw {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam with per-parameter moment accumulators.
class AdamState {
 public:
  AdamState() = default;
  AdamState(AdamConfig cfg, std::span<const Tensor> params);

  // params[i] -= lr * m_hat / (sqrt(v_hat) + eps); throws TrainingError on a
  // non-finite gradient so the caller can fall back to its last checkpoint.
  void step(std::span<Tensor*> params, std::span<const Tensor> grads);

  std::size_t step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::size_t step_ = 0;
};

}  // namespace miw
