#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "miw/rng.hpp"
#include "miw/tensor.hpp"

namespace miw {

enum class Mode { kTrain, kEval };

// Handle to a node on a Tape.
struct Value {
  std::uint32_t idx = UINT32_MAX;
  bool valid() const { return idx != UINT32_MAX; }
};

// Reverse-mode autodiff tape. Operations append nodes in execution order,
// which is by construction a topological order: one reverse sweep from the
// loss yields gradients for every tracked leaf. Gradient buffers are
// allocated lazily, so untouched subgraphs cost nothing in the sweep.
class Tape {
 public:
  Value leaf(Tensor value, bool requires_grad = false);

  const Tensor& val(Value v) const { return nodes_[v.idx].value; }
  bool needs_grad(Value v) const { return nodes_[v.idx].requires_grad; }
  bool has_grad(Value v) const { return nodes_[v.idx].grad.numel() > 0; }

  // Gradient of the last backward() pass; zeros if no gradient flowed.
  Tensor grad_of(Value v) const;
  // Reference variant for backward closures; only valid once a gradient
  // buffer exists (backward() guarantees this before invoking a closure).
  const Tensor& grad_ref(Value v) const { return nodes_[v.idx].grad; }

  // loss must be scalar (one element)
  void backward(Value loss);

  // ---- primitives ----
  Value add(Value a, Value b);  // same shape, or b a row vector broadcast over a's rows
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);  // elementwise
  Value scale(Value a, double s);
  Value matmul(Value a, Value b);
  Value transpose(Value a);
  Value sigmoid(Value a);
  Value tanh(Value a);
  Value relu(Value a);
  Value elu(Value a, double alpha = 1.0);
  Value softmax(Value a);  // row-wise over the last axis of a rank-2 tensor
  Value concat_cols(Value a, Value b);
  Value slice_cols(Value a, std::size_t c0, std::size_t c1);
  Value slice_rows(Value a, std::size_t r0, std::size_t r1);
  Value sum_all(Value a);
  Value mean_all(Value a);
  Value sumsq(Value a);
  Value reshape(Value a, std::vector<std::size_t> shape);
  // mean of -log(p[label]) with probabilities floored at kProbFloor
  Value cross_entropy(Value probs, const std::vector<int>& labels, int n_classes);
  // train mode: zero with probability rate, scale survivors by 1/(1-rate)
  Value dropout(Value a, double rate, Mode mode, Rng& rng);

  // ---- extension point for fused ops (layers.hpp) ----
  Value custom(Tensor value, bool requires_grad, std::function<void(Tape&)> back);
  // Accumulates into v's gradient buffer; returns nullptr when v is untracked
  // (callers skip the work). Allocates a zero buffer on first use.
  Tensor* grad_sink(Value v);
  void accumulate(Value v, const Tensor& g);

  std::size_t size() const { return nodes_.size(); }

  static constexpr double kProbFloor = 1e-12;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Tape&)> back;
  };
  std::vector<Node> nodes_;

  Value push(Tensor value, bool requires_grad, std::function<void(Tape&)> back);
};

// Global L2-norm gradient clipping over a set of gradient tensors.
void clip_global_norm(std::span<Tensor> grads, double max_norm);

}  // namespace miw
