#include "miw/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace miw {

Value Tape::leaf(Tensor value, bool requires_grad) {
  return push(std::move(value), requires_grad, nullptr);
}

Value Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&)> back) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, std::move(back)});
  return Value{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Value Tape::custom(Tensor value, bool requires_grad, std::function<void(Tape&)> back) {
  return push(std::move(value), requires_grad, requires_grad ? std::move(back) : nullptr);
}

Tensor* Tape::grad_sink(Value v) {
  Node& n = nodes_[v.idx];
  if (!n.requires_grad) return nullptr;
  if (n.grad.numel() == 0) n.grad = Tensor(n.value.shape());
  return &n.grad;
}

void Tape::accumulate(Value v, const Tensor& g) {
  Tensor* sink = grad_sink(v);
  if (!sink) return;
  double* dst = sink->data();
  const double* src = g.data();
  for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
}

Tensor Tape::grad_of(Value v) const {
  const Node& n = nodes_[v.idx];
  if (n.grad.numel() == 0) return Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Value loss) {
  if (val(loss).numel() != 1)
    throw ShapeError("backward: loss must be a scalar, got " +
                     std::to_string(val(loss).numel()) + " elements");
  if (!nodes_[loss.idx].requires_grad)
    throw ShapeError("backward: loss does not depend on any tracked leaf");
  Tensor* seed = grad_sink(loss);
  (*seed)[0] += 1.0;
  for (std::size_t i = loss.idx + 1; i-- > 0;) {
    Node& n = nodes_[i];
    // no buffer means no gradient reached this node
    if (n.back && n.grad.numel() > 0) n.back(*this);
  }
}

// ---- primitives ----

namespace {
void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": shape mismatch");
}
}  // namespace

Value Tape::add(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  bool broadcast = !ta.same_shape(tb);
  if (broadcast) {
    if (!(ta.rank() == 2 && tb.rank() <= 2 && tb.rows() == 1 && tb.cols() == ta.cols()))
      throw ShapeError("add: shapes incompatible (row-vector broadcast only)");
  }
  Tensor out = ta;
  if (broadcast) {
    const std::size_t n = ta.cols();
    for (std::size_t r = 0; r < ta.rows(); ++r)
      for (std::size_t c = 0; c < n; ++c) out[r * n + c] += tb[c];
  } else {
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += tb[i];
  }
  bool rg = needs_grad(a) || needs_grad(b);
  return push(std::move(out), rg, [a, b, broadcast, self = size()](Tape& t) {
    const Tensor& g = t.nodes_[self].grad;
    t.accumulate(a, g);
    if (!broadcast) {
      t.accumulate(b, g);
    } else if (Tensor* gb = t.grad_sink(b)) {
      const std::size_t n = gb->numel();
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < n; ++c) (*gb)[c] += g[r * n + c];
    }
  });
}

Value Tape::sub(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require_same_shape(ta, tb, "sub");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= tb[i];
  bool rg = needs_grad(a) || needs_grad(b);
  return push(std::move(out), rg, [a, b, self = size()](Tape& t) {
    const Tensor& g = t.nodes_[self].grad;
    t.accumulate(a, g);
    if (Tensor* gb = t.grad_sink(b))
      for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] -= g[i];
  });
}

Value Tape::mul(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require_same_shape(ta, tb, "mul");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= tb[i];
  bool rg = needs_grad(a) || needs_grad(b);
  return push(std::move(out), rg, [a, b, self = size()](Tape& t) {
    const Tensor& g = t.nodes_[self].grad;
    if (Tensor* ga = t.grad_sink(a)) {
      const Tensor& tb2 = t.val(b);
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * tb2[i];
    }
    if (Tensor* gb = t.grad_sink(b)) {
      const Tensor& ta2 = t.val(a);
      for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * ta2[i];
    }
  });
}

Value Tape::scale(Value a, double s) {
  Tensor out = val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= s;
  return push(std::move(out), needs_grad(a), [a, s, self = size()](Tape& t) {
    const Tensor& g = t.nodes_[self].grad;
    if (Tensor* ga = t.grad_sink(a))
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * s;
  });
}

Value Tape::matmul(Value a, Value b) {
  Tensor out = miw::matmul(val(a), val(b));
  bool rg = needs_grad(a) || needs_grad(b);
  return push(std::move(out), rg, [a, b, self = size()](Tape& t) {
    const Tensor& g = t.nodes_[self].grad;
    if (Tensor* ga = t.grad_sink(a)) add_matmul_nt(*ga, g, t.val(b));
    if (Tensor* gb = t.grad_sink(b)) add_matmul_tn(*gb, t.val(a), g);
  });
}

Value Tape::transpose(Value a) {
  Tensor out = miw::transpose(val(a));
  return push(std::move(out), needs_grad(a), [a, self = size()](Tape& t) {
    if (t.grad_sink(a)) t.accumulate(a, miw::transpose(t.nodes_[self].grad));
  });
}

Value Tape::sigmoid(Value a) {
  Tensor out = val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  return push(std::move(out), needs_grad(a), [a, self = size()](Tape& t) {
    if (Tensor* ga = t.grad_sink(a)) {
      const Tensor& y = t.nodes_[self].value;
      const Tensor& g = t.nodes_[self].grad;
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * y[i] * (1.0 - y[i]);
    }
  });
}

Value Tape::tanh(Value a) {
  Tensor out = val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
  return push(std::move(out), needs_grad(a), [a, self = size()](Tape& t) {
    if (Tensor* ga = t.grad_sink(a)) {
      const Tensor& y = t.nodes_[self].value;
      const Tensor& g = t.nodes_[self].grad;
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * (1.0 - y[i] * y[i]);
    }
  });
}

Value Tape::relu(Value a) {
  Tensor out = val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::max(0.0, out[i]);
  return push(std::move(out), needs_grad(a), [a, self = size()](Tape& t) {
    if (Tensor* ga = t.grad_sink(a)) {
      const Tensor& y = t.nodes_[self].value;
      const Tensor& g = t.nodes_[self].grad;
      for (std::size_t i = 0; i < g.numel(); ++i)
        if (y[i] > 0.0) (*ga)[i] += g[i];
    }
  });
}

Value Tape::elu(Value a, double alpha) {
  Tensor out = val(a);
  for (std::size_t i = 0; i < out.numel(); ++i)
    if (out[i] < 0.0) out[i] = alpha * std::expm1(out[i]);
  return push(std::move(out), needs_grad(a), [a, alpha, self = size()](Tape& t) {
    if (Tensor* ga = t.grad_sink(a)) {
      const Tensor& y = t.nodes_[self].value;
      const Tensor& g = t.nodes_[self].grad;
      // for x < 0 the local derivative is alpha*exp(x) == y + alpha
      for (std::size_t i = 0; i < g.numel(); ++i)
        (*ga)[i] += g[i] * (y[i] > 0.0 ? 1.0 : y[i] + alpha);
    }
  });
}

Value Tape::softmax(Value a) {
  const Tensor& ta = val(a);
  if (ta.rank() > 2) throw ShapeError("softmax: rank-2 input expected");
  const std::size_t rows = ta.rows(), cols = ta.cols();
  if (cols == 0) throw ConfigError("softmax over empty axis");
  Tensor out = ta;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * cols;
    double mx = *std::max_element(row, row + cols);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sum += (row[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) row[c] /= sum;
  }
  return push(std::move(out), needs_grad(a), [a, rows, cols, self = size()](Tape& t) {
    if (Tensor* ga = t.grad_sink(a)) {
      const Tensor& y = t.nodes_[self].value;
      const Tensor& g = t.nodes_[self].grad;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* yr = y.data() + r * cols;
        const double* gr = g.data() + r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
        double* out_r = ga->data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) out_r[c] += yr[c] * (gr[c] - dot);
      }
    }
  });
}

Value Tape::concat_cols(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (ta.rows() != tb.rows()) throw ShapeError("concat_cols: row count mismatch");
  const std::size_t rows = ta.rows(), na = ta.cols(), nb = tb.cols();
  Tensor out({rows, na + nb});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(ta.data() + r * na, na, out.data() + r * (na + nb));
    std::copy_n(tb.data() + r * nb, nb, out.data() + r * (na + nb) + na);
  }
  bool rg = needs_grad(a) || needs_grad(b);
  return push(std::move(out), rg, [a, b, rows, na, nb, self = size()](Tape& t) {
    const Tensor& g = t.nodes_[self].grad;
    if (Tensor* ga = t.grad_sink(a))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < na; ++c) (*ga)[r * na + c] += g[r * (na + nb) + c];
    if (Tensor* gb = t.grad_sink(b))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < nb; ++c) (*gb)[r * nb + c] += g[r * (na + nb) + na + c];
  });
}

Value Tape::slice_cols(Value a, std::size_t c0, std::size_t c1) {
  const Tensor& ta = val(a);
  if (c0 >= c1 || c1 > ta.cols()) throw ShapeError("slice_cols: bad column range");
  const std::size_t rows = ta.rows(), n = ta.cols(), w = c1 - c0;
  Tensor out({rows, w});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(ta.data() + r * n + c0, w, out.data() + r * w);
  return push(std::move(out), needs_grad(a), [a, rows, n, c0, w, self = size()](Tape& t) {
    if (Tensor* ga = t.grad_sink(a)) {
      const Tensor& g = t.nodes_[self].grad;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c) (*ga)[r * n + c0 + c] += g[r * w + c];
    }
  });
}

Value Tape::slice_rows(Value a, std::size_t r0, std::size_t r1) {
  const Tensor& ta = val(a);
  if (r0 >= r1 || r1 > ta.rows()) throw ShapeError("slice_rows: bad row range");
  const std::size_t n = ta.cols(), h = r1 - r0;
  Tensor out({h, n});
  std::copy_n(ta.data() + r0 * n, h * n, out.data());
  return push(std::move(out), needs_grad(a), [a, r0, n, h, self = size()](Tape& t) {
    if (Tensor* ga = t.grad_sink(a)) {
      const Tensor& g = t.nodes_[self].grad;
      for (std::size_t i = 0; i < h * n; ++i) (*ga)[r0 * n + i] += g[i];
    }
  });
}

Value Tape::sum_all(Value a) {
  double s = 0.0;
  for (double v : val(a).values()) s += v;
  return push(Tensor::scalar(s), needs_grad(a), [a, self = size()](Tape& t) {
    if (Tensor* ga = t.grad_sink(a)) {
      const double g = t.nodes_[self].grad[0];
      for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += g;
    }
  });
}

Value Tape::mean_all(Value a) {
  const std::size_t n = val(a).numel();
  if (n == 0) throw DataError("mean_all: empty input");
  double s = 0.0;
  for (double v : val(a).values()) s += v;
  return push(Tensor::scalar(s / static_cast<double>(n)), needs_grad(a),
              [a, n, self = size()](Tape& t) {
                if (Tensor* ga = t.grad_sink(a)) {
                  const double g = t.nodes_[self].grad[0] / static_cast<double>(n);
                  for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += g;
                }
              });
}

Value Tape::sumsq(Value a) {
  double s = 0.0;
  for (double v : val(a).values()) s += v * v;
  return push(Tensor::scalar(s), needs_grad(a), [a, self = size()](Tape& t) {
    if (Tensor* ga = t.grad_sink(a)) {
      const double g = t.nodes_[self].grad[0];
      const Tensor& x = t.val(a);
      for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += 2.0 * x[i] * g;
    }
  });
}

Value Tape::reshape(Value a, std::vector<std::size_t> shape) {
  Tensor out = val(a).reshaped(std::move(shape));
  return push(std::move(out), needs_grad(a), [a, self = size()](Tape& t) {
    if (Tensor* ga = t.grad_sink(a)) {
      const Tensor& g = t.nodes_[self].grad;
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
    }
  });
}

Value Tape::cross_entropy(Value probs, const std::vector<int>& labels, int n_classes) {
  const Tensor& p = val(probs);
  const std::size_t n = p.rows(), k = p.cols();
  if (k != static_cast<std::size_t>(n_classes))
    throw ShapeError("cross_entropy: probability columns != class count");
  if (n != labels.size()) throw ShapeError("cross_entropy: row/label count mismatch");
  if (n == 0) throw DataError("cross_entropy: empty batch");
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || labels[r] >= n_classes)
      throw DataError("cross_entropy: label " + std::to_string(labels[r]) +
                      " outside [0," + std::to_string(n_classes) + ") at row " +
                      std::to_string(r));
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) sum += p[r * k + c];
    if (std::abs(sum - 1.0) > 1e-9)
      throw DataError("cross_entropy: row " + std::to_string(r) +
                      " is not a probability distribution");
  }
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r)
    loss -= std::log(std::max(p[r * k + labels[r]], kProbFloor));
  loss /= static_cast<double>(n);
  return push(Tensor::scalar(loss), needs_grad(probs),
              [probs, labels, n, k, self = size()](Tape& t) {
                if (Tensor* gp = t.grad_sink(probs)) {
                  const double g = t.nodes_[self].grad[0] / static_cast<double>(n);
                  const Tensor& p2 = t.val(probs);
                  for (std::size_t r = 0; r < n; ++r) {
                    const double pv = p2[r * k + labels[r]];
                    if (pv > kProbFloor) (*gp)[r * k + labels[r]] -= g / pv;
                  }
                }
              });
}

Value Tape::dropout(Value a, double rate, Mode mode, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must be in [0,1)");
  if (mode == Mode::kEval || rate == 0.0) return a;
  const Tensor& ta = val(a);
  const double keep = 1.0 - rate;
  std::vector<double> mask(ta.numel());
  Tensor out = ta;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = rng.bernoulli(rate) ? 0.0 : 1.0 / keep;
    out[i] *= mask[i];
  }
  return push(std::move(out), needs_grad(a),
              [a, mask = std::move(mask), self = size()](Tape& t) {
                if (Tensor* ga = t.grad_sink(a)) {
                  const Tensor& g = t.nodes_[self].grad;
                  for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * mask[i];
                }
              });
}

void clip_global_norm(std::span<Tensor> grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double v : g.values()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const double s = max_norm / norm;
  for (Tensor& g : grads)
    for (double& v : g.values()) v *= s;
}

}  // namespace miw
