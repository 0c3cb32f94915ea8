#include <doctest.h>

#include <cmath>

#include "miw/autodiff.hpp"
#include "miw/optim.hpp"
#include "support.hpp"

using namespace miw;
using test::finite_difference;
using test::max_rel_error;
using test::random_tensor;

TEST_CASE("matmul of ones") {
  Tape t;
  Value a = t.leaf(Tensor::full({2, 3}, 1.0));
  Value b = t.leaf(Tensor::full({3, 2}, 1.0));
  Value c = t.matmul(a, b);
  for (double v : t.val(c).values()) CHECK(v == doctest::Approx(3.0));
  CHECK(t.val(c).shape() == std::vector<std::size_t>{2, 2});
}

TEST_CASE("matmul shape mismatch throws") {
  Tape t;
  Value a = t.leaf(Tensor::zeros({2, 3}));
  Value b = t.leaf(Tensor::zeros({2, 3}));
  CHECK_THROWS_AS(t.matmul(a, b), ShapeError);
}

TEST_CASE("softmax of zeros is uniform") {
  Tape t;
  Value s = t.softmax(t.leaf(Tensor::row({0.0, 0.0, 0.0})));
  for (double v : t.val(s).values()) CHECK(v == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("softmax rows sum to one and lie in (0,1)") {
  Rng rng(7);
  Tape t;
  Value s = t.softmax(t.leaf(random_tensor({17, 5}, rng, 30.0)));
  const Tensor& y = t.val(s);
  for (std::size_t r = 0; r < 17; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      const double v = y.at(r, c);
      CHECK(v > 0.0);
      CHECK(v < 1.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("softmax over empty axis is a parameter error") {
  Tape t;
  Value a = t.leaf(Tensor({3, 0}));
  CHECK_THROWS_AS(t.softmax(a), ConfigError);
}

TEST_CASE("backward of sum is all ones") {
  Tape t;
  Value x = t.leaf(Tensor::full({3, 4}, 2.5), true);
  t.backward(t.sum_all(x));
  for (double v : t.grad_of(x).values()) CHECK(v == 1.0);
}

TEST_CASE("gradient of x^T x at [1,2,3] is [2,4,6]") {
  Tape t;
  Value x = t.leaf(Tensor::row({1.0, 2.0, 3.0}), true);
  t.backward(t.sumsq(x));
  const Tensor g = t.grad_of(x);
  CHECK(g[0] == doctest::Approx(2.0));
  CHECK(g[1] == doctest::Approx(4.0));
  CHECK(g[2] == doctest::Approx(6.0));
}

TEST_CASE("non-scalar loss is a contract error") {
  Tape t;
  Value x = t.leaf(Tensor::zeros({2, 2}), true);
  CHECK_THROWS_AS(t.backward(x), ShapeError);
}

TEST_CASE("untracked leaves receive no gradient") {
  Tape t;
  Value x = t.leaf(Tensor::row({1.0, 2.0}), true);
  Value c = t.leaf(Tensor::row({5.0, -1.0}), false);
  t.backward(t.sum_all(t.mul(x, c)));
  CHECK(t.has_grad(x));
  CHECK_FALSE(t.has_grad(c));
}

TEST_CASE("tanh gradient matches central differences at 0.5") {
  auto f = [](const std::vector<Tensor>& p) {
    Tape t;
    return t.val(t.sum_all(t.tanh(t.leaf(p[0]))))[0];
  };
  std::vector<Tensor> params = {Tensor::scalar(0.5)};
  Tape t;
  Value x = t.leaf(params[0], true);
  t.backward(t.sum_all(t.tanh(x)));
  const auto fd = finite_difference(params, f);
  CHECK(max_rel_error(t.grad_of(x), fd[0]) < 1e-6);
}

// one graph exercising every primitive, checked against finite differences
TEST_CASE("composite primitive graph matches finite differences") {
  Rng rng(42);
  std::vector<Tensor> params = {
      random_tensor({4, 3}, rng), random_tensor({3, 5}, rng), random_tensor({1, 5}, rng),
      random_tensor({4, 5}, rng), random_tensor({2, 4}, rng)};

  auto build = [](Tape& t, const std::vector<Value>& p) {
    Value h = t.add(t.matmul(p[0], p[1]), p[2]);      // [4,5] with bias broadcast
    Value s = t.sigmoid(t.slice_cols(h, 0, 2));       // [4,2]
    Value r = t.relu(t.slice_cols(h, 2, 4));          // [4,2]
    Value e = t.elu(t.slice_rows(h, 1, 3));           // [2,5]
    Value m = t.mul(s, r);                            // [4,2]
    Value cat = t.concat_cols(m, t.tanh(p[3]));       // [4,7]
    Value tr = t.transpose(t.matmul(p[4], cat));      // [7,2]
    Value soft = t.softmax(tr);
    Value parts = t.add(t.add(t.mean_all(soft), t.sumsq(e)),
                        t.scale(t.sum_all(t.reshape(m, {8})), 0.3));
    return t.sub(parts, t.mean_all(t.sub(e, e)));
  };

  Tape t;
  std::vector<Value> leaves;
  for (const Tensor& p : params) leaves.push_back(t.leaf(p, true));
  t.backward(build(t, leaves));

  auto f = [&](const std::vector<Tensor>& ps) {
    Tape t2;
    std::vector<Value> ls;
    for (const Tensor& p : ps) ls.push_back(t2.leaf(p));
    return t2.val(build(t2, ls))[0];
  };
  const auto fd = finite_difference(params, f);
  for (std::size_t i = 0; i < params.size(); ++i)
    CHECK(max_rel_error(t.grad_of(leaves[i]), fd[i]) < 1e-6);
}

TEST_CASE("cross entropy of perfect predictions is ~0") {
  Tape t;
  Tensor p({2, 3}, {1.0, 0.0, 0.0, 0.0, 0.0, 1.0});
  Value loss = t.cross_entropy(t.leaf(p), {0, 2}, 3);
  CHECK(t.val(loss)[0] >= 0.0);
  CHECK(t.val(loss)[0] <= 1e-9);
}

TEST_CASE("cross entropy of uniform predictions is ln 3") {
  Tape t;
  Tensor p = Tensor::full({5, 3}, 1.0 / 3.0);
  Value loss = t.cross_entropy(t.leaf(p), {0, 1, 2, 1, 0}, 3);
  CHECK(t.val(loss)[0] == doctest::Approx(std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy equals per-sample summation oracle") {
  Rng rng(3);
  const std::size_t n = 40;
  Tensor logits = random_tensor({n, 3}, rng, 2.0);
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.index(3)));

  Tape t;
  Value probs = t.softmax(t.leaf(logits));
  Value loss = t.cross_entropy(probs, labels, 3);

  double oracle = 0.0;
  const Tensor& p = t.val(probs);
  for (std::size_t i = 0; i < n; ++i) oracle += -std::log(p.at(i, labels[i]));
  oracle /= static_cast<double>(n);
  CHECK(std::abs(t.val(loss)[0] - oracle) <= 1e-12);
}

TEST_CASE("cross entropy rejects bad labels and non-simplex rows") {
  Tape t;
  Value ok = t.leaf(Tensor::full({1, 3}, 1.0 / 3.0));
  CHECK_THROWS_AS(t.cross_entropy(ok, {3}, 3), DataError);
  CHECK_THROWS_AS(t.cross_entropy(ok, {-1}, 3), DataError);
  Value bad = t.leaf(Tensor::full({1, 3}, 0.5));
  CHECK_THROWS_AS(t.cross_entropy(bad, {0}, 3), DataError);
}

TEST_CASE("softmax + cross entropy gradient matches finite differences") {
  Rng rng(11);
  std::vector<Tensor> params = {random_tensor({6, 3}, rng, 2.0)};
  const std::vector<int> labels = {0, 2, 1, 1, 0, 2};
  auto f = [&](const std::vector<Tensor>& ps) {
    Tape t;
    return t.val(t.cross_entropy(t.softmax(t.leaf(ps[0])), labels, 3))[0];
  };
  Tape t;
  Value x = t.leaf(params[0], true);
  t.backward(t.cross_entropy(t.softmax(x), labels, 3));
  const auto fd = finite_difference(params, f);
  CHECK(max_rel_error(t.grad_of(x), fd[0]) < 1e-6);
}

TEST_CASE("dropout") {
  Rng rng(5);
  Tape t;
  Value x = t.leaf(Tensor::full({10, 10}, 1.0));

  SUBCASE("rate zero is the identity") {
    Value y = t.dropout(x, 0.0, Mode::kTrain, rng);
    CHECK(t.val(y) == t.val(x));
  }
  SUBCASE("eval mode is the identity at any rate") {
    Value y = t.dropout(x, 0.9, Mode::kEval, rng);
    CHECK(t.val(y) == t.val(x));
  }
  SUBCASE("rate >= 1 is a parameter error") {
    CHECK_THROWS_AS(t.dropout(x, 1.0, Mode::kTrain, rng), ConfigError);
  }
  SUBCASE("train-mode mean of dropped unit values stays near 1") {
    Tape t2;
    Value big = t2.leaf(Tensor::full({100000}, 1.0));
    Value y = t2.dropout(big, 0.2, Mode::kTrain, rng);
    double mean = 0.0;
    for (double v : t2.val(y).values()) mean += v;
    mean /= 100000.0;
    CHECK(std::abs(mean - 1.0) < 0.02);
  }
  SUBCASE("same seed gives the same mask") {
    Rng r1(99), r2(99);
    Tape t1, t2;
    Value a = t1.dropout(t1.leaf(Tensor::full({64}, 1.0)), 0.5, Mode::kTrain, r1);
    Value b = t2.dropout(t2.leaf(Tensor::full({64}, 1.0)), 0.5, Mode::kTrain, r2);
    CHECK(t1.val(a) == t2.val(b));
  }
}

TEST_CASE("adam with zero gradients leaves parameters unchanged") {
  Tensor p = Tensor::row({1.0, -2.0, 3.0});
  std::vector<Tensor> params = {p};
  AdamState adam(AdamConfig{}, params);
  Tensor g = Tensor::zeros({1, 3});
  Tensor* tp = &params[0];
  adam.step({&tp, 1}, {&g, 1});
  CHECK(params[0] == p);
}

TEST_CASE("first adam step moves by about the learning rate") {
  std::vector<Tensor> params = {Tensor::scalar(0.0)};
  AdamConfig cfg;
  cfg.learning_rate = 1e-4;
  AdamState adam(cfg, params);
  Tensor g = Tensor::scalar(1.0);
  Tensor* tp = &params[0];
  adam.step({&tp, 1}, {&g, 1});
  // bias-corrected m_hat / sqrt(v_hat) == 1 on the first step
  CHECK(params[0][0] == doctest::Approx(-1e-4).epsilon(1e-6));
}

TEST_CASE("adam converges on (w-3)^2") {
  std::vector<Tensor> params = {Tensor::scalar(0.0)};
  AdamConfig cfg;
  cfg.learning_rate = 0.1;
  AdamState adam(cfg, params);
  for (int i = 0; i < 200; ++i) {
    Tensor g = Tensor::scalar(2.0 * (params[0][0] - 3.0));
    Tensor* tp = &params[0];
    adam.step({&tp, 1}, {&g, 1});
  }
  CHECK(std::abs(params[0][0] - 3.0) < 0.1);
}

TEST_CASE("adam rejects non-finite gradients") {
  std::vector<Tensor> params = {Tensor::scalar(0.0)};
  AdamState adam(AdamConfig{}, params);
  Tensor g = Tensor::scalar(std::nan(""));
  Tensor* tp = &params[0];
  CHECK_THROWS_AS(adam.step({&tp, 1}, {&g, 1}), TrainingError);
}

TEST_CASE("global norm clipping") {
  std::vector<Tensor> grads = {Tensor::row({3.0, 0.0}), Tensor::row({0.0, 4.0})};
  clip_global_norm(grads, 5.0);
  CHECK(grads[0][0] == 3.0);  // norm exactly 5, untouched
  clip_global_norm(grads, 1.0);
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double v : g.values()) sq += v * v;
  CHECK(std::sqrt(sq) == doctest::Approx(1.0));
}
