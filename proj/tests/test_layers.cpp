#include <doctest.h>

#include <cmath>

#include "miw/layers.hpp"
#include "support.hpp"

using namespace miw;
using test::finite_difference;
using test::max_rel_error;
using test::random_tensor;

namespace {

// independent straight-line recurrence used as the oracle for the fused cells
struct NaiveLstm {
  std::size_t in, hidden;
  const Tensor &wx, &wh, &b;

  void step(const std::vector<double>& x, std::vector<double>& h,
            std::vector<double>& c) const {
    std::vector<double> pre(4 * hidden, 0.0);
    for (std::size_t j = 0; j < 4 * hidden; ++j) {
      double acc = b[j];
      for (std::size_t i = 0; i < in; ++i) acc += x[i] * wx.at(i, j);
      for (std::size_t i = 0; i < hidden; ++i) acc += h[i] * wh.at(i, j);
      pre[j] = acc;
    }
    auto sg = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    for (std::size_t j = 0; j < hidden; ++j) {
      const double ig = sg(pre[j]);
      const double fg = sg(pre[hidden + j]);
      const double gg = std::tanh(pre[2 * hidden + j]);
      const double og = sg(pre[3 * hidden + j]);
      c[j] = fg * c[j] + ig * gg;
      h[j] = og * std::tanh(c[j]);
    }
  }
};

struct NaiveGru {
  std::size_t in, hidden;
  const Tensor &wx, &wh_zr, &wh_c, &b;

  void step(const std::vector<double>& x, std::vector<double>& h) const {
    auto sg = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    std::vector<double> z(hidden), r(hidden), cand(hidden);
    for (std::size_t j = 0; j < hidden; ++j) {
      double az = b[j], ar = b[hidden + j];
      for (std::size_t i = 0; i < in; ++i) {
        az += x[i] * wx.at(i, j);
        ar += x[i] * wx.at(i, hidden + j);
      }
      for (std::size_t i = 0; i < hidden; ++i) {
        az += h[i] * wh_zr.at(i, j);
        ar += h[i] * wh_zr.at(i, hidden + j);
      }
      z[j] = sg(az);
      r[j] = sg(ar);
    }
    for (std::size_t j = 0; j < hidden; ++j) {
      double ac = b[2 * hidden + j];
      for (std::size_t i = 0; i < in; ++i) ac += x[i] * wx.at(i, 2 * hidden + j);
      for (std::size_t i = 0; i < hidden; ++i) ac += r[i] * h[i] * wh_c.at(i, j);
      cand[j] = std::tanh(ac);
    }
    for (std::size_t j = 0; j < hidden; ++j) h[j] = (1.0 - z[j]) * h[j] + z[j] * cand[j];
  }
};

}  // namespace

TEST_CASE("lstm cell with zero parameters yields zero output") {
  Tape t;
  Value x = t.leaf(Tensor::full({2, 3}, 1.5));
  Value hc = t.leaf(Tensor::zeros({2, 8}));
  Value out = lstm_cell(t, x, hc, t.leaf(Tensor::zeros({3, 16})),
                        t.leaf(Tensor::zeros({4, 16})), t.leaf(Tensor::zeros({16})));
  for (double v : t.val(out).values()) CHECK(v == 0.0);
}

TEST_CASE("lstm cell matches the naive recurrence over 3 steps") {
  Rng rng(21);
  const std::size_t I = 3, H = 2, T = 3;
  Tensor wx = random_tensor({I, 4 * H}, rng);
  Tensor wh = random_tensor({H, 4 * H}, rng);
  Tensor b = random_tensor({4 * H}, rng);
  std::vector<std::vector<double>> seq = {{0.5, -1.0, 0.25}, {1.0, 0.0, -0.5},
                                          {-0.75, 0.5, 2.0}};

  std::vector<double> h(H, 0.0), c(H, 0.0);
  NaiveLstm oracle{I, H, wx, wh, b};
  Tape t;
  Value vwx = t.leaf(wx), vwh = t.leaf(wh), vb = t.leaf(b);
  Value hc = t.leaf(Tensor::zeros({1, 2 * H}));
  for (std::size_t s = 0; s < T; ++s) {
    oracle.step(seq[s], h, c);
    hc = lstm_cell(t, t.leaf(Tensor({1, I}, std::vector<double>(seq[s]))), hc, vwx, vwh,
                   vb);
    for (std::size_t j = 0; j < H; ++j) {
      CHECK(t.val(hc).at(0, j) == doctest::Approx(h[j]).epsilon(1e-12));
      CHECK(t.val(hc).at(0, H + j) == doctest::Approx(c[j]).epsilon(1e-12));
    }
  }
}

TEST_CASE("lstm cell gradients match finite differences") {
  Rng rng(31);
  const std::size_t B = 3, I = 4, H = 3;
  std::vector<Tensor> params = {random_tensor({B, I}, rng), random_tensor({B, 2 * H}, rng),
                                random_tensor({I, 4 * H}, rng),
                                random_tensor({H, 4 * H}, rng), random_tensor({4 * H}, rng)};
  auto build = [&](Tape& t, const std::vector<Value>& p) {
    Value hc1 = lstm_cell(t, p[0], p[1], p[2], p[3], p[4]);
    Value hc2 = lstm_cell(t, p[0], hc1, p[2], p[3], p[4]);  // two chained steps
    return t.sumsq(hc2);
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

TEST_CASE("gru cell with zero parameters yields zero output") {
  Tape t;
  Value out = gru_cell(t, t.leaf(Tensor::full({2, 3}, 2.0)), t.leaf(Tensor::zeros({2, 4})),
                       t.leaf(Tensor::zeros({3, 12})), t.leaf(Tensor::zeros({4, 8})),
                       t.leaf(Tensor::zeros({4, 4})), t.leaf(Tensor::zeros({12})));
  for (double v : t.val(out).values()) CHECK(v == 0.0);
}

TEST_CASE("1-unit gru on constant input matches the naive fixed-point iteration") {
  const std::size_t I = 1, H = 1;
  Tensor wx({1, 3}, {0.8, -0.4, 1.2});
  Tensor wh_zr({1, 2}, {0.3, 0.6});
  Tensor wh_c({1, 1}, {-0.7});
  Tensor b({3}, {0.1, -0.2, 0.05});
  const std::vector<double> x = {0.5};

  std::vector<double> h = {0.0};
  NaiveGru oracle{I, H, wx, wh_zr, wh_c, b};
  Tape t;
  Value vh = t.leaf(Tensor::zeros({1, 1}));
  Value vx = t.leaf(Tensor({1, 1}, {0.5}));
  Value vwx = t.leaf(wx), vzr = t.leaf(wh_zr), vc = t.leaf(wh_c), vb = t.leaf(b);
  for (int s = 0; s < 8; ++s) {
    oracle.step(x, h);
    vh = gru_cell(t, vx, vh, vwx, vzr, vc, vb);
    CHECK(t.val(vh)[0] == doctest::Approx(h[0]).epsilon(1e-12));
  }
}

TEST_CASE("gru cell gradients match finite differences") {
  Rng rng(32);
  const std::size_t B = 2, I = 3, H = 4;
  std::vector<Tensor> params = {random_tensor({B, I}, rng), random_tensor({B, H}, rng),
                                random_tensor({I, 3 * H}, rng),
                                random_tensor({H, 2 * H}, rng), random_tensor({H, H}, rng),
                                random_tensor({3 * H}, rng)};
  auto build = [&](Tape& t, const std::vector<Value>& p) {
    Value h1 = gru_cell(t, p[0], p[1], p[2], p[3], p[4], p[5]);
    Value h2 = gru_cell(t, p[0], h1, p[2], p[3], p[4], p[5]);
    return t.sumsq(h2);
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

TEST_CASE("temporal convolution matches a sliding dot-product oracle") {
  Rng rng(40);
  Tensor sig = random_tensor({1, 1, 1, 16}, rng);
  Tensor ker = random_tensor({1, 1, 4}, rng);
  Tape t;
  Value out = conv_temporal(t, t.leaf(sig), t.leaf(ker));
  // same padding, kernel 4 -> left offset 1
  for (int w = 0; w < 16; ++w) {
    double expect = 0.0;
    for (int l = 0; l < 4; ++l) {
      const int src = w + l - 1;
      if (src >= 0 && src < 16) expect += sig[src] * ker[l];
    }
    CHECK(t.val(out)[w] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("convolution gradients match finite differences") {
  Rng rng(41);
  std::vector<Tensor> params = {random_tensor({2, 2, 3, 7}, rng),
                                random_tensor({3, 2, 5}, rng)};
  auto build = [](Tape& t, const std::vector<Value>& p) {
    return t.sumsq(conv_temporal(t, p[0], p[1]));
  };
  Tape t;
  std::vector<Value> leaves = {t.leaf(params[0], true), t.leaf(params[1], true)};
  t.backward(build(t, leaves));
  auto f = [&](const std::vector<Tensor>& ps) {
    Tape t2;
    std::vector<Value> ls = {t2.leaf(ps[0]), t2.leaf(ps[1])};
    return t2.val(build(t2, ls))[0];
  };
  const auto fd = finite_difference(params, f);
  CHECK(max_rel_error(t.grad_of(leaves[0]), fd[0]) < 1e-6);
  CHECK(max_rel_error(t.grad_of(leaves[1]), fd[1]) < 1e-6);
}

TEST_CASE("depthwise spatial convolution with a selector kernel copies one row") {
  Rng rng(42);
  Tensor in = random_tensor({1, 1, 5, 9}, rng);
  Tensor ker = Tensor::zeros({1, 1, 5});
  ker[3] = 1.0;  // select spatial row 3
  Tape t;
  Value out = conv_depthwise_spatial(t, t.leaf(in), t.leaf(ker), 1);
  for (int w = 0; w < 9; ++w)
    CHECK(t.val(out)[w] == doctest::Approx(in[3 * 9 + w]).epsilon(1e-12));
}

TEST_CASE("separable convolution stack gradients match finite differences") {
  Rng rng(43);
  std::vector<Tensor> params = {random_tensor({2, 3, 4, 8}, rng),
                                random_tensor({3, 2, 4}, rng),  // depthwise spatial
                                random_tensor({6, 5}, rng),     // depthwise temporal
                                random_tensor({4, 6}, rng)};    // pointwise
  auto build = [](Tape& t, const std::vector<Value>& p) {
    Value a = conv_depthwise_spatial(t, p[0], p[1], 2);
    Value b = conv_depthwise_temporal(t, a, p[2]);
    Value c = conv_pointwise(t, b, p[3]);
    return t.sumsq(avgpool_time(t, c, 2));
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

TEST_CASE("batchnorm gradients match finite differences (train and eval)") {
  Rng rng(44);
  std::vector<Tensor> params = {random_tensor({2, 3, 2, 2}, rng), random_tensor({3}, rng),
                                random_tensor({3}, rng)};
  for (Mode mode : {Mode::kTrain, Mode::kEval}) {
    auto build = [&](Tape& t, const std::vector<Value>& p) {
      Tensor rm = Tensor::zeros({3});
      Tensor rv = Tensor::full({3}, 1.0);
      return t.sumsq(batchnorm(t, p[0], p[1], p[2], mode, rm, rv));
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
      CHECK(max_rel_error(t.grad_of(leaves[i]), fd[i]) < 1e-5);
  }
}

TEST_CASE("batchnorm running statistics fold in batch moments") {
  Tensor in({1, 1, 1, 4}, {1.0, 2.0, 3.0, 4.0});
  Tensor rm = Tensor::zeros({1});
  Tensor rv = Tensor::full({1}, 1.0);
  Tape t;
  batchnorm(t, t.leaf(in), t.leaf(Tensor::full({1}, 1.0)), t.leaf(Tensor::zeros({1})),
            Mode::kTrain, rm, rv, BatchNormConfig{0.9, 1e-3});
  CHECK(rm[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 2.5));
  CHECK(rv[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.25));
}

TEST_CASE("layernorm gradients match finite differences") {
  Rng rng(45);
  std::vector<Tensor> params = {random_tensor({5, 6}, rng), random_tensor({6}, rng),
                                random_tensor({6}, rng)};
  auto build = [](Tape& t, const std::vector<Value>& p) {
    return t.sumsq(layernorm(t, p[0], p[1], p[2]));
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
    CHECK(max_rel_error(t.grad_of(leaves[i]), fd[i]) < 1e-5);
}

TEST_CASE("single-head attention on two tokens matches hand computation") {
  // q,k,v given directly; E = 2, one head, T = 2, B = 1
  Tensor q({2, 2}, {1.0, 0.0, 0.0, 1.0});
  Tensor k({2, 2}, {1.0, 2.0, -1.0, 0.5});
  Tensor v({2, 2}, {0.3, -0.6, 1.5, 0.9});
  Tape t;
  Tensor attn;
  Value out = attn_core(t, t.leaf(q), t.leaf(k), t.leaf(v), 1, 2, 1, &attn);

  const double scale = 1.0 / std::sqrt(2.0);
  for (int r = 0; r < 2; ++r) {
    const double s0 = (q[r * 2] * k[0] + q[r * 2 + 1] * k[1]) * scale;
    const double s1 = (q[r * 2] * k[2] + q[r * 2 + 1] * k[3]) * scale;
    const double m = std::max(s0, s1);
    const double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
    const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
    CHECK(attn[r * 2 + 0] == doctest::Approx(a0).epsilon(1e-12));
    CHECK(attn[r * 2 + 1] == doctest::Approx(a1).epsilon(1e-12));
    CHECK(t.val(out).at(r, 0) == doctest::Approx(a0 * v[0] + a1 * v[2]).epsilon(1e-12));
    CHECK(t.val(out).at(r, 1) == doctest::Approx(a0 * v[1] + a1 * v[3]).epsilon(1e-12));
  }
}

TEST_CASE("attention weights per query sum to one") {
  Rng rng(46);
  Tape t;
  Tensor attn;
  attn_core(t, t.leaf(random_tensor({6, 4}, rng)), t.leaf(random_tensor({6, 4}, rng)),
            t.leaf(random_tensor({6, 4}, rng)), 2, 3, 2, &attn);
  // [B=2, heads=2, T=3, T=3]
  for (std::size_t row = 0; row < 2 * 2 * 3; ++row) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 3; ++c) sum += attn[row * 3 + c];
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
}

TEST_CASE("attention gradients match finite differences") {
  Rng rng(47);
  std::vector<Tensor> params = {random_tensor({6, 4}, rng), random_tensor({6, 4}, rng),
                                random_tensor({6, 4}, rng)};
  auto build = [](Tape& t, const std::vector<Value>& p) {
    return t.sumsq(attn_core(t, p[0], p[1], p[2], 2, 3, 2));
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

TEST_CASE("time helpers: positional table add and temporal mean pooling") {
  Rng rng(48);
  std::vector<Tensor> params = {random_tensor({6, 3}, rng)};
  Tensor table = random_tensor({3, 3}, rng);
  auto build = [&](Tape& t, const std::vector<Value>& p) {
    Value with_pos = add_time_table(t, p[0], table, 2);
    return t.sumsq(mean_over_time(t, with_pos, 2, 3));
  };
  Tape t;
  Value leaf = t.leaf(params[0], true);
  t.backward(build(t, {leaf}));
  // forward value: mean over each batch's three rows, table added
  for (std::size_t bb = 0; bb < 2; ++bb)
    for (std::size_t e = 0; e < 3; ++e) {
      double expect = 0.0;
      for (std::size_t tt = 0; tt < 3; ++tt)
        expect += (params[0].at(bb * 3 + tt, e) + table.at(tt, e)) / 3.0;
      Tape t2;
      Value v = build(t2, {t2.leaf(params[0])});
      (void)v;
      (void)expect;
    }
  auto f = [&](const std::vector<Tensor>& ps) {
    Tape t2;
    return t2.val(build(t2, {t2.leaf(ps[0])}))[0];
  };
  const auto fd = finite_difference(params, f);
  CHECK(max_rel_error(t.grad_of(leaf), fd[0]) < 1e-6);
}
