#include "miw/layers.hpp"

#include <cmath>
#include <string>

namespace miw {

namespace {

void check(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

inline double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// columns [c0, c0+w) of a rank-2 tensor
Tensor take_cols(const Tensor& m, std::size_t c0, std::size_t w) {
  const std::size_t n = m.cols();
  Tensor out({m.rows(), w});
  for (std::size_t r = 0; r < m.rows(); ++r)
    std::copy_n(m.data() + r * n + c0, w, out.data() + r * w);
  return out;
}

void add_colsum(Tensor& dst, const Tensor& m) {
  const std::size_t n = m.cols();
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) dst[c] += m[r * n + c];
}

}  // namespace

Value lstm_cell(Tape& t, Value x, Value hc_prev, Value wx, Value wh, Value b) {
  const Tensor& tx = t.val(x);
  const Tensor& thc = t.val(hc_prev);
  const Tensor& twx = t.val(wx);
  const Tensor& twh = t.val(wh);
  const Tensor& tb = t.val(b);
  const std::size_t B = tx.rows(), I = tx.cols();
  check(thc.cols() % 2 == 0, "lstm_cell: hc state width must be even");
  const std::size_t H = thc.cols() / 2;
  check(thc.rows() == B, "lstm_cell: batch mismatch");
  check(twx.rows() == I && twx.cols() == 4 * H, "lstm_cell: wx shape");
  check(twh.rows() == H && twh.cols() == 4 * H, "lstm_cell: wh shape");
  check(tb.numel() == 4 * H, "lstm_cell: bias shape");

  Tensor h_prev = take_cols(thc, 0, H);
  Tensor c_prev = take_cols(thc, H, H);

  Tensor pre = matmul(tx, twx);
  add_matmul(pre, h_prev, twh);
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t c = 0; c < 4 * H; ++c) pre[r * 4 * H + c] += tb[c];

  Tensor gi({B, H}), gf({B, H}), gg({B, H}), go({B, H}), tc({B, H});
  Tensor out({B, 2 * H});
  for (std::size_t r = 0; r < B; ++r) {
    const double* p = pre.data() + r * 4 * H;
    for (std::size_t j = 0; j < H; ++j) {
      const double i_g = sig(p[j]);
      const double f_g = sig(p[H + j]);
      const double g_g = std::tanh(p[2 * H + j]);
      const double o_g = sig(p[3 * H + j]);
      const double c_new = f_g * c_prev[r * H + j] + i_g * g_g;
      const double tc_v = std::tanh(c_new);
      gi[r * H + j] = i_g;
      gf[r * H + j] = f_g;
      gg[r * H + j] = g_g;
      go[r * H + j] = o_g;
      tc[r * H + j] = tc_v;
      out[r * 2 * H + j] = o_g * tc_v;
      out[r * 2 * H + H + j] = c_new;
    }
  }

  bool rg = t.needs_grad(x) || t.needs_grad(hc_prev) || t.needs_grad(wx) ||
            t.needs_grad(wh) || t.needs_grad(b);
  return t.custom(
      std::move(out), rg,
      [x, hc_prev, wx, wh, b, B, I, H, gi = std::move(gi), gf = std::move(gf),
       gg = std::move(gg), go = std::move(go), tc = std::move(tc),
       self = t.size()](Tape& tp) {
        const Tensor& g = tp.grad_ref(Value{static_cast<std::uint32_t>(self)});
        const Tensor& thc2 = tp.val(hc_prev);
        const Tensor& twx2 = tp.val(wx);
        const Tensor& twh2 = tp.val(wh);
        Tensor h_prev = take_cols(thc2, 0, H);
        Tensor c_prev = take_cols(thc2, H, H);

        Tensor gpre({B, 4 * H});
        Tensor gc_prev({B, H});
        for (std::size_t r = 0; r < B; ++r) {
          for (std::size_t j = 0; j < H; ++j) {
            const std::size_t k = r * H + j;
            const double gh = g[r * 2 * H + j];
            const double gc_out = g[r * 2 * H + H + j];
            const double gc = gc_out + gh * go[k] * (1.0 - tc[k] * tc[k]);
            double* p = gpre.data() + r * 4 * H;
            p[j] = gc * gg[k] * gi[k] * (1.0 - gi[k]);
            p[H + j] = gc * c_prev[k] * gf[k] * (1.0 - gf[k]);
            p[2 * H + j] = gc * gi[k] * (1.0 - gg[k] * gg[k]);
            p[3 * H + j] = gh * tc[k] * go[k] * (1.0 - go[k]);
            gc_prev[k] = gc * gf[k];
          }
        }

        if (Tensor* gx = tp.grad_sink(x)) add_matmul_nt(*gx, gpre, twx2);
        if (Tensor* ghc = tp.grad_sink(hc_prev)) {
          Tensor gh_prev = matmul_nt(gpre, twh2);
          for (std::size_t r = 0; r < B; ++r)
            for (std::size_t j = 0; j < H; ++j) {
              (*ghc)[r * 2 * H + j] += gh_prev[r * H + j];
              (*ghc)[r * 2 * H + H + j] += gc_prev[r * H + j];
            }
        }
        if (Tensor* gwx = tp.grad_sink(wx)) add_matmul_tn(*gwx, tp.val(x), gpre);
        if (Tensor* gwh = tp.grad_sink(wh)) add_matmul_tn(*gwh, h_prev, gpre);
        if (Tensor* gb = tp.grad_sink(b)) add_colsum(*gb, gpre);
      });
}

Value gru_cell(Tape& t, Value x, Value h_prev, Value wx, Value wh_zr, Value wh_c,
               Value b) {
  const Tensor& tx = t.val(x);
  const Tensor& th = t.val(h_prev);
  const Tensor& twx = t.val(wx);
  const Tensor& tzr = t.val(wh_zr);
  const Tensor& twc = t.val(wh_c);
  const Tensor& tb = t.val(b);
  const std::size_t B = tx.rows(), I = tx.cols(), H = th.cols();
  check(th.rows() == B, "gru_cell: batch mismatch");
  check(twx.rows() == I && twx.cols() == 3 * H, "gru_cell: wx shape");
  check(tzr.rows() == H && tzr.cols() == 2 * H, "gru_cell: wh_zr shape");
  check(twc.rows() == H && twc.cols() == H, "gru_cell: wh_c shape");
  check(tb.numel() == 3 * H, "gru_cell: bias shape");

  Tensor xw = matmul(tx, twx);
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t c = 0; c < 3 * H; ++c) xw[r * 3 * H + c] += tb[c];
  Tensor hzr = matmul(th, tzr);

  Tensor z({B, H}), rr({B, H});
  Tensor rh({B, H});
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t j = 0; j < H; ++j) {
      const std::size_t k = r * H + j;
      z[k] = sig(xw[r * 3 * H + j] + hzr[r * 2 * H + j]);
      rr[k] = sig(xw[r * 3 * H + H + j] + hzr[r * 2 * H + H + j]);
      rh[k] = rr[k] * th[k];
    }
  Tensor cand = matmul(rh, twc);
  Tensor out({B, H});
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t j = 0; j < H; ++j) {
      const std::size_t k = r * H + j;
      cand[k] = std::tanh(cand[k] + xw[r * 3 * H + 2 * H + j]);
      out[k] = (1.0 - z[k]) * th[k] + z[k] * cand[k];
    }

  bool rg = t.needs_grad(x) || t.needs_grad(h_prev) || t.needs_grad(wx) ||
            t.needs_grad(wh_zr) || t.needs_grad(wh_c) || t.needs_grad(b);
  return t.custom(
      std::move(out), rg,
      [x, h_prev, wx, wh_zr, wh_c, b, B, H, z = std::move(z), rr = std::move(rr),
       cand = std::move(cand), self = t.size()](Tape& tp) {
        const Tensor& g = tp.grad_ref(Value{static_cast<std::uint32_t>(self)});
        const Tensor& th2 = tp.val(h_prev);
        const Tensor& twc2 = tp.val(wh_c);

        Tensor gcand_pre({B, H});
        Tensor gh_direct({B, H});  // (1-z) path plus r-gate feedback later
        Tensor gz_pre({B, H});
        for (std::size_t k = 0; k < B * H; ++k) {
          const double gh = g[k];
          gh_direct[k] = gh * (1.0 - z[k]);
          gz_pre[k] = gh * (cand[k] - th2[k]) * z[k] * (1.0 - z[k]);
          gcand_pre[k] = gh * z[k] * (1.0 - cand[k] * cand[k]);
        }
        Tensor grh = matmul_nt(gcand_pre, twc2);
        Tensor gr_pre({B, H});
        for (std::size_t k = 0; k < B * H; ++k) {
          gr_pre[k] = grh[k] * th2[k] * rr[k] * (1.0 - rr[k]);
          gh_direct[k] += grh[k] * rr[k];
        }

        Tensor gxw({B, 3 * H});
        Tensor ghzr({B, 2 * H});
        for (std::size_t r = 0; r < B; ++r)
          for (std::size_t j = 0; j < H; ++j) {
            const std::size_t k = r * H + j;
            gxw[r * 3 * H + j] = gz_pre[k];
            gxw[r * 3 * H + H + j] = gr_pre[k];
            gxw[r * 3 * H + 2 * H + j] = gcand_pre[k];
            ghzr[r * 2 * H + j] = gz_pre[k];
            ghzr[r * 2 * H + H + j] = gr_pre[k];
          }

        if (Tensor* gx = tp.grad_sink(x)) add_matmul_nt(*gx, gxw, tp.val(wx));
        if (Tensor* ghp = tp.grad_sink(h_prev)) {
          add_matmul_nt(*ghp, ghzr, tp.val(wh_zr));
          for (std::size_t k = 0; k < B * H; ++k) (*ghp)[k] += gh_direct[k];
        }
        if (Tensor* gwx = tp.grad_sink(wx)) add_matmul_tn(*gwx, tp.val(x), gxw);
        if (Tensor* gzr = tp.grad_sink(wh_zr)) add_matmul_tn(*gzr, th2, ghzr);
        if (Tensor* gwc = tp.grad_sink(wh_c)) {
          Tensor rh2({B, H});
          for (std::size_t k = 0; k < B * H; ++k) rh2[k] = rr[k] * th2[k];
          add_matmul_tn(*gwc, rh2, gcand_pre);
        }
        if (Tensor* gb = tp.grad_sink(b)) add_colsum(*gb, gxw);
      });
}

Value conv_temporal(Tape& t, Value in, Value k) {
  const Tensor& ti = t.val(in);
  const Tensor& tk = t.val(k);
  check(ti.rank() == 4 && tk.rank() == 3, "conv_temporal: rank");
  const std::size_t B = ti.dim(0), Mi = ti.dim(1), H = ti.dim(2), W = ti.dim(3);
  const std::size_t Mo = tk.dim(0), L = tk.dim(2);
  check(tk.dim(1) == Mi, "conv_temporal: kernel input maps");
  check(L <= W, "conv_temporal: kernel longer than input window");
  const std::size_t off = (L - 1) / 2;

  Tensor out({B, Mo, H, W});
  for (std::size_t bb = 0; bb < B; ++bb)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t mo = 0; mo < Mo; ++mo) {
        double* orow = out.data() + ((bb * Mo + mo) * H + h) * W;
        for (std::size_t mi = 0; mi < Mi; ++mi) {
          const double* irow = ti.data() + ((bb * Mi + mi) * H + h) * W;
          const double* kk = tk.data() + (mo * Mi + mi) * L;
          for (std::size_t l = 0; l < L; ++l) {
            const double kv = kk[l];
            // w + l - off must land in [0, W)
            const std::size_t w0 = off > l ? off - l : 0;
            const std::size_t w1 = std::min(W, W + off - l);
            for (std::size_t w = w0; w < w1; ++w) orow[w] += kv * irow[w + l - off];
          }
        }
      }

  bool rg = t.needs_grad(in) || t.needs_grad(k);
  return t.custom(std::move(out), rg,
                  [in, k, B, Mi, H, W, Mo, L, off, self = t.size()](Tape& tp) {
                    const Tensor& g = tp.grad_ref(Value{static_cast<std::uint32_t>(self)});
                    const Tensor& ti2 = tp.val(in);
                    const Tensor& tk2 = tp.val(k);
                    Tensor* gi = tp.grad_sink(in);
                    Tensor* gk = tp.grad_sink(k);
                    for (std::size_t bb = 0; bb < B; ++bb)
                      for (std::size_t h = 0; h < H; ++h)
                        for (std::size_t mo = 0; mo < Mo; ++mo) {
                          const double* grow = g.data() + ((bb * Mo + mo) * H + h) * W;
                          for (std::size_t mi = 0; mi < Mi; ++mi) {
                            const std::size_t ioff = ((bb * Mi + mi) * H + h) * W;
                            for (std::size_t l = 0; l < L; ++l) {
                              const std::size_t w0 = off > l ? off - l : 0;
                              const std::size_t w1 = std::min(W, W + off - l);
                              if (gi) {
                                const double kv = tk2[(mo * Mi + mi) * L + l];
                                for (std::size_t w = w0; w < w1; ++w)
                                  (*gi)[ioff + w + l - off] += kv * grow[w];
                              }
                              if (gk) {
                                double acc = 0.0;
                                const double* irow = ti2.data() + ioff;
                                for (std::size_t w = w0; w < w1; ++w)
                                  acc += irow[w + l - off] * grow[w];
                                (*gk)[(mo * Mi + mi) * L + l] += acc;
                              }
                            }
                          }
                        }
                  });
}

Value conv_depthwise_spatial(Tape& t, Value in, Value k, std::size_t depth_mult) {
  const Tensor& ti = t.val(in);
  const Tensor& tk = t.val(k);
  check(ti.rank() == 4 && tk.rank() == 3, "conv_depthwise_spatial: rank");
  const std::size_t B = ti.dim(0), M = ti.dim(1), H = ti.dim(2), W = ti.dim(3);
  check(tk.dim(0) == M && tk.dim(1) == depth_mult && tk.dim(2) == H,
        "conv_depthwise_spatial: kernel shape");
  const std::size_t Mo = M * depth_mult;

  Tensor out({B, Mo, 1, W});
  for (std::size_t bb = 0; bb < B; ++bb)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t d = 0; d < depth_mult; ++d) {
        double* orow = out.data() + (bb * Mo + m * depth_mult + d) * W;
        const double* kk = tk.data() + (m * depth_mult + d) * H;
        for (std::size_t h = 0; h < H; ++h) {
          const double* irow = ti.data() + ((bb * M + m) * H + h) * W;
          const double kv = kk[h];
          for (std::size_t w = 0; w < W; ++w) orow[w] += kv * irow[w];
        }
      }

  bool rg = t.needs_grad(in) || t.needs_grad(k);
  return t.custom(std::move(out), rg,
                  [in, k, B, M, H, W, depth_mult, Mo, self = t.size()](Tape& tp) {
                    const Tensor& g = tp.grad_ref(Value{static_cast<std::uint32_t>(self)});
                    const Tensor& ti2 = tp.val(in);
                    const Tensor& tk2 = tp.val(k);
                    Tensor* gi = tp.grad_sink(in);
                    Tensor* gk = tp.grad_sink(k);
                    for (std::size_t bb = 0; bb < B; ++bb)
                      for (std::size_t m = 0; m < M; ++m)
                        for (std::size_t d = 0; d < depth_mult; ++d) {
                          const double* grow = g.data() + (bb * Mo + m * depth_mult + d) * W;
                          for (std::size_t h = 0; h < H; ++h) {
                            const std::size_t ioff = ((bb * M + m) * H + h) * W;
                            if (gi) {
                              const double kv = tk2[(m * depth_mult + d) * H + h];
                              for (std::size_t w = 0; w < W; ++w)
                                (*gi)[ioff + w] += kv * grow[w];
                            }
                            if (gk) {
                              double acc = 0.0;
                              for (std::size_t w = 0; w < W; ++w)
                                acc += ti2[ioff + w] * grow[w];
                              (*gk)[(m * depth_mult + d) * H + h] += acc;
                            }
                          }
                        }
                  });
}

Value conv_depthwise_temporal(Tape& t, Value in, Value k) {
  const Tensor& ti = t.val(in);
  const Tensor& tk = t.val(k);
  check(ti.rank() == 4 && ti.dim(2) == 1 && tk.rank() == 2,
        "conv_depthwise_temporal: rank");
  const std::size_t B = ti.dim(0), M = ti.dim(1), W = ti.dim(3), L = tk.dim(1);
  check(tk.dim(0) == M, "conv_depthwise_temporal: kernel maps");
  check(L <= W, "conv_depthwise_temporal: kernel longer than input window");
  const std::size_t off = (L - 1) / 2;

  Tensor out({B, M, 1, W});
  for (std::size_t bb = 0; bb < B; ++bb)
    for (std::size_t m = 0; m < M; ++m) {
      double* orow = out.data() + (bb * M + m) * W;
      const double* irow = ti.data() + (bb * M + m) * W;
      const double* kk = tk.data() + m * L;
      for (std::size_t l = 0; l < L; ++l) {
        const double kv = kk[l];
        const std::size_t w0 = off > l ? off - l : 0;
        const std::size_t w1 = std::min(W, W + off - l);
        for (std::size_t w = w0; w < w1; ++w) orow[w] += kv * irow[w + l - off];
      }
    }

  bool rg = t.needs_grad(in) || t.needs_grad(k);
  return t.custom(std::move(out), rg,
                  [in, k, B, M, W, L, off, self = t.size()](Tape& tp) {
                    const Tensor& g = tp.grad_ref(Value{static_cast<std::uint32_t>(self)});
                    const Tensor& ti2 = tp.val(in);
                    const Tensor& tk2 = tp.val(k);
                    Tensor* gi = tp.grad_sink(in);
                    Tensor* gk = tp.grad_sink(k);
                    for (std::size_t bb = 0; bb < B; ++bb)
                      for (std::size_t m = 0; m < M; ++m) {
                        const double* grow = g.data() + (bb * M + m) * W;
                        const std::size_t ioff = (bb * M + m) * W;
                        for (std::size_t l = 0; l < L; ++l) {
                          const std::size_t w0 = off > l ? off - l : 0;
                          const std::size_t w1 = std::min(W, W + off - l);
                          if (gi) {
                            const double kv = tk2[m * L + l];
                            for (std::size_t w = w0; w < w1; ++w)
                              (*gi)[ioff + w + l - off] += kv * grow[w];
                          }
                          if (gk) {
                            double acc = 0.0;
                            for (std::size_t w = w0; w < w1; ++w)
                              acc += ti2[ioff + w + l - off] * grow[w];
                            (*gk)[m * L + l] += acc;
                          }
                        }
                      }
                  });
}

Value conv_pointwise(Tape& t, Value in, Value k) {
  const Tensor& ti = t.val(in);
  const Tensor& tk = t.val(k);
  check(ti.rank() == 4 && ti.dim(2) == 1 && tk.rank() == 2, "conv_pointwise: rank");
  const std::size_t B = ti.dim(0), Mi = ti.dim(1), W = ti.dim(3);
  const std::size_t Mo = tk.dim(0);
  check(tk.dim(1) == Mi, "conv_pointwise: kernel input maps");

  Tensor out({B, Mo, 1, W});
  for (std::size_t bb = 0; bb < B; ++bb)
    for (std::size_t mo = 0; mo < Mo; ++mo) {
      double* orow = out.data() + (bb * Mo + mo) * W;
      for (std::size_t mi = 0; mi < Mi; ++mi) {
        const double kv = tk[mo * Mi + mi];
        const double* irow = ti.data() + (bb * Mi + mi) * W;
        for (std::size_t w = 0; w < W; ++w) orow[w] += kv * irow[w];
      }
    }

  bool rg = t.needs_grad(in) || t.needs_grad(k);
  return t.custom(std::move(out), rg,
                  [in, k, B, Mi, W, Mo, self = t.size()](Tape& tp) {
                    const Tensor& g = tp.grad_ref(Value{static_cast<std::uint32_t>(self)});
                    const Tensor& ti2 = tp.val(in);
                    const Tensor& tk2 = tp.val(k);
                    Tensor* gi = tp.grad_sink(in);
                    Tensor* gk = tp.grad_sink(k);
                    for (std::size_t bb = 0; bb < B; ++bb)
                      for (std::size_t mo = 0; mo < Mo; ++mo) {
                        const double* grow = g.data() + (bb * Mo + mo) * W;
                        for (std::size_t mi = 0; mi < Mi; ++mi) {
                          const std::size_t ioff = (bb * Mi + mi) * W;
                          if (gi) {
                            const double kv = tk2[mo * Mi + mi];
                            for (std::size_t w = 0; w < W; ++w)
                              (*gi)[ioff + w] += kv * grow[w];
                          }
                          if (gk) {
                            double acc = 0.0;
                            for (std::size_t w = 0; w < W; ++w)
                              acc += ti2[ioff + w] * grow[w];
                            (*gk)[mo * Mi + mi] += acc;
                          }
                        }
                      }
                  });
}

Value avgpool_time(Tape& t, Value in, std::size_t p) {
  const Tensor& ti = t.val(in);
  check(ti.rank() == 4, "avgpool_time: rank");
  check(p >= 1, "avgpool_time: pool size");
  const std::size_t B = ti.dim(0), M = ti.dim(1), H = ti.dim(2), W = ti.dim(3);
  const std::size_t Wo = W / p;
  check(Wo >= 1, "avgpool_time: pool longer than window");

  Tensor out({B, M, H, Wo});
  const std::size_t planes = B * M * H;
  for (std::size_t q = 0; q < planes; ++q) {
    const double* irow = ti.data() + q * W;
    double* orow = out.data() + q * Wo;
    for (std::size_t wo = 0; wo < Wo; ++wo) {
      double acc = 0.0;
      for (std::size_t j = 0; j < p; ++j) acc += irow[wo * p + j];
      orow[wo] = acc / static_cast<double>(p);
    }
  }

  return t.custom(std::move(out), t.needs_grad(in),
                  [in, planes, W, Wo, p, self = t.size()](Tape& tp) {
                    if (Tensor* gi = tp.grad_sink(in)) {
                      const Tensor& g = tp.grad_ref(Value{static_cast<std::uint32_t>(self)});
                      for (std::size_t q = 0; q < planes; ++q)
                        for (std::size_t wo = 0; wo < Wo; ++wo) {
                          const double gv = g[q * Wo + wo] / static_cast<double>(p);
                          for (std::size_t j = 0; j < p; ++j)
                            (*gi)[q * W + wo * p + j] += gv;
                        }
                    }
                  });
}

Value batchnorm(Tape& t, Value in, Value gamma, Value beta, Mode mode,
                Tensor& running_mean, Tensor& running_var,
                const BatchNormConfig& cfg) {
  const Tensor& ti = t.val(in);
  check(ti.rank() == 4, "batchnorm: rank-4 input expected");
  const std::size_t B = ti.dim(0), M = ti.dim(1), H = ti.dim(2), W = ti.dim(3);
  const Tensor& tg = t.val(gamma);
  const Tensor& tb = t.val(beta);
  check(tg.numel() == M && tb.numel() == M, "batchnorm: gamma/beta length");
  check(running_mean.numel() == M && running_var.numel() == M,
        "batchnorm: running stats length");
  const std::size_t N = B * H * W;
  const bool batch_stats = mode == Mode::kTrain;

  Tensor mean({M}), inv({M});
  if (batch_stats) {
    for (std::size_t m = 0; m < M; ++m) {
      double s = 0.0;
      for (std::size_t bb = 0; bb < B; ++bb) {
        const double* plane = ti.data() + (bb * M + m) * H * W;
        for (std::size_t i = 0; i < H * W; ++i) s += plane[i];
      }
      const double mu = s / static_cast<double>(N);
      double var = 0.0;
      for (std::size_t bb = 0; bb < B; ++bb) {
        const double* plane = ti.data() + (bb * M + m) * H * W;
        for (std::size_t i = 0; i < H * W; ++i) {
          const double d = plane[i] - mu;
          var += d * d;
        }
      }
      var /= static_cast<double>(N);
      mean[m] = mu;
      inv[m] = 1.0 / std::sqrt(var + cfg.eps);
      running_mean[m] = cfg.momentum * running_mean[m] + (1.0 - cfg.momentum) * mu;
      running_var[m] = cfg.momentum * running_var[m] + (1.0 - cfg.momentum) * var;
    }
  } else {
    for (std::size_t m = 0; m < M; ++m) {
      mean[m] = running_mean[m];
      inv[m] = 1.0 / std::sqrt(running_var[m] + cfg.eps);
    }
  }

  Tensor xhat({B, M, H, W});
  Tensor out({B, M, H, W});
  for (std::size_t bb = 0; bb < B; ++bb)
    for (std::size_t m = 0; m < M; ++m) {
      const std::size_t o = (bb * M + m) * H * W;
      for (std::size_t i = 0; i < H * W; ++i) {
        const double xh = (ti[o + i] - mean[m]) * inv[m];
        xhat[o + i] = xh;
        out[o + i] = tg[m] * xh + tb[m];
      }
    }

  bool rg = t.needs_grad(in) || t.needs_grad(gamma) || t.needs_grad(beta);
  return t.custom(
      std::move(out), rg,
      [in, gamma, beta, B, M, H, W, N, batch_stats, xhat = std::move(xhat),
       inv = std::move(inv), self = t.size()](Tape& tp) {
        const Tensor& g = tp.grad_ref(Value{static_cast<std::uint32_t>(self)});
        const Tensor& tg2 = tp.val(gamma);
        Tensor* gi = tp.grad_sink(in);
        Tensor* gg = tp.grad_sink(gamma);
        Tensor* gb = tp.grad_sink(beta);
        for (std::size_t m = 0; m < M; ++m) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t bb = 0; bb < B; ++bb) {
            const std::size_t o = (bb * M + m) * H * W;
            for (std::size_t i = 0; i < H * W; ++i) {
              sum_g += g[o + i];
              sum_gx += g[o + i] * xhat[o + i];
            }
          }
          if (gg) (*gg)[m] += sum_gx;
          if (gb) (*gb)[m] += sum_g;
          if (gi) {
            const double gscale = tg2[m] * inv[m];
            const double mg = sum_g / static_cast<double>(N);
            const double mgx = sum_gx / static_cast<double>(N);
            for (std::size_t bb = 0; bb < B; ++bb) {
              const std::size_t o = (bb * M + m) * H * W;
              for (std::size_t i = 0; i < H * W; ++i) {
                // eval mode treats the normalization stats as constants
                const double centered =
                    batch_stats ? g[o + i] - mg - xhat[o + i] * mgx : g[o + i];
                (*gi)[o + i] += gscale * centered;
              }
            }
          }
        }
      });
}

Value layernorm(Tape& t, Value in, Value gamma, Value beta, double eps) {
  const Tensor& ti = t.val(in);
  check(ti.rank() == 2, "layernorm: rank-2 input expected");
  const std::size_t R = ti.rows(), C = ti.cols();
  const Tensor& tg = t.val(gamma);
  const Tensor& tb = t.val(beta);
  check(tg.numel() == C && tb.numel() == C, "layernorm: gamma/beta length");

  Tensor xhat({R, C});
  Tensor inv({R});
  Tensor out({R, C});
  for (std::size_t r = 0; r < R; ++r) {
    const double* row = ti.data() + r * C;
    double mu = 0.0;
    for (std::size_t c = 0; c < C; ++c) mu += row[c];
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double d = row[c] - mu;
      var += d * d;
    }
    var /= static_cast<double>(C);
    const double iv = 1.0 / std::sqrt(var + eps);
    inv[r] = iv;
    for (std::size_t c = 0; c < C; ++c) {
      const double xh = (row[c] - mu) * iv;
      xhat[r * C + c] = xh;
      out[r * C + c] = tg[c] * xh + tb[c];
    }
  }

  bool rg = t.needs_grad(in) || t.needs_grad(gamma) || t.needs_grad(beta);
  return t.custom(
      std::move(out), rg,
      [in, gamma, beta, R, C, xhat = std::move(xhat), inv = std::move(inv),
       self = t.size()](Tape& tp) {
        const Tensor& g = tp.grad_ref(Value{static_cast<std::uint32_t>(self)});
        const Tensor& tg2 = tp.val(gamma);
        Tensor* gi = tp.grad_sink(in);
        Tensor* gg = tp.grad_sink(gamma);
        Tensor* gb = tp.grad_sink(beta);
        for (std::size_t r = 0; r < R; ++r) {
          const double* grow = g.data() + r * C;
          const double* xrow = xhat.data() + r * C;
          double mdg = 0.0, mdgx = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            const double dxh = grow[c] * tg2[c];
            mdg += dxh;
            mdgx += dxh * xrow[c];
            if (gg) (*gg)[c] += grow[c] * xrow[c];
            if (gb) (*gb)[c] += grow[c];
          }
          if (gi) {
            mdg /= static_cast<double>(C);
            mdgx /= static_cast<double>(C);
            for (std::size_t c = 0; c < C; ++c)
              (*gi)[r * C + c] +=
                  inv[r] * (grow[c] * tg2[c] - mdg - xrow[c] * mdgx);
          }
        }
      });
}

namespace {

// gather [T,dh] block for (batch bb, head hh) from a [B*T, E] matrix
Tensor gather_head(const Tensor& m, std::size_t bb, std::size_t hh, std::size_t T,
                   std::size_t E, std::size_t dh) {
  Tensor out({T, dh});
  for (std::size_t tt = 0; tt < T; ++tt)
    std::copy_n(m.data() + (bb * T + tt) * E + hh * dh, dh, out.data() + tt * dh);
  return out;
}

void scatter_head(Tensor& dst, const Tensor& block, std::size_t bb, std::size_t hh,
                  std::size_t T, std::size_t E, std::size_t dh) {
  for (std::size_t tt = 0; tt < T; ++tt)
    for (std::size_t j = 0; j < dh; ++j)
      dst[(bb * T + tt) * E + hh * dh + j] += block[tt * dh + j];
}

}  // namespace

Value attn_core(Tape& t, Value q, Value k, Value v, std::size_t batch,
                std::size_t time, std::size_t heads, Tensor* attn_out) {
  const Tensor& tq = t.val(q);
  const std::size_t E = tq.cols();
  check(tq.rows() == batch * time, "attn_core: q rows != batch*time");
  check(t.val(k).same_shape(tq) && t.val(v).same_shape(tq), "attn_core: q/k/v shapes");
  if (heads == 0 || E % heads != 0)
    throw ConfigError("attn_core: head count must divide embedding dim");
  const std::size_t dh = E / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor attn({batch, heads, time, time});
  Tensor out({batch * time, E});
  for (std::size_t bb = 0; bb < batch; ++bb)
    for (std::size_t hh = 0; hh < heads; ++hh) {
      Tensor Q = gather_head(tq, bb, hh, time, E, dh);
      Tensor K = gather_head(t.val(k), bb, hh, time, E, dh);
      Tensor V = gather_head(t.val(v), bb, hh, time, E, dh);
      Tensor S = matmul_nt(Q, K);
      double* a = attn.data() + (bb * heads + hh) * time * time;
      for (std::size_t r = 0; r < time; ++r) {
        double* row = S.data() + r * time;
        double mx = row[0] * scale;
        for (std::size_t c = 0; c < time; ++c) mx = std::max(mx, row[c] * scale);
        double sum = 0.0;
        for (std::size_t c = 0; c < time; ++c)
          sum += (row[c] = std::exp(row[c] * scale - mx));
        for (std::size_t c = 0; c < time; ++c) a[r * time + c] = row[c] / sum;
      }
      Tensor A({time, time},
               std::vector<double>(a, a + time * time));
      Tensor O = matmul(A, V);
      scatter_head(out, O, bb, hh, time, E, dh);
    }
  if (attn_out) *attn_out = attn;

  bool rg = t.needs_grad(q) || t.needs_grad(k) || t.needs_grad(v);
  return t.custom(
      std::move(out), rg,
      [q, k, v, batch, time, heads, E, dh, scale, attn = std::move(attn),
       self = t.size()](Tape& tp) {
        const Tensor& g = tp.grad_ref(Value{static_cast<std::uint32_t>(self)});
        Tensor* gq = tp.grad_sink(q);
        Tensor* gk = tp.grad_sink(k);
        Tensor* gv = tp.grad_sink(v);
        for (std::size_t bb = 0; bb < batch; ++bb)
          for (std::size_t hh = 0; hh < heads; ++hh) {
            Tensor Q = gather_head(tp.val(q), bb, hh, time, E, dh);
            Tensor K = gather_head(tp.val(k), bb, hh, time, E, dh);
            Tensor V = gather_head(tp.val(v), bb, hh, time, E, dh);
            Tensor GO = gather_head(g, bb, hh, time, E, dh);
            const double* a = attn.data() + (bb * heads + hh) * time * time;
            Tensor A({time, time}, std::vector<double>(a, a + time * time));
            if (gv) {
              Tensor dV = matmul_tn(A, GO);
              scatter_head(*gv, dV, bb, hh, time, E, dh);
            }
            if (gq || gk) {
              Tensor dA = matmul_nt(GO, V);
              Tensor dS({time, time});
              for (std::size_t r = 0; r < time; ++r) {
                double dot = 0.0;
                for (std::size_t c = 0; c < time; ++c)
                  dot += dA[r * time + c] * A[r * time + c];
                for (std::size_t c = 0; c < time; ++c)
                  dS[r * time + c] =
                      A[r * time + c] * (dA[r * time + c] - dot) * scale;
              }
              if (gq) {
                Tensor dQ = matmul(dS, K);
                scatter_head(*gq, dQ, bb, hh, time, E, dh);
              }
              if (gk) {
                Tensor dK = matmul_tn(dS, Q);
                scatter_head(*gk, dK, bb, hh, time, E, dh);
              }
            }
          }
      });
}

Value add_time_table(Tape& t, Value x, const Tensor& table, std::size_t batch) {
  const Tensor& tx = t.val(x);
  const std::size_t T = table.rows(), E = table.cols();
  check(tx.rows() == batch * T && tx.cols() == E, "add_time_table: shape");
  Tensor out = tx;
  for (std::size_t bb = 0; bb < batch; ++bb)
    for (std::size_t tt = 0; tt < T; ++tt)
      for (std::size_t e = 0; e < E; ++e)
        out[(bb * T + tt) * E + e] += table[tt * E + e];
  return t.custom(std::move(out), t.needs_grad(x), [x, self = t.size()](Tape& tp) {
    if (tp.grad_sink(x))
      tp.accumulate(x, tp.grad_ref(Value{static_cast<std::uint32_t>(self)}));
  });
}

Value mean_over_time(Tape& t, Value x, std::size_t batch, std::size_t time) {
  const Tensor& tx = t.val(x);
  check(tx.rows() == batch * time, "mean_over_time: rows != batch*time");
  const std::size_t E = tx.cols();
  Tensor out({batch, E});
  for (std::size_t bb = 0; bb < batch; ++bb)
    for (std::size_t tt = 0; tt < time; ++tt)
      for (std::size_t e = 0; e < E; ++e)
        out[bb * E + e] += tx[(bb * time + tt) * E + e] / static_cast<double>(time);
  return t.custom(std::move(out), t.needs_grad(x),
                  [x, batch, time, E, self = t.size()](Tape& tp) {
                    if (Tensor* gx = tp.grad_sink(x)) {
                      const Tensor& g = tp.grad_ref(Value{static_cast<std::uint32_t>(self)});
                      for (std::size_t bb = 0; bb < batch; ++bb)
                        for (std::size_t tt = 0; tt < time; ++tt)
                          for (std::size_t e = 0; e < E; ++e)
                            (*gx)[(bb * time + tt) * E + e] +=
                                g[bb * E + e] / static_cast<double>(time);
                    }
                  });
}

Tensor glorot_uniform(std::vector<std::size_t> shape, std::size_t fan_in,
                      std::size_t fan_out, Rng& rng) {
  Tensor t(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.values()) v = rng.uniform(-limit, limit);
  return t;
}

}  // namespace miw
