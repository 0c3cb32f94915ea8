#pragma once

#include <cstddef>

#include "miw/autodiff.hpp"

namespace miw {

// Fused network building blocks on top of the Tape. The recurrent cells and
// convolutions store only their gate/normalization activations for the
// reverse pass, which keeps 200-step sequences affordable in memory.

// x[B,I], hc_prev[B,2H] = [h|c], wx[I,4H], wh[H,4H], b[4H] -> [h|c] at t.
// Gate order inside the fused weights is input, forget, candidate, output.
Value lstm_cell(Tape& t, Value x, Value hc_prev, Value wx, Value wh, Value b);

// x[B,I], h_prev[B,H], wx[I,3H] (update|reset|candidate), wh_zr[H,2H],
// wh_c[H,H], b[3H] -> h[B,H].
// h_t = (1-z) .* h_prev + z .* tanh(x wx_c + (r .* h_prev) wh_c + b_c)
Value gru_cell(Tape& t, Value x, Value h_prev, Value wx, Value wh_zr, Value wh_c,
               Value b);

// in[B,Min,H,W], k[Mout,Min,L] -> [B,Mout,H,W]; zero padded along W with
// left offset (L-1)/2 so output length matches input length.
Value conv_temporal(Tape& t, Value in, Value k);

// in[B,M,H,W], k[M,D,H] -> [B,M*D,1,W]; full-height kernels, no padding.
Value conv_depthwise_spatial(Tape& t, Value in, Value k, std::size_t depth_mult);

// in[B,M,1,W], k[M,L] -> [B,M,1,W]; per-map temporal convolution, same padding.
Value conv_depthwise_temporal(Tape& t, Value in, Value k);

// in[B,Min,1,W], k[Mout,Min] -> [B,Mout,1,W]; 1x1 map mixing.
Value conv_pointwise(Tape& t, Value in, Value k);

// in[B,M,H,W] -> [B,M,H,W/p]; trailing remainder columns are dropped.
Value avgpool_time(Tape& t, Value in, std::size_t p);

// Per-map batch normalization over (batch, H, W). Train mode normalizes with
// batch statistics and folds them into the running buffers (owned by the
// model, not the tape); eval mode uses the running buffers.
struct BatchNormConfig {
  double momentum = 0.99;
  double eps = 1e-3;
};
Value batchnorm(Tape& t, Value in, Value gamma, Value beta, Mode mode,
                Tensor& running_mean, Tensor& running_var,
                const BatchNormConfig& cfg = {});

// Row-wise layer normalization of a rank-2 tensor with learned gain/bias.
Value layernorm(Tape& t, Value in, Value gamma, Value beta, double eps = 1e-6);

// Scaled-dot-product self-attention core over pre-projected q,k,v, each
// [B*T, heads*dh] with rows grouped batch-major. When attn_out is non-null
// the softmaxed attention weights [B,heads,T,T] are copied there.
Value attn_core(Tape& t, Value q, Value k, Value v, std::size_t batch,
                std::size_t time, std::size_t heads, Tensor* attn_out = nullptr);

// x[B*T,E] + table[T,E] broadcast over the batch.
Value add_time_table(Tape& t, Value x, const Tensor& table, std::size_t batch);

// x[B*T,E] -> [B,E], mean over the T rows of each batch element.
Value mean_over_time(Tape& t, Value x, std::size_t batch, std::size_t time);

// Glorot-style uniform init in +-sqrt(6/(fan_in+fan_out)).
Tensor glorot_uniform(std::vector<std::size_t> shape, std::size_t fan_in,
                      std::size_t fan_out, Rng& rng);

}  // namespace miw
