#pragma once

// Shared helpers for the test suites: finite-difference oracles, synthetic
// recordings, and naive re-implementations used as independent references.

#include <cmath>
#include <functional>
#include <vector>

#include "miw/dataset.hpp"
#include "miw/recording.hpp"
#include "miw/rng.hpp"
#include "miw/tensor.hpp"

namespace miw::test {

// Central finite differences of a scalar function of several tensors.
// Returns one gradient tensor per input, evaluated coordinate by coordinate.
inline std::vector<Tensor> finite_difference(
    std::vector<Tensor> params,
    const std::function<double(const std::vector<Tensor>&)>& f, double h = 1e-5) {
  std::vector<Tensor> grads;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor g(params[p].shape());
    for (std::size_t i = 0; i < params[p].numel(); ++i) {
      const double saved = params[p][i];
      params[p][i] = saved + h;
      const double up = f(params);
      params[p][i] = saved - h;
      const double down = f(params);
      params[p][i] = saved;
      g[i] = (up - down) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

inline double max_rel_error(const Tensor& a, const Tensor& b, double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-scale, scale);
  return t;
}

// 19-channel synthetic recording with the given marker stream.
inline Recording synthetic_recording(std::size_t n_samples,
                                     std::vector<std::int32_t> marker,
                                     double rate = 200.0,
                                     const std::string& id = "synthetic") {
  Recording rec;
  rec.meta.id = id;
  rec.meta.n_samples = n_samples;
  rec.meta.sample_rate_hz = rate;
  for (std::size_t c = 0; c < 19; ++c)
    rec.meta.channel_names.push_back("ch" + std::to_string(c));
  rec.data.resize(n_samples * 19);
  for (std::size_t s = 0; s < n_samples; ++s)
    for (std::size_t c = 0; c < 19; ++c)
      rec.data[s * 19 + c] = 1000.0 * static_cast<double>(c) + static_cast<double>(s);
  marker.resize(n_samples, 0);
  rec.marker = std::move(marker);
  return rec;
}

}  // namespace miw::test
