#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "miw/tensor.hpp"

namespace miw {

inline constexpr int kNumClasses = 3;  // 0 rest, 1 right hand, 2 left hand

// Onset of a motor-imagery cue in the marker stream.
struct MarkerEvent {
  std::size_t sample_index = 0;
  int code = 0;  // 1 right hand, 2 left hand
  double time_s = 0.0;
};

// One labeled window, channels x samples.
struct Epoch {
  int label = 0;
  std::size_t n_channels = 0;
  std::size_t n_samples = 0;
  std::vector<double> window;  // row-major channels x samples
  std::string origin_id;
  std::size_t origin_start = 0;

  double at(std::size_t ch, std::size_t s) const { return window[ch * n_samples + s]; }
  double& at(std::size_t ch, std::size_t s) { return window[ch * n_samples + s]; }
};

struct EpochedDataset {
  std::vector<Epoch> epochs;
  std::vector<std::string> channel_names;
  double sample_rate_hz = 0.0;

  std::array<std::size_t, kNumClasses> class_counts() const {
    std::array<std::size_t, kNumClasses> counts{};
    for (const Epoch& e : epochs) counts[static_cast<std::size_t>(e.label)]++;
    return counts;
  }
};

// Flattened windows: row i is epoch i's window in channel-major order
// (channel 0 samples, then channel 1, ...), y[i] its label.
struct FeatureMatrix {
  std::size_t n_cols = 0;
  std::vector<double> x;  // row-major n_rows x n_cols
  std::vector<int> y;

  std::size_t n_rows() const { return y.size(); }
  const double* row(std::size_t i) const { return x.data() + i * n_cols; }

  std::array<std::size_t, kNumClasses> class_counts() const {
    std::array<std::size_t, kNumClasses> counts{};
    for (int label : y) counts[static_cast<std::size_t>(label)]++;
    return counts;
  }

  FeatureMatrix subset(std::span<const std::size_t> idx) const {
    FeatureMatrix out;
    out.n_cols = n_cols;
    out.x.reserve(idx.size() * n_cols);
    out.y.reserve(idx.size());
    for (std::size_t i : idx) {
      out.x.insert(out.x.end(), row(i), row(i) + n_cols);
      out.y.push_back(y[i]);
    }
    return out;
  }

  Tensor batch_tensor(std::span<const std::size_t> idx) const {
    Tensor t({idx.size(), n_cols});
    for (std::size_t r = 0; r < idx.size(); ++r)
      std::copy_n(row(idx[r]), n_cols, t.data() + r * n_cols);
    return t;
  }
};

// Tie-break toward the lowest class index.
inline int argmax_row(const double* p, int k) {
  int best = 0;
  for (int c = 1; c < k; ++c)
    if (p[c] > p[best]) best = c;
  return best;
}

}  // namespace miw
