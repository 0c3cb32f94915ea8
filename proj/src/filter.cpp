#include "miw/filter.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace miw {

std::vector<Biquad> butterworth_highpass(int order, double cutoff_hz,
                                         double sample_rate_hz) {
  if (order < 1) throw ConfigError("filter order must be >= 1");
  if (!(cutoff_hz > 0.0)) throw ConfigError("filter cutoff must be positive");
  if (cutoff_hz >= sample_rate_hz / 2.0)
    throw ConfigError("filter cutoff at or above Nyquist (" +
                      std::to_string(sample_rate_hz / 2.0) + " Hz)");

  const double K = 2.0 * sample_rate_hz;
  const double wa = K * std::tan(std::numbers::pi * cutoff_hz / sample_rate_hz);

  std::vector<Biquad> sections;
  const int n_pairs = order / 2;
  for (int k = 0; k < n_pairs; ++k) {
    // analog LP prototype pole pair: s^2 + a1p*s + 1
    const double theta = std::numbers::pi * (2.0 * k + order + 1.0) / (2.0 * order);
    const double a1p = -2.0 * std::cos(theta);
    // LP->HP (s -> wa/s) then bilinear s -> K(z-1)/(z+1)
    const double a0 = K * K + a1p * wa * K + wa * wa;
    sections.push_back(Biquad{K * K / a0, -2.0 * K * K / a0, K * K / a0,
                              2.0 * (wa * wa - K * K) / a0,
                              (K * K - a1p * wa * K + wa * wa) / a0});
  }
  if (order % 2 == 1) {
    // first-order HP section: s/(s + wa)
    const double a0 = K + wa;
    sections.push_back(Biquad{K / a0, -K / a0, 0.0, (wa - K) / a0, 0.0});
  }
  return sections;
}

namespace {

// steady-state filter state for a unit step input (scaled by x0 at use site)
struct StepState {
  double z1, z2;
};

StepState unit_step_state(const Biquad& s) {
  const double y = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
  return StepState{y - s.b0, s.b2 - s.a2 * y};
}

void run_section(const Biquad& s, std::vector<double>& x) {
  const StepState zi = unit_step_state(s);
  double z1 = zi.z1 * x[0];
  double z2 = zi.z2 * x[0];
  for (double& v : x) {
    const double y = s.b0 * v + z1;
    z1 = s.b1 * v - s.a1 * y + z2;
    z2 = s.b2 * v - s.a2 * y;
    v = y;
  }
}

}  // namespace

std::vector<double> filtfilt(std::span<const Biquad> sections, std::span<const double> x) {
  if (x.empty()) return {};
  if (x.size() < 2) return std::vector<double>(x.begin(), x.end());

  // generous reflection pad; low cutoffs decay over hundreds of samples
  constexpr std::size_t kPadPerSection = 512;
  const std::size_t n = x.size();
  const std::size_t padlen = std::min(n - 1, kPadPerSection * sections.size());

  std::vector<double> ext;
  ext.reserve(n + 2 * padlen);
  for (std::size_t i = padlen; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 2; i <= padlen + 1; ++i) ext.push_back(2.0 * x[n - 1] - x[n - i]);

  for (const Biquad& s : sections) run_section(s, ext);
  std::reverse(ext.begin(), ext.end());
  for (const Biquad& s : sections) run_section(s, ext);
  std::reverse(ext.begin(), ext.end());

  return std::vector<double>(ext.begin() + static_cast<std::ptrdiff_t>(padlen),
                             ext.begin() + static_cast<std::ptrdiff_t>(padlen + n));
}

Recording highpass_filter(const Recording& rec, double cutoff_hz, int order) {
  rec.validate();
  const auto sections = butterworth_highpass(order, cutoff_hz, rec.meta.sample_rate_hz);

  Recording out = rec;
  const std::size_t ch = rec.n_channels();
  std::vector<double> column(rec.meta.n_samples);
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t s = 0; s < rec.meta.n_samples; ++s) column[s] = rec.data[s * ch + c];
    std::vector<double> filtered = filtfilt(sections, column);
    for (std::size_t s = 0; s < rec.meta.n_samples; ++s) out.data[s * ch + c] = filtered[s];
  }
  return out;
}

}  // namespace miw
