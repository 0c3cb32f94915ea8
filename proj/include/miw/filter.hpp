#pragma once

#include <span>
#include <vector>

#include "miw/recording.hpp"

namespace miw {

// One second-order section, a0 normalized to 1.
struct Biquad {
  double b0, b1, b2, a1, a2;
};

// Butterworth high-pass designed via the bilinear transform with frequency
// prewarping, returned as a cascade of second-order sections (plus one
// first-order section enclosed in a Biquad for odd orders).
std::vector<Biquad> butterworth_highpass(int order, double cutoff_hz, double sample_rate_hz);

// Forward-backward (zero phase) application of a section cascade, with odd
// reflection padding and steady-state initial conditions at both ends.
std::vector<double> filtfilt(std::span<const Biquad> sections, std::span<const double> x);

// Zero-phase high-pass of every channel; the marker stream is untouched.
// The acquisition band-pass upper edge coincides with Nyquist at this
// sample rate, so only the high-pass edge is realizable here.
Recording highpass_filter(const Recording& rec, double cutoff_hz = 0.53, int order = 4);

}  // namespace miw
