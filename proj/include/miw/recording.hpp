#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "miw/errors.hpp"

namespace miw {

struct RecordingMetadata {
  std::string id;
  std::size_t n_samples = 0;
  double sample_rate_hz = 0.0;
  std::vector<std::string> channel_names;

  void validate() const;
};

// Continuous multi-channel EEG plus the synchronized integer marker stream.
// data is row-major, one row per time sample. Marker codes other than the
// motor-imagery cues are preserved verbatim; segmentation filters them.
struct Recording {
  RecordingMetadata meta;
  std::vector<double> data;          // n_samples x n_channels
  std::vector<std::int32_t> marker;  // length n_samples, 0 = no event

  std::size_t n_channels() const { return meta.channel_names.size(); }
  double at(std::size_t sample, std::size_t channel) const {
    return data[sample * n_channels() + channel];
  }
  double& at(std::size_t sample, std::size_t channel) {
    return data[sample * n_channels() + channel];
  }

  void validate() const;
};

// EEGREC v1 container. Layout: ASCII magic "EEGREC1\n", one JSON header line
// {id, n_samples, sample_rate_hz, channel_names, marker_present}, then
// little-endian float64 samples (row-major), then little-endian int32
// markers. No padding between sections.
inline constexpr char kRecordingMagic[] = "EEGREC1\n";

Recording load_recording(const std::filesystem::path& path);
void save_recording(const Recording& rec, const std::filesystem::path& path);

// Drops the named channels, preserving the order of the rest. Every name in
// exclude must exist in the recording.
Recording select_cortical_channels(const Recording& rec,
                                   std::span<const std::string> exclude);

// Acquisition-order channel list documented for converting the source
// recordings; the last three are the reference/auxiliary sites dropped
// before analysis.
extern const std::vector<std::string> kStandard22Channels;
extern const std::vector<std::string> kNonCorticalChannels;  // A1, A2, X5

}  // namespace miw
