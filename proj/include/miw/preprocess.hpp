#pragma once

#include <cstdint>
#include <filesystem>
#include <span>

#include "miw/dataset.hpp"
#include "miw/recording.hpp"

namespace miw {

inline constexpr std::size_t kEpochChannels = 19;
inline constexpr std::size_t kEpochSamples = 200;

// One event per 0 -> {1,2} marker transition (a cue run starting at sample 0
// also counts). Runs not preceded by 0 and codes outside {1,2} are ignored.
std::vector<MarkerEvent> detect_onsets(std::span<const std::int32_t> marker,
                                       double sample_rate_hz);
std::vector<MarkerEvent> detect_onsets(const Recording& rec);

// Cuts [onset, onset + window_len) across all 19 channels; label = cue code.
Epoch extract_epoch(const Recording& rec, const MarkerEvent& onset,
                    std::size_t window_len = kEpochSamples);

struct RestSampleResult {
  std::vector<Epoch> epochs;
  bool shortfall = false;  // fewer eligible windows than requested
};

// Label-0 windows drawn from marker-silent stretches at least guard_s away
// from every cue onset. Non-overlapping, seeded, returned in ascending start
// order; returns fewer than count (with shortfall set) rather than relaxing
// the constraints.
RestSampleResult sample_rest_epochs(const Recording& rec,
                                    std::span<const MarkerEvent> events,
                                    std::size_t count, double guard_s,
                                    std::uint64_t seed,
                                    std::size_t window_len = kEpochSamples);

// Elementwise mean of one channel row across epochs.
std::vector<double> erp_average(std::span<const Epoch> epochs, std::size_t channel);

// Row i = channel-major flattening of epoch i. Requires uniform shapes.
FeatureMatrix flatten(const EpochedDataset& ds);
EpochedDataset unflatten(const FeatureMatrix& fm, std::size_t n_channels,
                         std::size_t n_samples);

struct SplitResult {
  FeatureMatrix train;
  FeatureMatrix test;
};

// Test side gets ceil(N * test_fraction) rows; stratified mode apportions
// that total across classes by largest remainder of the per-class quotas.
// Row order within each side follows the input. Deterministic per seed.
SplitResult split_train_test(const FeatureMatrix& fm, double test_fraction,
                             std::uint64_t seed, bool stratified);

// CSV with columns c<ch>_t<sample>... then "label"; one row per epoch.
void save_feature_csv(const FeatureMatrix& fm, const std::filesystem::path& path,
                      std::size_t n_channels, std::size_t n_samples);
FeatureMatrix load_feature_csv(const std::filesystem::path& path);

// MIWEPC v1 binary cache: magic "MIWEPC1\n", JSON header line, packed
// float64 windows, then int32 labels (layout mirrors EEGREC v1).
inline constexpr char kEpochCacheMagic[] = "MIWEPC1\n";
void save_epoch_cache(const EpochedDataset& ds, const std::filesystem::path& path);
EpochedDataset load_epoch_cache(const std::filesystem::path& path);

}  // namespace miw
