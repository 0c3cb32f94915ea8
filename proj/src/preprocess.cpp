#include "miw/preprocess.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "miw/rng.hpp"
#include "miw/textio.hpp"

namespace miw {

std::vector<MarkerEvent> detect_onsets(std::span<const std::int32_t> marker,
                                       double sample_rate_hz) {
  std::vector<MarkerEvent> events;
  for (std::size_t i = 0; i < marker.size(); ++i) {
    const std::int32_t code = marker[i];
    if ((code == 1 || code == 2) && (i == 0 || marker[i - 1] == 0))
      events.push_back(MarkerEvent{i, static_cast<int>(code),
                                   static_cast<double>(i) / sample_rate_hz});
  }
  return events;
}

std::vector<MarkerEvent> detect_onsets(const Recording& rec) {
  return detect_onsets(rec.marker, rec.meta.sample_rate_hz);
}

Epoch extract_epoch(const Recording& rec, const MarkerEvent& onset,
                    std::size_t window_len) {
  if (rec.n_channels() != kEpochChannels)
    throw ShapeError("extract_epoch: expected " + std::to_string(kEpochChannels) +
                     " channels, recording has " + std::to_string(rec.n_channels()));
  if (onset.sample_index + window_len > rec.meta.n_samples)
    throw BoundsError("extract_epoch: window [" + std::to_string(onset.sample_index) +
                      ", " + std::to_string(onset.sample_index + window_len) +
                      ") overruns recording end");
  Epoch e;
  e.label = onset.code;
  e.n_channels = rec.n_channels();
  e.n_samples = window_len;
  e.window.resize(e.n_channels * window_len);
  for (std::size_t c = 0; c < e.n_channels; ++c)
    for (std::size_t k = 0; k < window_len; ++k)
      e.window[c * window_len + k] = rec.at(onset.sample_index + k, c);
  e.origin_id = rec.meta.id;
  e.origin_start = onset.sample_index;
  return e;
}

RestSampleResult sample_rest_epochs(const Recording& rec,
                                    std::span<const MarkerEvent> events,
                                    std::size_t count, double guard_s,
                                    std::uint64_t seed, std::size_t window_len) {
  if (guard_s < 0.0) throw ConfigError("sample_rest_epochs: guard must be >= 0");
  RestSampleResult result;
  if (count == 0) return result;
  if (rec.meta.n_samples < window_len) {
    result.shortfall = true;
    return result;
  }

  const std::size_t n = rec.meta.n_samples;
  const std::size_t last_start = n - window_len;
  const auto guard = static_cast<std::size_t>(
      std::llround(guard_s * rec.meta.sample_rate_hz));

  // prefix counts of nonzero markers for O(1) window silence checks
  std::vector<std::size_t> nz(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) nz[i + 1] = nz[i] + (rec.marker[i] != 0 ? 1 : 0);

  // window [s, s+L) is blocked when it intersects [onset-guard, onset+guard)
  std::vector<char> blocked(last_start + 1, 0);
  if (guard > 0) {
    for (const MarkerEvent& ev : events) {
      const std::size_t from = ev.sample_index + 1 >= guard + window_len
                                   ? ev.sample_index + 1 - guard - window_len
                                   : 0;
      const std::size_t to = std::min(last_start, ev.sample_index + guard - 1);
      for (std::size_t s = from; s <= to; ++s) blocked[s] = 1;
    }
  }

  std::vector<std::size_t> candidates;
  for (std::size_t s = 0; s <= last_start; ++s)
    if (!blocked[s] && nz[s + window_len] == nz[s]) candidates.push_back(s);

  Rng rng(seed);
  rng.shuffle(candidates.begin(), candidates.end());

  std::set<std::size_t> accepted;
  for (std::size_t s : candidates) {
    if (accepted.size() >= count) break;
    auto next = accepted.lower_bound(s);
    if (next != accepted.end() && *next < s + window_len) continue;
    if (next != accepted.begin() && s < *std::prev(next) + window_len) continue;
    accepted.insert(s);
  }
  result.shortfall = accepted.size() < count;

  for (std::size_t s : accepted) {
    MarkerEvent fake{s, 0, static_cast<double>(s) / rec.meta.sample_rate_hz};
    Epoch e = extract_epoch(rec, fake, window_len);
    e.label = 0;
    result.epochs.push_back(std::move(e));
  }
  return result;
}

std::vector<double> erp_average(std::span<const Epoch> epochs, std::size_t channel) {
  if (epochs.empty()) throw DataError("erp_average: no epochs");
  const std::size_t ch = epochs.front().n_channels;
  const std::size_t len = epochs.front().n_samples;
  if (channel >= ch)
    throw BoundsError("erp_average: channel " + std::to_string(channel) +
                      " out of range (have " + std::to_string(ch) + ")");
  std::vector<double> mean(len, 0.0);
  for (const Epoch& e : epochs) {
    if (e.n_channels != ch || e.n_samples != len)
      throw ShapeError("erp_average: epochs have mixed shapes");
    for (std::size_t k = 0; k < len; ++k) mean[k] += e.window[channel * len + k];
  }
  for (double& v : mean) v /= static_cast<double>(epochs.size());
  return mean;
}

FeatureMatrix flatten(const EpochedDataset& ds) {
  FeatureMatrix fm;
  if (ds.epochs.empty()) return fm;
  const std::size_t ch = ds.epochs.front().n_channels;
  const std::size_t len = ds.epochs.front().n_samples;
  fm.n_cols = ch * len;
  fm.x.reserve(ds.epochs.size() * fm.n_cols);
  fm.y.reserve(ds.epochs.size());
  for (const Epoch& e : ds.epochs) {
    if (e.n_channels != ch || e.n_samples != len)
      throw ShapeError("flatten: epochs have mixed shapes");
    fm.x.insert(fm.x.end(), e.window.begin(), e.window.end());
    fm.y.push_back(e.label);
  }
  return fm;
}

EpochedDataset unflatten(const FeatureMatrix& fm, std::size_t n_channels,
                         std::size_t n_samples) {
  if (fm.n_cols != n_channels * n_samples)
    throw ShapeError("unflatten: column count != channels x samples");
  EpochedDataset ds;
  for (std::size_t i = 0; i < fm.n_rows(); ++i) {
    Epoch e;
    e.label = fm.y[i];
    e.n_channels = n_channels;
    e.n_samples = n_samples;
    e.window.assign(fm.row(i), fm.row(i) + fm.n_cols);
    ds.epochs.push_back(std::move(e));
  }
  return ds;
}

SplitResult split_train_test(const FeatureMatrix& fm, double test_fraction,
                             std::uint64_t seed, bool stratified) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw ConfigError("split: test fraction must be in (0,1)");
  const std::size_t n = fm.n_rows();
  if (n == 0) throw DataError("split: empty feature matrix");
  const auto test_total = static_cast<std::size_t>(
      std::ceil(static_cast<double>(n) * test_fraction));

  std::vector<char> in_test(n, 0);
  Rng rng(seed);
  if (!stratified) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    rng.shuffle(idx.begin(), idx.end());
    for (std::size_t i = 0; i < test_total; ++i) in_test[idx[i]] = 1;
  } else {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < n; ++i) by_class[fm.y[i]].push_back(i);

    // per-class quotas, largest-remainder apportionment of the fixed total
    std::vector<std::pair<int, std::size_t>> base;  // class -> floor(quota)
    std::vector<std::pair<double, int>> remainders;
    std::size_t assigned = 0;
    for (const auto& [label, rows] : by_class) {
      const double quota = static_cast<double>(rows.size()) * test_fraction;
      const auto fl = static_cast<std::size_t>(std::floor(quota));
      base.emplace_back(label, fl);
      remainders.emplace_back(quota - static_cast<double>(fl), label);
      assigned += fl;
    }
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    std::map<int, std::size_t> want;
    for (const auto& [label, fl] : base) want[label] = fl;
    for (std::size_t i = 0; assigned < test_total && i < remainders.size(); ++i) {
      want[remainders[i].second]++;
      ++assigned;
    }

    for (auto& [label, rows] : by_class) {
      rng.shuffle(rows.begin(), rows.end());
      for (std::size_t i = 0; i < want[label] && i < rows.size(); ++i)
        in_test[rows[i]] = 1;
    }
  }

  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t i = 0; i < n; ++i)
    (in_test[i] ? test_idx : train_idx).push_back(i);

  SplitResult out;
  out.train = fm.subset(train_idx);
  out.test = fm.subset(test_idx);
  return out;
}

void save_feature_csv(const FeatureMatrix& fm, const std::filesystem::path& path,
                      std::size_t n_channels, std::size_t n_samples) {
  if (fm.n_cols != n_channels * n_samples)
    throw ShapeError("feature csv: column count != channels x samples");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  for (std::size_t c = 0; c < n_channels; ++c)
    for (std::size_t s = 0; s < n_samples; ++s)
      out << 'c' << c << "_t" << s << ',';
  out << "label\n";
  for (std::size_t r = 0; r < fm.n_rows(); ++r) {
    const double* row = fm.row(r);
    for (std::size_t c = 0; c < fm.n_cols; ++c) out << format_double(row[c]) << ',';
    out << fm.y[r] << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

FeatureMatrix load_feature_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty feature csv: " + path.string());
  const auto header = split_csv(line);
  if (header.empty() || header.back() != "label")
    throw FormatError("feature csv must end with a 'label' column: " + path.string());

  FeatureMatrix fm;
  fm.n_cols = header.size() - 1;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_csv(line);
    if (fields.size() != header.size())
      throw FormatError("feature csv row " + std::to_string(line_no) + " has " +
                        std::to_string(fields.size()) + " fields, expected " +
                        std::to_string(header.size()));
    for (std::size_t c = 0; c < fm.n_cols; ++c) fm.x.push_back(parse_double(fields[c]));
    fm.y.push_back(static_cast<int>(parse_long(fields.back())));
  }
  return fm;
}

namespace {

void write_raw_f64(std::ofstream& out, const double* v, std::size_t count) {
  static_assert(std::endian::native == std::endian::little || true);
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(v), static_cast<std::streamsize>(count * 8));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, &v[i], 8);
      char buf[8];
      for (int b = 0; b < 8; ++b) buf[b] = static_cast<char>(bits >> (8 * b));
      out.write(buf, 8);
    }
  }
}

}  // namespace

void save_epoch_cache(const EpochedDataset& ds, const std::filesystem::path& path) {
  if (ds.epochs.empty()) throw DataError("epoch cache: dataset is empty");
  const std::size_t ch = ds.epochs.front().n_channels;
  const std::size_t len = ds.epochs.front().n_samples;

  std::vector<std::string> origin_ids;
  std::map<std::string, std::size_t> origin_index;
  nlohmann::json origins = nlohmann::json::array();
  for (const Epoch& e : ds.epochs) {
    if (e.n_channels != ch || e.n_samples != len)
      throw ShapeError("epoch cache: epochs have mixed shapes");
    auto [it, inserted] = origin_index.emplace(e.origin_id, origin_ids.size());
    if (inserted) origin_ids.push_back(e.origin_id);
    origins.push_back({it->second, e.origin_start});
  }

  nlohmann::json header = {{"n_epochs", ds.epochs.size()},
                           {"n_channels", ch},
                           {"n_samples", len},
                           {"sample_rate_hz", ds.sample_rate_hz},
                           {"channel_names", ds.channel_names},
                           {"origin_ids", origin_ids},
                           {"origins", origins}};

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(kEpochCacheMagic, 8);
  const std::string line = header.dump() + "\n";
  out.write(line.data(), static_cast<std::streamsize>(line.size()));
  for (const Epoch& e : ds.epochs) write_raw_f64(out, e.window.data(), e.window.size());
  std::vector<std::int32_t> labels;
  labels.reserve(ds.epochs.size());
  for (const Epoch& e : ds.epochs) labels.push_back(e.label);
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(labels.data()),
              static_cast<std::streamsize>(labels.size() * 4));
  } else {
    for (std::int32_t v : labels) {
      const auto bits = static_cast<std::uint32_t>(v);
      char buf[4];
      for (int b = 0; b < 4; ++b) buf[b] = static_cast<char>(bits >> (8 * b));
      out.write(buf, 4);
    }
  }
  if (!out) throw IoError("write failed: " + path.string());
}

EpochedDataset load_epoch_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, kEpochCacheMagic, 8) != 0)
    throw FormatError("bad magic at offset 0 in " + path.string() +
                      " (not a MIWEPC v1 file)");
  std::string line;
  if (!std::getline(in, line))
    throw FormatError("missing JSON header line in " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("garbled JSON header in " + path.string() + ": " + e.what());
  }

  EpochedDataset ds;
  std::size_t n_epochs, ch, len;
  std::vector<std::string> origin_ids;
  std::vector<std::pair<std::size_t, std::size_t>> origins;
  try {
    n_epochs = header.at("n_epochs").get<std::size_t>();
    ch = header.at("n_channels").get<std::size_t>();
    len = header.at("n_samples").get<std::size_t>();
    ds.sample_rate_hz = header.at("sample_rate_hz").get<double>();
    ds.channel_names = header.at("channel_names").get<std::vector<std::string>>();
    origin_ids = header.at("origin_ids").get<std::vector<std::string>>();
    for (const auto& o : header.at("origins"))
      origins.emplace_back(o.at(0).get<std::size_t>(), o.at(1).get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("epoch cache header missing field in " + path.string() + ": " +
                      e.what());
  }
  if (origins.size() != n_epochs)
    throw FormatError("epoch cache: origins length != n_epochs in " + path.string());

  ds.epochs.resize(n_epochs);
  for (std::size_t i = 0; i < n_epochs; ++i) {
    Epoch& e = ds.epochs[i];
    e.n_channels = ch;
    e.n_samples = len;
    e.window.resize(ch * len);
    if constexpr (std::endian::native == std::endian::little) {
      in.read(reinterpret_cast<char*>(e.window.data()),
              static_cast<std::streamsize>(ch * len * 8));
    } else {
      for (std::size_t j = 0; j < ch * len; ++j) {
        unsigned char buf[8];
        in.read(reinterpret_cast<char*>(buf), 8);
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[b]) << (8 * b);
        std::memcpy(&e.window[j], &bits, 8);
      }
    }
    if (!in) throw ShapeError("epoch cache payload truncated in " + path.string());
    if (origins[i].first >= origin_ids.size())
      throw FormatError("epoch cache: origin index out of range in " + path.string());
    e.origin_id = origin_ids[origins[i].first];
    e.origin_start = origins[i].second;
  }
  for (std::size_t i = 0; i < n_epochs; ++i) {
    std::int32_t label;
    if constexpr (std::endian::native == std::endian::little) {
      in.read(reinterpret_cast<char*>(&label), 4);
    } else {
      unsigned char buf[4];
      in.read(reinterpret_cast<char*>(buf), 4);
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(buf[b]) << (8 * b);
      label = static_cast<std::int32_t>(bits);
    }
    if (!in) throw ShapeError("epoch cache label payload truncated in " + path.string());
    ds.epochs[i].label = static_cast<int>(label);
  }
  return ds;
}

}  // namespace miw
