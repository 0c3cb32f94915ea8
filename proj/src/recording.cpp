#include "miw/recording.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

namespace miw {

const std::vector<std::string> kStandard22Channels = {
    "Fp1", "Fp2", "F3", "F4", "C3", "C4", "P3", "P4", "O1", "O2", "F7",
    "F8",  "T3",  "T4", "T5", "T6", "Fz", "Cz", "Pz", "A1", "A2", "X5"};

const std::vector<std::string> kNonCorticalChannels = {"A1", "A2", "X5"};

void RecordingMetadata::validate() const {
  if (n_samples == 0) throw DataError("recording: n_samples must be positive");
  if (!(sample_rate_hz > 0.0)) throw DataError("recording: sample rate must be positive");
  if (channel_names.empty()) throw DataError("recording: channel list is empty");
  std::set<std::string> seen;
  for (const std::string& name : channel_names) {
    if (name.empty()) throw DataError("recording: empty channel name");
    if (!seen.insert(name).second)
      throw DataError("recording: duplicate channel name '" + name + "'");
  }
}

void Recording::validate() const {
  meta.validate();
  if (data.size() != meta.n_samples * n_channels())
    throw ShapeError("recording: data size does not match n_samples x n_channels");
  if (marker.size() != meta.n_samples)
    throw ShapeError("recording: marker length does not match n_samples");
  for (double v : data)
    if (!std::isfinite(v)) throw DataError("recording: non-finite sample value");
}

namespace {

static_assert(sizeof(double) == 8);

constexpr std::size_t kMagicLen = 8;  // "EEGREC1\n"

void write_f64_le(std::ofstream& out, const double* values, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values),
              static_cast<std::streamsize>(count * 8));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, &values[i], 8);
      char buf[8];
      for (int b = 0; b < 8; ++b) buf[b] = static_cast<char>(bits >> (8 * b));
      out.write(buf, 8);
    }
  }
}

void write_i32_le(std::ofstream& out, const std::int32_t* values, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values),
              static_cast<std::streamsize>(count * 4));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      const auto bits = static_cast<std::uint32_t>(values[i]);
      char buf[4];
      for (int b = 0; b < 4; ++b) buf[b] = static_cast<char>(bits >> (8 * b));
      out.write(buf, 4);
    }
  }
}

void read_f64_le(std::ifstream& in, double* values, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(values), static_cast<std::streamsize>(count * 8));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      unsigned char buf[8];
      in.read(reinterpret_cast<char*>(buf), 8);
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[b]) << (8 * b);
      std::memcpy(&values[i], &bits, 8);
    }
  }
}

void read_i32_le(std::ifstream& in, std::int32_t* values, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(values), static_cast<std::streamsize>(count * 4));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      unsigned char buf[4];
      in.read(reinterpret_cast<char*>(buf), 4);
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(buf[b]) << (8 * b);
      values[i] = static_cast<std::int32_t>(bits);
    }
  }
}

}  // namespace

Recording load_recording(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open recording file: " + path.string());

  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (in.gcount() != kMagicLen || std::memcmp(magic, kRecordingMagic, kMagicLen) != 0)
    throw FormatError("bad magic at offset 0 in " + path.string() +
                      " (not an EEGREC v1 file)");

  std::string header_line;
  if (!std::getline(in, header_line))
    throw FormatError("missing JSON header line at offset " +
                      std::to_string(kMagicLen) + " in " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("garbled JSON header at offset " + std::to_string(kMagicLen) +
                      " in " + path.string() + ": " + e.what());
  }

  Recording rec;
  try {
    rec.meta.id = header.at("id").get<std::string>();
    rec.meta.n_samples = header.at("n_samples").get<std::size_t>();
    rec.meta.sample_rate_hz = header.at("sample_rate_hz").get<double>();
    rec.meta.channel_names = header.at("channel_names").get<std::vector<std::string>>();
    if (!header.at("marker_present").get<bool>())
      throw FormatError("EEGREC v1 requires marker_present=true");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("JSON header missing required field in " + path.string() + ": " +
                      e.what());
  }
  rec.meta.validate();

  const std::size_t payload_offset = kMagicLen + header_line.size() + 1;
  const std::size_t n = rec.meta.n_samples;
  const std::size_t ch = rec.meta.channel_names.size();

  rec.data.resize(n * ch);
  read_f64_le(in, rec.data.data(), n * ch);
  if (!in)
    throw ShapeError("data payload at offset " + std::to_string(payload_offset) +
                     " shorter than declared shape (" + std::to_string(n) + " x " +
                     std::to_string(ch) + ") in " + path.string());

  rec.marker.resize(n);
  read_i32_le(in, rec.marker.data(), n);
  if (!in)
    throw ShapeError("marker payload shorter than declared n_samples=" +
                     std::to_string(n) + " in " + path.string());

  if (in.peek() != std::char_traits<char>::eof())
    throw ShapeError("trailing bytes after declared payload in " + path.string());

  for (double v : rec.data)
    if (!std::isfinite(v))
      throw DataError("non-finite sample value in " + path.string());

  rec.validate();
  return rec;
}

void save_recording(const Recording& rec, const std::filesystem::path& path) {
  rec.validate();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());

  nlohmann::json header = {{"id", rec.meta.id},
                           {"n_samples", rec.meta.n_samples},
                           {"sample_rate_hz", rec.meta.sample_rate_hz},
                           {"channel_names", rec.meta.channel_names},
                           {"marker_present", true}};

  out.write(kRecordingMagic, kMagicLen);
  const std::string header_line = header.dump() + "\n";
  out.write(header_line.data(), static_cast<std::streamsize>(header_line.size()));
  write_f64_le(out, rec.data.data(), rec.data.size());
  write_i32_le(out, rec.marker.data(), rec.marker.size());
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

Recording select_cortical_channels(const Recording& rec,
                                   std::span<const std::string> exclude) {
  rec.validate();
  for (const std::string& name : exclude)
    if (std::find(rec.meta.channel_names.begin(), rec.meta.channel_names.end(), name) ==
        rec.meta.channel_names.end())
      throw NameError("channel '" + name + "' not present in recording " + rec.meta.id);

  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < rec.meta.channel_names.size(); ++c)
    if (std::find(exclude.begin(), exclude.end(), rec.meta.channel_names[c]) ==
        exclude.end())
      keep.push_back(c);

  Recording out;
  out.meta.id = rec.meta.id;
  out.meta.n_samples = rec.meta.n_samples;
  out.meta.sample_rate_hz = rec.meta.sample_rate_hz;
  for (std::size_t c : keep) out.meta.channel_names.push_back(rec.meta.channel_names[c]);
  out.marker = rec.marker;
  out.data.resize(rec.meta.n_samples * keep.size());
  const std::size_t src_ch = rec.n_channels();
  for (std::size_t s = 0; s < rec.meta.n_samples; ++s)
    for (std::size_t i = 0; i < keep.size(); ++i)
      out.data[s * keep.size() + i] = rec.data[s * src_ch + keep[i]];
  return out;
}

}  // namespace miw
