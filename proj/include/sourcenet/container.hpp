#pragma once

// ".snet" binary container for feature datasets and noise libraries.
//
// Little-endian. Header: "SNET", u16 version, u8 kind, u32 n_records.
// Record: u32 id_len, id bytes, u8 domain, f32 lat, lon, depth, f32 label[6],
// u16 n_stations, u16 T. Station: f32 azimuth, f32 dist, f32 scalars[20],
// f32 p_win[6*T], f32 s_win[6*T].

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "sourcenet/errors.hpp"
#include "sourcenet/features.hpp"
#include "sourcenet/psdr.hpp"

namespace sourcenet {

static_assert(std::endian::native == std::endian::little, "container I/O assumes little-endian");

inline constexpr char kSnetMagic[4] = {'S', 'N', 'E', 'T'};
inline constexpr std::uint16_t kSnetVersion = 1;

enum class ContainerKind : std::uint8_t { Dataset = 0, Noise = 1 };

namespace io {

class Writer {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <class T>
  void array(const T* p, std::size_t n) {
    bytes(p, n * sizeof(T));
  }
  const std::vector<char>& buffer() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> data) : d_(std::move(data)) {}

  template <class T>
  T get(const char* what) {
    T v;
    read(&v, sizeof(T), what);
    return v;
  }
  template <class T>
  void array(T* p, std::size_t n, const char* what) {
    read(p, n * sizeof(T), what);
  }
  std::string string(std::size_t n, const char* what) {
    std::string s(n, '\0');
    read(s.data(), n, what);
    return s;
  }
  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == d_.size(); }

 private:
  void read(void* p, std::size_t n, const char* what) {
    if (n > d_.size() - pos_) throw TruncatedFile(pos_, what);
    std::memcpy(p, d_.data() + pos_, n);
    pos_ += n;
  }
  std::vector<char> d_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<char>& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace io

struct Container {
  ContainerKind kind = ContainerKind::Dataset;
  std::vector<EventRecord> records;
};

inline std::vector<char> encode_container(const Container& c) {
  io::Writer w;
  w.bytes(kSnetMagic, 4);
  w.put<std::uint16_t>(kSnetVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.kind));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.records.size()));
  for (const auto& r : c.records) {
    if (r.stations.size() > 0xffff) throw InvariantError("too many stations in " + r.id);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.id.size()));
    w.bytes(r.id.data(), r.id.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(r.domain));
    w.put<float>(r.lat);
    w.put<float>(r.lon);
    w.put<float>(r.depth_km);
    w.array(r.label.data(), 6);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(r.stations.size()));
    w.put<std::uint16_t>(r.T);
    const std::size_t len = kChannels * r.T;
    for (const auto& s : r.stations) {
      if (s.p_win.size() != len || s.s_win.size() != len)
        throw InvariantError("window size mismatch in " + r.id);
      w.put<float>(s.azimuth);
      w.put<float>(s.dist_km);
      w.array(s.scalars.data(), kScalarDim);
      w.array(s.p_win.data(), len);
      w.array(s.s_win.data(), len);
    }
  }
  return w.buffer();
}

inline Container decode_container(std::vector<char> bytes) {
  io::Reader in(std::move(bytes));
  char magic[4];
  in.array(magic, 4, "magic");
  if (std::memcmp(magic, kSnetMagic, 4) != 0) throw FormatError("bad magic (not a .snet file)");
  const auto version = in.get<std::uint16_t>("version");
  if (version != kSnetVersion)
    throw FormatError("unsupported .snet version " + std::to_string(version));
  const auto kind = in.get<std::uint8_t>("kind");
  if (kind > 1) throw FormatError("unknown container kind " + std::to_string(kind));
  Container c;
  c.kind = static_cast<ContainerKind>(kind);
  const auto n = in.get<std::uint32_t>("record count");
  for (std::uint32_t i = 0; i < n; ++i) {
    EventRecord r;
    const auto id_len = in.get<std::uint32_t>("id length");
    r.id = in.string(id_len, "id");
    const auto dom = in.get<std::uint8_t>("domain");
    if (dom > 2) throw InvariantError("record " + r.id + ": bad domain tag");
    r.domain = static_cast<Domain>(dom);
    r.lat = in.get<float>("lat");
    r.lon = in.get<float>("lon");
    r.depth_km = in.get<float>("depth");
    in.array(r.label.data(), 6, "label");
    const auto ns = in.get<std::uint16_t>("station count");
    r.T = in.get<std::uint16_t>("window length");
    if (r.T == 0) throw InvariantError("record " + r.id + ": zero window length");
    const std::size_t len = kChannels * r.T;
    r.stations.resize(ns);
    for (auto& s : r.stations) {
      s.azimuth = in.get<float>("station block");
      s.dist_km = in.get<float>("station block");
      in.array(s.scalars.data(), kScalarDim, "station block");
      s.p_win.resize(len);
      s.s_win.resize(len);
      in.array(s.p_win.data(), len, "station block");
      in.array(s.s_win.data(), len, "station block");
      auto finite = [](std::span<const float> v) {
        for (float x : v)
          if (!std::isfinite(x)) return false;
        return true;
      };
      if (!finite(s.scalars) || !finite(s.p_win) || !finite(s.s_win))
        throw InvariantError("record " + r.id + ": non-finite station features");
    }
    c.records.push_back(std::move(r));
  }
  if (!in.at_end()) throw FormatError("trailing bytes after last record");
  return c;
}

inline void encode_dataset(const std::vector<EventRecord>& records, const std::string& path) {
  io::write_file(path, encode_container({ContainerKind::Dataset, records}));
}

inline std::vector<EventRecord> decode_dataset(const std::string& path) {
  Container c = decode_container(io::read_file(path));
  if (c.kind != ContainerKind::Dataset) throw FormatError(path + " is not a dataset container");
  return std::move(c.records);
}

// Noise records reuse the layout: one "station" per record with T = L; p_win
// channels 0-2 carry Z, N, E and the rest is zero. Record scalars 0-3 hold
// the spectral shape (f_floor, bump_hz, bump_width, bump_gain) and label[0]
// the sample rate.

inline Container noise_to_container(const NoiseLibrary& lib) {
  Container c;
  c.kind = ContainerKind::Noise;
  for (std::size_t i = 0; i < lib.records.size(); ++i) {
    const Trace& t = lib.records[i];
    if (t.length() > 0xffff) throw InvariantError("noise record too long for container");
    EventRecord r;
    r.id = "noise" + std::to_string(i);
    r.T = static_cast<std::uint16_t>(t.length());
    r.label[0] = static_cast<float>(lib.rate);
    StationFeatures s;
    s.scalars[0] = static_cast<float>(lib.spectrum.f_floor_hz);
    s.scalars[1] = static_cast<float>(lib.spectrum.bump_hz);
    s.scalars[2] = static_cast<float>(lib.spectrum.bump_width_hz);
    s.scalars[3] = static_cast<float>(lib.spectrum.bump_gain);
    s.p_win.assign(kChannels * r.T, 0.0f);
    s.s_win.assign(kChannels * r.T, 0.0f);
    for (int k = 0; k < 3; ++k)
      for (std::size_t j = 0; j < t.length(); ++j)
        s.p_win[k * r.T + j] = static_cast<float>(t.comp[k][j]);
    r.stations.push_back(std::move(s));
    c.records.push_back(std::move(r));
  }
  return c;
}

inline NoiseLibrary container_to_noise(const Container& c) {
  if (c.kind != ContainerKind::Noise) throw FormatError("not a noise container");
  if (c.records.empty()) throw InvariantError("noise library has no records");
  NoiseLibrary lib;
  for (const auto& r : c.records) {
    if (r.stations.size() != 1) throw InvariantError("noise record must hold one trace");
    const auto& s = r.stations[0];
    lib.rate = r.label[0];
    lib.spectrum = {s.scalars[0], s.scalars[1], s.scalars[2], s.scalars[3]};
    Trace t = Trace::zeros(r.T, lib.rate);
    for (int k = 0; k < 3; ++k)
      for (std::size_t j = 0; j < r.T; ++j) t.comp[k][j] = s.p_win[k * r.T + j];
    lib.records.push_back(std::move(t));
  }
  return lib;
}

inline void save_noise_library(const NoiseLibrary& lib, const std::string& path) {
  io::write_file(path, encode_container(noise_to_container(lib)));
}

inline NoiseLibrary load_noise_library(const std::string& path) {
  return container_to_noise(decode_container(io::read_file(path)));
}

}  // namespace sourcenet
