#pragma once

// Station inputs: windows, spectral channels, the scalar vector, and
// dataset-level normalization.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "sourcenet/dsp.hpp"
#include "sourcenet/errors.hpp"
#include "sourcenet/mtmath.hpp"
#include "sourcenet/simulate.hpp"

namespace sourcenet {

inline constexpr std::size_t kWindowLen = 120;  // 6 s at 20 Hz
inline constexpr std::size_t kChannels = 6;     // Z, N, E + 3 spectral
inline constexpr std::size_t kScalarDim = 20;
inline constexpr double kWindowPre = 1.0;
inline constexpr double kWindowPost = 5.0;

struct Window {
  std::array<std::vector<double>, 3> comp;
  bool padded = false;
};

/// Slice [round((pick - pre) * rate), +T) of each component; out-of-range
/// samples are zero and flagged.
inline Window cut_window(const Trace& tr, double pick_s, double pre = kWindowPre,
                         double post = kWindowPost) {
  const auto len = static_cast<long>(std::lround((pre + post) * tr.rate));
  const long start = std::lround((pick_s - pre) * tr.rate);
  const long n = static_cast<long>(tr.length());
  Window w;
  for (int c = 0; c < 3; ++c) {
    w.comp[c].assign(static_cast<std::size_t>(len), 0.0);
    for (long i = 0; i < len; ++i) {
      const long j = start + i;
      if (j < 0 || j >= n) {
        w.padded = true;
        continue;
      }
      w.comp[c][i] = tr.comp[c][j];
    }
  }
  return w;
}

/// log10(1 + |rFFT|) of each component, resampled to the window length.
inline std::array<std::vector<double>, 3> spectral_channels(
    const std::array<std::vector<double>, 3>& win) {
  std::array<std::vector<double>, 3> out;
  for (int c = 0; c < 3; ++c) {
    auto mag = dsp::rfft_magnitude(win[c]);
    for (double& m : mag) m = std::log10(1.0 + m);
    out[c] = dsp::resample_linear(mag, win[c].size());
  }
  return out;
}

/// Six channels (3 time + 3 spectral), channel-major.
struct ChannelBlock {
  std::array<std::vector<double>, kChannels> ch;
};

inline ChannelBlock make_channels(const Window& w) {
  ChannelBlock b;
  const auto spec = spectral_channels(w.comp);
  for (int c = 0; c < 3; ++c) {
    b.ch[c] = w.comp[c];
    b.ch[3 + c] = spec[c];
  }
  return b;
}

struct ScalarGeom {
  double st_lat = 0.0, st_lon = 0.0, azimuth = 0.0, dist_km = 0.0, depth_km = 0.0;
};

inline constexpr double kRatioEps = 1e-12;

/// The 20-entry scalar vector: geometry (5), P channel peaks (6), S channel
/// peaks (6), P/S time-channel peak ratios (3).
inline std::array<double, kScalarDim> scalar_vector(const ScalarGeom& g, const ChannelBlock& p,
                                                    const ChannelBlock& s) {
  std::array<double, kScalarDim> v{};
  v[0] = g.st_lat;
  v[1] = g.st_lon;
  v[2] = g.azimuth;
  v[3] = g.dist_km;
  v[4] = g.depth_km;
  auto peak = [](const std::vector<double>& x) {
    double m = 0.0;
    for (double a : x) m = std::max(m, std::abs(a));
    return m;
  };
  std::array<double, 3> pk_p{}, pk_s{};
  for (std::size_t c = 0; c < kChannels; ++c) {
    const double a = peak(p.ch[c]), b = peak(s.ch[c]);
    if (c < 3) {
      pk_p[c] = a;
      pk_s[c] = b;
    }
    v[5 + c] = c < 3 ? std::log10(1.0 + a) : a;
    v[11 + c] = c < 3 ? std::log10(1.0 + b) : b;
  }
  for (int c = 0; c < 3; ++c) v[17 + c] = pk_p[c] / std::max(pk_s[c], kRatioEps);
  return v;
}

// ---------------------------------------------------------------------------
// Records

struct StationFeatures {
  float azimuth = 0.0f;
  float dist_km = 0.0f;
  std::array<float, kScalarDim> scalars{};
  std::vector<float> p_win;  // kChannels x T, channel-major
  std::vector<float> s_win;

  bool operator==(const StationFeatures&) const = default;
};

struct EventRecord {
  std::string id;
  Domain domain = Domain::Synthetic;
  float lat = 0.0f, lon = 0.0f, depth_km = 0.0f;
  std::array<float, 6> label{};  // dev[5], mw
  std::uint16_t T = kWindowLen;
  std::vector<StationFeatures> stations;
  bool normalized = false;  // in-memory only, never serialized

  SourceLabel source_label() const {
    std::array<double, 6> y;
    for (int k = 0; k < 6; ++k) y[k] = label[k];
    return SourceLabel::from_array(y);
  }

  bool operator==(const EventRecord& o) const {
    return id == o.id && domain == o.domain && lat == o.lat && lon == o.lon &&
           depth_km == o.depth_km && label == o.label && T == o.T && stations == o.stations;
  }
};

namespace detail {

inline std::vector<float> flatten(const ChannelBlock& b) {
  std::vector<float> out;
  out.reserve(kChannels * b.ch[0].size());
  for (const auto& c : b.ch)
    for (double v : c) out.push_back(static_cast<float>(v));
  return out;
}

}  // namespace detail

/// Band-passes each component over the full trace, then cuts P and S windows
/// at the reference picks.
inline StationFeatures extract_station(const StationRecord& rec, double depth_km) {
  Trace filtered = rec.trace;
  for (auto& c : filtered.comp) c = dsp::bandpass(c, dsp::kBandLoHz, dsp::kBandHiHz, filtered.rate);
  const ChannelBlock p = make_channels(cut_window(filtered, rec.trace.p_ref));
  const ChannelBlock s = make_channels(cut_window(filtered, rec.trace.s_ref));
  const ScalarGeom g{rec.station.lat, rec.station.lon, rec.local.azimuth_deg, rec.local.dist_km,
                     depth_km};
  const auto sv = scalar_vector(g, p, s);
  StationFeatures f;
  f.azimuth = static_cast<float>(rec.local.azimuth_deg);
  f.dist_km = static_cast<float>(rec.local.dist_km);
  for (std::size_t k = 0; k < kScalarDim; ++k) f.scalars[k] = static_cast<float>(sv[k]);
  f.p_win = detail::flatten(p);
  f.s_win = detail::flatten(s);
  return f;
}

inline EventRecord extract_event(const SyntheticEvent& ev, std::string id) {
  EventRecord r;
  r.id = std::move(id);
  r.domain = ev.domain;
  r.lat = static_cast<float>(ev.geom.lat);
  r.lon = static_cast<float>(ev.geom.lon);
  r.depth_km = static_cast<float>(ev.geom.depth_km);
  const auto y = ev.label.as_array();
  for (int k = 0; k < 6; ++k) r.label[k] = static_cast<float>(y[k]);
  r.T = static_cast<std::uint16_t>(kWindowLen);
  for (const auto& st : ev.stations) r.stations.push_back(extract_station(st, ev.geom.depth_km));
  return r;
}

// ---------------------------------------------------------------------------
// Normalization

enum class WaveNorm : std::uint8_t {
  Global = 0,  // divide by the dataset's 95th-percentile station peak
  Event = 1,   // divide each event by its own peak over stations
};

struct NormStats {
  std::array<double, kScalarDim> mean{};
  std::array<double, kScalarDim> std{};
  double wave_scale = 1.0;  // time channels
  double spec_scale = 1.0;  // spectral channels
  WaveNorm mode = WaveNorm::Global;
  std::vector<std::size_t> degenerate;  // scalar columns whose std was clamped to 1
};

namespace detail {

inline double percentile95(std::vector<double> v) {
  if (v.empty()) return 1.0;
  const std::size_t k = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(v.size()))) - 1;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(k), v.end());
  return v[k];
}

/// Peak |x| over the time (first) or spectral (second) half of the channels.
inline std::pair<double, double> station_peaks(const StationFeatures& s, std::size_t T) {
  double t = 0.0, f = 0.0;
  for (const auto* w : {&s.p_win, &s.s_win})
    for (std::size_t c = 0; c < kChannels; ++c)
      for (std::size_t i = 0; i < T; ++i) {
        const double a = std::abs((*w)[c * T + i]);
        (c < 3 ? t : f) = std::max(c < 3 ? t : f, a);
      }
  return {t, f};
}

}  // namespace detail

inline NormStats fit_stats(std::span<const EventRecord> data, WaveNorm mode = WaveNorm::Global) {
  if (data.empty()) throw EmptySplit("cannot fit normalization on an empty dataset");
  NormStats st;
  st.mode = mode;
  std::array<double, kScalarDim> sum{}, sq{};
  std::size_t n = 0;
  std::vector<double> tpk, fpk;
  for (const auto& r : data) {
    if (r.normalized) throw AlreadyNormalized("fit_stats needs raw records");
    for (const auto& s : r.stations) {
      for (std::size_t k = 0; k < kScalarDim; ++k) sum[k] += s.scalars[k];
      ++n;
      const auto [t, f] = detail::station_peaks(s, r.T);
      tpk.push_back(t);
      fpk.push_back(f);
    }
  }
  if (n == 0) throw EmptySplit("dataset has no stations");
  for (std::size_t k = 0; k < kScalarDim; ++k) st.mean[k] = sum[k] / static_cast<double>(n);
  for (const auto& r : data)
    for (const auto& s : r.stations)
      for (std::size_t k = 0; k < kScalarDim; ++k) {
        const double d = s.scalars[k] - st.mean[k];
        sq[k] += d * d;
      }
  for (std::size_t k = 0; k < kScalarDim; ++k) {
    st.std[k] = std::sqrt(sq[k] / static_cast<double>(n));
    if (!(st.std[k] > 1e-12)) {
      st.std[k] = 1.0;
      st.degenerate.push_back(k);
    }
  }
  st.wave_scale = detail::percentile95(std::move(tpk));
  st.spec_scale = detail::percentile95(std::move(fpk));
  if (!(st.wave_scale > 0.0)) st.wave_scale = 1.0;
  if (!(st.spec_scale > 0.0)) st.spec_scale = 1.0;
  return st;
}

/// Normalizes in place. A record can be normalized once.
inline void apply_norm(EventRecord& r, const NormStats& st) {
  if (r.normalized) throw AlreadyNormalized("record '" + r.id + "' is already normalized");
  double wscale = st.wave_scale, fscale = st.spec_scale;
  if (st.mode == WaveNorm::Event) {
    wscale = fscale = 0.0;
    for (const auto& s : r.stations) {
      const auto [t, f] = detail::station_peaks(s, r.T);
      wscale = std::max(wscale, t);
      fscale = std::max(fscale, f);
    }
    if (!(wscale > 0.0)) wscale = 1.0;
    if (!(fscale > 0.0)) fscale = 1.0;
  }
  const auto wi = static_cast<float>(1.0 / wscale), fi = static_cast<float>(1.0 / fscale);
  const std::size_t T = r.T;
  for (auto& s : r.stations) {
    for (std::size_t k = 0; k < kScalarDim; ++k)
      s.scalars[k] = static_cast<float>((s.scalars[k] - st.mean[k]) / st.std[k]);
    for (auto* w : {&s.p_win, &s.s_win})
      for (std::size_t c = 0; c < kChannels; ++c)
        for (std::size_t i = 0; i < T; ++i) (*w)[c * T + i] *= c < 3 ? wi : fi;
  }
  r.normalized = true;
}

inline void apply_norm(std::span<EventRecord> data, const NormStats& st) {
  for (auto& r : data) apply_norm(r, st);
}

}  // namespace sourcenet
