#pragma once

// Ray-theoretic far-field simulator: clean three-component seismograms for a
// point moment-tensor source in a layered model.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "sourcenet/errors.hpp"
#include "sourcenet/mtmath.hpp"
#include "sourcenet/raytrace.hpp"
#include "sourcenet/velocity_model.hpp"

namespace sourcenet {

inline constexpr double kSampleRate = 20.0;
inline constexpr double kTraceSeconds = 90.0;

/// Three-component ground-velocity record (Z up, N, E).
struct Trace {
  double rate = kSampleRate;
  std::array<std::vector<double>, 3> comp;  // Z, N, E
  double p_pick = 0.0;  // arrival times, seconds from origin
  double s_pick = 0.0;
  // Picks as predicted when the event was simulated; PSDR distortions move
  // the waveform and `p_pick`/`s_pick` but not these, so windows cut here
  // carry realistic alignment error.
  double p_ref = 0.0;
  double s_ref = 0.0;

  std::size_t length() const { return comp[0].size(); }
  double duration() const { return static_cast<double>(length()) / rate; }

  static Trace zeros(std::size_t n, double rate = kSampleRate) {
    Trace t;
    t.rate = rate;
    for (auto& c : t.comp) c.assign(n, 0.0);
    return t;
  }

  double peak() const {
    double m = 0.0;
    for (const auto& c : comp)
      for (double v : c) m = std::max(m, std::abs(v));
    return m;
  }

  bool operator==(const Trace&) const = default;
};

struct StationRecord {
  StationGeom station;
  LocalGeom local;
  Trace trace;
  bool operator==(const StationRecord& o) const {
    return station.name == o.station.name && station.lat == o.station.lat &&
           station.lon == o.station.lon && local.dist_km == o.local.dist_km &&
           local.azimuth_deg == o.local.azimuth_deg && trace == o.trace;
  }
};

enum class Domain : std::uint8_t { Synthetic = 0, PseudoReal = 1, Real = 2 };

inline const char* domain_name(Domain d) {
  switch (d) {
    case Domain::Synthetic: return "synthetic";
    case Domain::PseudoReal: return "pseudo_real";
    case Domain::Real: return "real";
  }
  return "unknown";
}

struct SyntheticEvent {
  EventGeom geom;
  std::vector<StationRecord> stations;
  SourceLabel label;
  std::string model_id;
  Domain domain = Domain::Synthetic;
};

struct SimConfig {
  double rate = kSampleRate;
  double duration_s = kTraceSeconds;
  // Stations whose S window would run past the end of the trace are dropped.
  double window_after_s = 5.0;
};

/// Source half-duration in seconds for a given magnitude.
inline double stf_half_duration(double mw) {
  return std::clamp(0.5 * std::pow(10.0, 0.5 * (mw - 3.0) / 2.0), 0.2, 3.0);
}

/// Unit-peak derivative-of-Gaussian pulse spanning 6 half-durations; its
/// centre sits at index (n - 1) / 2 so the samples are exactly antisymmetric.
inline std::vector<double> source_time_function(double mw, double rate = kSampleRate) {
  const double tau = stf_half_duration(mw);
  const auto n = static_cast<std::size_t>(std::ceil(6.0 * tau * rate));
  const double sigma = tau / 2.0;
  const double centre = 0.5 * static_cast<double>(n - 1);
  std::vector<double> pulse(n);
  double peak = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double t = (static_cast<double>(k) - centre) / rate;
    pulse[k] = -t * std::exp(-t * t / (2.0 * sigma * sigma));
    peak = std::max(peak, std::abs(pulse[k]));
  }
  for (std::size_t k = 0; k < n / 2; ++k) {
    const double v = pulse[k] / peak;
    pulse[k] = v;
    pulse[n - 1 - k] = -v;
  }
  if (n % 2 == 1) pulse[n / 2] = 0.0;
  return pulse;
}

namespace detail {

/// Adds `amp * pulse` to `trace` so the pulse's effective onset (centre minus
/// one half-duration) lands on `arrival_s`.
inline void add_pulse(Trace& trace, const std::vector<double>& pulse, double tau,
                      double arrival_s, const Eigen::Vector3d& zne) {
  const double centre = 0.5 * static_cast<double>(pulse.size() - 1);
  const auto start = static_cast<long>(std::lround((arrival_s + tau) * trace.rate - centre));
  const long n = static_cast<long>(trace.length());
  for (std::size_t k = 0; k < pulse.size(); ++k) {
    const long idx = start + static_cast<long>(k);
    if (idx < 0 || idx >= n) continue;
    for (int c = 0; c < 3; ++c) trace.comp[c][idx] += zne[c] * pulse[k];
  }
}

/// NED vector to (Z up, N, E).
inline Eigen::Vector3d ned_to_zne(const Eigen::Vector3d& v) { return {-v(2), v(0), v(1)}; }

}  // namespace detail

struct SimulationResult {
  SyntheticEvent event;
  std::size_t dropped = 0;
};

/// Far-field P and S arrivals with 1/R spreading. Unreachable stations are
/// dropped and counted; throws NoStations if none survive.
inline SimulationResult simulate_event(const MomentTensor& mt, const EventGeom& geom,
                                       const std::vector<StationGeom>& stations,
                                       const VelocityModel& model, const SimConfig& cfg = {}) {
  SimulationResult out;
  out.event.geom = geom;
  out.event.label = mt_to_label(mt);
  out.event.model_id = model.id;
  const double m0 = scalar_moment(mt);
  const double mw = moment_to_mw(m0);
  const auto pulse = source_time_function(mw, cfg.rate);
  const double tau = stf_half_duration(mw);
  const auto n = static_cast<std::size_t>(std::llround(cfg.duration_s * cfg.rate));
  const std::size_t src = model.layer_at(geom.depth_km);
  const Layer& sl = model.layers[src];

  for (const StationGeom& st : stations) {
    const LocalGeom local = geo_to_local(geom, st);
    Arrival ap, as;
    try {
      ap = travel_time(model, geom.depth_km, local.dist_km, Phase::P);
      as = travel_time(model, geom.depth_km, local.dist_km, Phase::S);
    } catch (const NoRay&) {
      ++out.dropped;
      continue;
    }
    if (as.time_s + cfg.window_after_s >= cfg.duration_s) {
      ++out.dropped;
      continue;
    }
    const double r_km = std::hypot(local.dist_km, geom.depth_km);
    const double four_pi = 4.0 * std::numbers::pi;

    StationRecord rec;
    rec.station = st;
    rec.local = local;
    rec.trace = Trace::zeros(n, cfg.rate);
    const double phi = local.azimuth_deg * kDeg;

    // P: motion along the ray, which reaches the surface travelling up and away.
    {
      const Eigen::Vector3d gamma = ray_direction(ap.takeoff_deg, local.azimuth_deg);
      const Radiation rad = radiation(mt, gamma);
      const double amp = rad.p_amp / (four_pi * sl.rho * std::pow(sl.vp, 3) * r_km * 1e9);
      const double j = ap.incidence_deg * kDeg;
      const Eigen::Vector3d dir_ned(std::sin(j) * std::cos(phi), std::sin(j) * std::sin(phi),
                                    -std::cos(j));
      detail::add_pulse(rec.trace, pulse, tau, ap.time_s, detail::ned_to_zne(amp * dir_ned));
    }
    // S: split into SV and SH at the source, re-projected at the receiver.
    {
      const double th = as.takeoff_deg * kDeg;
      const Eigen::Vector3d gamma = ray_direction(as.takeoff_deg, local.azimuth_deg);
      const Radiation rad = radiation(mt, gamma);
      const Eigen::Vector3d e_theta(std::cos(th) * std::cos(phi), std::cos(th) * std::sin(phi),
                                    -std::sin(th));
      const Eigen::Vector3d e_phi(-std::sin(phi), std::cos(phi), 0.0);
      const double scale = 1.0 / (four_pi * sl.rho * std::pow(sl.vs, 3) * r_km * 1e9);
      const double sv = rad.s_vec.dot(e_theta) * scale;
      const double sh = rad.s_vec.dot(e_phi) * scale;
      const double th_r = std::numbers::pi - as.incidence_deg * kDeg;
      const Eigen::Vector3d e_theta_r(std::cos(th_r) * std::cos(phi),
                                      std::cos(th_r) * std::sin(phi), -std::sin(th_r));
      detail::add_pulse(rec.trace, pulse, tau, as.time_s,
                        detail::ned_to_zne(sv * e_theta_r + sh * e_phi));
    }
    rec.trace.p_pick = rec.trace.p_ref = ap.time_s;
    rec.trace.s_pick = rec.trace.s_ref = as.time_s;
    out.event.stations.push_back(std::move(rec));
  }
  if (out.event.stations.empty()) throw NoStations("no station reachable");
  return out;
}

}  // namespace sourcenet
