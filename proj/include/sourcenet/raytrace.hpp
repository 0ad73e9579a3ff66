#pragma once

// Source-receiver geometry and first-arrival travel times in layered models.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "sourcenet/errors.hpp"
#include "sourcenet/mtmath.hpp"
#include "sourcenet/velocity_model.hpp"

namespace sourcenet {

inline constexpr double kEarthRadiusKm = 6371.0;

struct StationGeom {
  std::string name;
  double lat = 0.0;
  double lon = 0.0;
};

struct EventGeom {
  double lat = 0.0;
  double lon = 0.0;
  double depth_km = 10.0;
  double origin_time = 0.0;
};

struct LocalGeom {
  double dist_km = 0.0;
  double azimuth_deg = 0.0;  // clockwise from north, [0, 360)
};

/// Equirectangular epicentral distance and azimuth from event to station.
inline LocalGeom geo_to_local(const EventGeom& ev, const StationGeom& st) {
  double dlon = st.lon - ev.lon;
  dlon -= 360.0 * std::floor((dlon + 180.0) / 360.0);
  const double mean_lat = 0.5 * (st.lat + ev.lat) * kDeg;
  const double dx = kEarthRadiusKm * dlon * kDeg * std::cos(mean_lat);  // east
  const double dy = kEarthRadiusKm * (st.lat - ev.lat) * kDeg;          // north
  LocalGeom g;
  g.dist_km = std::hypot(dx, dy);
  if (g.dist_km == 0.0) return g;
  double az = std::atan2(dx, dy) / kDeg;
  if (az < 0.0) az += 360.0;
  if (az >= 360.0) az -= 360.0;
  g.azimuth_deg = az;
  return g;
}

enum class Phase { P, S };

struct Arrival {
  double time_s = 0.0;
  double takeoff_deg = 0.0;    // from downward vertical; up-going rays > 90
  double ray_param = 0.0;      // s/km
  double incidence_deg = 0.0;  // at the surface, from vertical
  bool head_wave = false;
};

namespace detail {

struct Leg {
  double h;  // km
  double v;  // km/s
};

inline double leg_offset(const std::vector<Leg>& legs, double p) {
  double x = 0.0;
  for (const Leg& l : legs) {
    const double s = p * l.v;
    x += l.h * s / std::sqrt(1.0 - s * s);
  }
  return x;
}

inline double leg_tau(const std::vector<Leg>& legs, double p) {
  double tau = 0.0;
  for (const Leg& l : legs) tau += l.h * std::sqrt(std::max(0.0, 1.0 / (l.v * l.v) - p * p));
  return tau;
}

inline double leg_time(const std::vector<Leg>& legs, double p) {
  double t = 0.0;
  for (const Leg& l : legs) {
    const double s = p * l.v;
    t += l.h / (l.v * std::sqrt(1.0 - s * s));
  }
  return t;
}

/// Layers crossed by an up-going ray from the source to the surface.
inline std::vector<Leg> upgoing_legs(const VelocityModel& model, double depth, bool p_wave) {
  std::vector<Leg> legs;
  const std::size_t src = model.layer_at(depth);
  for (std::size_t i = 0; i < src; ++i)
    legs.push_back({model.layers[i].thickness_km, model.velocity(i, p_wave)});
  const double h = depth - model.top_of(src);
  if (h > 0.0) legs.push_back({h, model.velocity(src, p_wave)});
  return legs;
}

}  // namespace detail

/// First arrival of the direct (up-going) ray or any head wave refracted along
/// an interface below the source, for a receiver at the surface.
inline Arrival travel_time(const VelocityModel& model, double depth_km, double dist_km,
                           Phase phase) {
  if (!(depth_km > 0.0) || !(dist_km >= 0.0) || !std::isfinite(dist_km))
    throw NoRay("source must be below the surface and distance non-negative");
  const bool pw = phase == Phase::P;
  const std::size_t src = model.layer_at(depth_km);
  const double v_src = model.velocity(src, pw);
  const double v_top = model.velocity(0, pw);

  std::optional<Arrival> best;

  // Direct ray: bisection on the ray parameter for X(p) = dist.
  const auto up = detail::upgoing_legs(model, depth_km, pw);
  double vmax = 0.0;
  for (const auto& l : up) vmax = std::max(vmax, l.v);
  {
    double p = 0.0;
    if (dist_km > 0.0) {
      double lo = 0.0, hi = 1.0 / vmax;
      for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) break;
        if (detail::leg_offset(up, mid) < dist_km) lo = mid; else hi = mid;
      }
      p = 0.5 * (lo + hi);
      const double x = detail::leg_offset(up, p);
      if (!(std::abs(x - dist_km) <= 1e-6 * std::max(1.0, dist_km))) p = -1.0;
    }
    if (p >= 0.0) {
      Arrival a;
      a.ray_param = p;
      a.time_s = detail::leg_time(up, p);
      a.takeoff_deg = 180.0 - std::asin(std::clamp(p * v_src, 0.0, 1.0)) / kDeg;
      a.incidence_deg = std::asin(std::clamp(p * v_top, 0.0, 1.0)) / kDeg;
      best = a;
    }
  }

  // Head waves along each interface below the source.
  double vmax_above = vmax;
  std::vector<detail::Leg> down;
  const double src_bottom = model.top_of(src) + model.layers[src].thickness_km;
  for (std::size_t k = src; k + 1 < model.size(); ++k) {
    if (k == src) {
      vmax_above = std::max(vmax_above, v_src);
      down.push_back({src_bottom - depth_km, v_src});
    } else {
      vmax_above = std::max(vmax_above, model.velocity(k, pw));
      down.push_back({model.layers[k].thickness_km, model.velocity(k, pw)});
    }
    const double v_ref = model.velocity(k + 1, pw);
    if (!(v_ref > vmax_above)) continue;
    const double p = 1.0 / v_ref;
    std::vector<detail::Leg> legs = down;
    for (std::size_t i = 0; i <= k; ++i)
      legs.push_back({model.layers[i].thickness_km, model.velocity(i, pw)});
    const double x_crit = detail::leg_offset(legs, p);
    if (dist_km < x_crit) continue;
    const double t = dist_km * p + detail::leg_tau(legs, p);
    if (!best || t < best->time_s) {
      Arrival a;
      a.ray_param = p;
      a.time_s = t;
      a.takeoff_deg = std::asin(std::clamp(p * v_src, 0.0, 1.0)) / kDeg;
      a.incidence_deg = std::asin(std::clamp(p * v_top, 0.0, 1.0)) / kDeg;
      a.head_wave = true;
      best = a;
    }
  }
  if (!best || !std::isfinite(best->time_s)) throw NoRay("no ray connects source and receiver");
  return *best;
}

}  // namespace sourcenet
