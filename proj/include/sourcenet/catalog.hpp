#pragma once

// External catalog metadata as JSON lines, one event per line:
// {"id", "lat", "lon", "depth_km", "mw", "mt": [xx, yy, zz, xy, xz, yz],
//  "stations": [{"name", "lat", "lon"}, ...]}
// Used to attach labels and geometry to records whose waveform features come
// from a container.

#include <nlohmann/json.hpp>

#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "sourcenet/errors.hpp"
#include "sourcenet/features.hpp"
#include "sourcenet/mtmath.hpp"
#include "sourcenet/raytrace.hpp"

namespace sourcenet {

struct CatalogEvent {
  std::string id;
  EventGeom geom;
  double mw = 0.0;
  MomentTensor mt;
  std::vector<StationGeom> stations;
};

inline std::vector<CatalogEvent> parse_catalog(const std::string& text) {
  std::vector<CatalogEvent> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      CatalogEvent ev;
      ev.id = j.at("id").get<std::string>();
      ev.geom.lat = j.at("lat").get<double>();
      ev.geom.lon = j.at("lon").get<double>();
      ev.geom.depth_km = j.at("depth_km").get<double>();
      ev.mw = j.at("mw").get<double>();
      ev.mt.m = j.at("mt").get<std::array<double, 6>>();
      for (const auto& s : j.value("stations", nlohmann::json::array()))
        ev.stations.push_back({s.at("name").get<std::string>(), s.at("lat").get<double>(), s.at("lon").get<double>()});
      out.push_back(std::move(ev));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, e.what());
    }
  }
  return out;
}

inline std::vector<CatalogEvent> load_catalog(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open catalog " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_catalog(ss.str());
}

/// Overwrites location, label and (when the station list lines up with the
/// record) station azimuth and distance of every record whose id is in the
/// catalog. Matched records are tagged Real. Returns the number matched.
inline std::size_t apply_catalog(std::span<EventRecord> records, std::span<const CatalogEvent> catalog) {
  std::unordered_map<std::string, const CatalogEvent*> by_id;
  for (const auto& c : catalog) by_id[c.id] = &c;
  std::size_t matched = 0;
  for (auto& r : records) {
    const auto it = by_id.find(r.id);
    if (it == by_id.end()) continue;
    const CatalogEvent& c = *it->second;
    SourceLabel lab = mt_to_label(c.mt);
    lab.mw = c.mw;
    const auto y = lab.as_array();
    for (int k = 0; k < 6; ++k) r.label[k] = static_cast<float>(y[k]);
    r.lat = static_cast<float>(c.geom.lat);
    r.lon = static_cast<float>(c.geom.lon);
    r.depth_km = static_cast<float>(c.geom.depth_km);
    r.domain = Domain::Real;
    if (!c.stations.empty()) {
      if (c.stations.size() != r.stations.size())
        throw InvariantError("catalog event '" + c.id + "' lists " + std::to_string(c.stations.size()) +
                             " stations, record has " + std::to_string(r.stations.size()));
      for (std::size_t i = 0; i < c.stations.size(); ++i) {
        const auto g = geo_to_local(c.geom, c.stations[i]);
        r.stations[i].azimuth = static_cast<float>(g.azimuth_deg);
        r.stations[i].dist_km = static_cast<float>(g.dist_km);
      }
    }
    ++matched;
  }
  return matched;
}

}  // namespace sourcenet
