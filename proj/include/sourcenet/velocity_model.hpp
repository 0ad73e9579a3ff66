#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "sourcenet/errors.hpp"

namespace sourcenet {

struct Layer {
  double thickness_km = 0.0;  // +inf for the half-space
  double vp = 0.0;            // km/s
  double vs = 0.0;            // km/s
  double rho = 0.0;           // g/cm^3
};

/// Layered 1-D earth model; the last layer is a half-space.
struct VelocityModel {
  std::string id;
  std::vector<Layer> layers;

  std::size_t size() const { return layers.size(); }

  /// Index of the layer containing `depth_km` (top inclusive).
  std::size_t layer_at(double depth_km) const {
    double top = 0.0;
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
      const double bottom = top + layers[i].thickness_km;
      if (depth_km < bottom) return i;
      top = bottom;
    }
    return layers.size() - 1;
  }

  double top_of(std::size_t i) const {
    double top = 0.0;
    for (std::size_t k = 0; k < i; ++k) top += layers[k].thickness_km;
    return top;
  }

  double velocity(std::size_t i, bool p_wave) const {
    return p_wave ? layers[i].vp : layers[i].vs;
  }

  void validate() const {
    if (layers.empty()) throw InvariantError("velocity model has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const Layer& l = layers[i];
      const std::string where = "layer " + std::to_string(i + 1) + ": ";
      if (!(std::isfinite(l.vp) && std::isfinite(l.vs) && std::isfinite(l.rho)))
        throw InvariantError(where + "non-finite value");
      if (!(l.vs > 0.0)) throw InvariantError(where + "vs must be > 0");
      if (!(l.vp > l.vs)) throw InvariantError(where + "vp must exceed vs");
      if (!(l.rho > 0.0)) throw InvariantError(where + "rho must be > 0");
      const bool last = i + 1 == layers.size();
      if (!last && !(l.thickness_km > 0.0 && std::isfinite(l.thickness_km)))
        throw InvariantError(where + "thickness must be > 0");
      if (last && !std::isinf(l.thickness_km))
        throw InvariantError(where + "last layer must be a half-space");
    }
  }
};

/// Parses "thickness vp vs rho" lines; '#' starts a comment. The last layer is
/// the half-space (its thickness, conventionally 0, is ignored).
inline VelocityModel parse_velocity_model(const std::string& text, std::string id = "model") {
  VelocityModel model;
  model.id = std::move(id);
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::vector<double> values;
    std::string tok;
    while (fields >> tok) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ParseError(lineno, "not a number: '" + tok + "'");
      }
    }
    if (values.empty()) continue;
    if (values.size() != 4)
      throw ParseError(lineno, "expected 4 fields (thickness vp vs rho), got " +
                                   std::to_string(values.size()));
    model.layers.push_back({values[0], values[1], values[2], values[3]});
  }
  if (model.layers.empty()) throw ParseError(lineno, "no layers found");
  model.layers.back().thickness_km = std::numeric_limits<double>::infinity();
  model.validate();
  return model;
}

inline VelocityModel load_velocity_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open velocity model: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  std::string id = path;
  if (auto slash = id.find_last_of('/'); slash != std::string::npos) id = id.substr(slash + 1);
  return parse_velocity_model(ss.str(), id);
}

inline std::string format_velocity_model(const VelocityModel& model) {
  std::ostringstream out;
  out.precision(17);
  out << "# " << model.id << "\n";
  for (const Layer& l : model.layers) {
    out << (std::isinf(l.thickness_km) ? 0.0 : l.thickness_km) << ' ' << l.vp << ' ' << l.vs
        << ' ' << l.rho << '\n';
  }
  return out.str();
}

}  // namespace sourcenet
