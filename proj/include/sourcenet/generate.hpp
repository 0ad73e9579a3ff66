#pragma once

// Dataset generation: mechanism, geometry and station sampling, simulation,
// augmentation and feature extraction per event, with per-event RNG streams so
// serial and threaded runs produce identical records.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "sourcenet/config.hpp"
#include "sourcenet/errors.hpp"
#include "sourcenet/features.hpp"
#include "sourcenet/psdr.hpp"
#include "sourcenet/rng.hpp"
#include "sourcenet/simulate.hpp"

namespace sourcenet {

/// "name lat lon" per line; '#' starts a comment.
inline std::vector<StationGeom> parse_stations(const std::string& text) {
  std::vector<StationGeom> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream f(line);
    StationGeom s;
    if (!(f >> s.name)) continue;
    std::string extra;
    if (!(f >> s.lat >> s.lon) || (f >> extra))
      throw ParseError(lineno, "expected 'name lat lon'");
    if (std::abs(s.lat) > 90.0 || std::abs(s.lon) > 360.0) throw ParseError(lineno, "coordinates out of range");
    out.push_back(std::move(s));
  }
  if (out.empty()) throw ParseError(lineno, "no stations found");
  return out;
}

inline std::vector<StationGeom> load_stations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open station list: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_stations(ss.str());
}

/// Everything shared by the events of one generation run.
struct GenContext {
  RunConfig cfg;
  std::vector<StationGeom> stations;
  VelocityModel base;
  std::vector<VelocityModel> library;  // training library (synthetic domain)
  NoiseLibrary noise;
};

/// Builds the velocity-model library (restricted to psdr.model_library ids
/// when given) from the run seed.
inline std::vector<VelocityModel> training_library(const RunConfig& cfg, const VelocityModel& base) {
  Rng rng = make_rng(cfg.seed, {0x11b});
  auto lib = build_model_library(base, cfg.gen.library_size, rng);
  if (cfg.psdr.model_library.empty()) return lib;
  std::vector<VelocityModel> out;
  for (const auto& id : cfg.psdr.model_library) {
    auto it = std::find_if(lib.begin(), lib.end(), [&](const VelocityModel& m) { return m.id == id; });
    if (it == lib.end()) throw ConfigError("psdr.model_library: unknown model id '" + id + "'");
    out.push_back(*it);
  }
  return out;
}

inline NoiseLibrary synthetic_noise(std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x401});
  return build_noise_library({}, rng);
}

struct GenStats {
  std::size_t events = 0;
  std::size_t attempts = 0;
  std::size_t failures = 0;
  std::map<std::size_t, std::size_t> station_hist;  // station count -> events
};

inline constexpr int kMaxAttempts = 5;

namespace detail {

inline std::vector<StationGeom> candidate_stations(const GenContext& ctx, const EventGeom& geom, Rng& rng) {
  std::vector<StationGeom> near;
  for (const auto& s : ctx.stations)
    if (geo_to_local(geom, s).dist_km <= ctx.cfg.stations.max_dist_km) near.push_back(s);
  // Superset large enough that station dropout still leaves n_max on average.
  const double keep_lo = ctx.cfg.psdr.keep_prob.lo;
  const auto want = keep_lo > 0.0
                        ? static_cast<std::size_t>(std::ceil(static_cast<double>(ctx.cfg.stations.n_max) / keep_lo))
                        : near.size();
  shuffle(near, rng);
  if (near.size() > want) near.resize(want);
  return near;
}

/// Keeps a random n_min..n_max subset when more stations survive.
inline void subsample(SyntheticEvent& ev, const StationsConfig& sc, Rng& rng) {
  if (ev.stations.size() <= sc.n_max) return;
  const std::size_t n = sc.n_min + uniform_index(rng, sc.n_max - sc.n_min + 1);
  std::vector<std::size_t> idx(ev.stations.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  shuffle(idx, rng);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  std::vector<StationRecord> kept;
  for (auto i : idx) kept.push_back(std::move(ev.stations[i]));
  ev.stations = std::move(kept);
}

inline std::uint64_t domain_key(Domain d) { return 0xd0 + static_cast<std::uint64_t>(d); }

}  // namespace detail

inline std::string event_id(Domain d, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%06zu", d == Domain::PseudoReal ? "pr" : "syn", index);
  return buf;
}

/// One event; attempt-indexed stream so retries are reproducible.
inline EventRecord generate_event(const GenContext& ctx, Domain domain, std::size_t index, int attempt) {
  const RunConfig& c = ctx.cfg;
  Rng rng = make_rng(c.seed, {detail::domain_key(domain), index, static_cast<std::uint64_t>(attempt)});
  const MomentTensor mt = sample_uniform_dc(rng, c.region.mw.lo, c.region.mw.hi);
  EventGeom geom;
  geom.lat = uniform(rng, c.region.lat.lo, c.region.lat.hi);
  geom.lon = uniform(rng, c.region.lon.lo, c.region.lon.hi);
  geom.depth_km = uniform(rng, c.region.depth_km.lo, c.region.depth_km.hi);
  auto stations = detail::candidate_stations(ctx, geom, rng);
  if (stations.size() < c.psdr.min_stations)
    throw TooFewStations("only " + std::to_string(stations.size()) + " stations in range");

  SyntheticEvent ev;
  if (domain == Domain::PseudoReal) {
    PseudoRealParams p{mt, geom, stations, ctx.base, c.psdr, &ctx.noise, {}, "pr"};
    ev = make_pseudo_real(p, rng);
  } else {
    const VelocityModel& model = ctx.library[uniform_index(rng, ctx.library.size())];
    ev = simulate_event(mt, geom, stations, model).event;
    ev = augment_event(ev, c.psdr, ctx.noise, rng);
  }
  detail::subsample(ev, c.stations, rng);
  return extract_event(ev, event_id(domain, index));
}

/// n events; `threads` > 1 splits indices across workers, results are merged
/// in index order. Throws SimulationFailed when more than 10% of attempts fail.
inline std::vector<EventRecord> generate_dataset(const GenContext& ctx, std::size_t n, Domain domain,
                                                 unsigned threads = 1, GenStats* stats = nullptr) {
  std::vector<EventRecord> out(n);
  std::vector<int> fails(n, 0);
  std::vector<char> ok(n, 0);
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        for (int a = 0; a < kMaxAttempts; ++a) {
          try {
            out[i] = generate_event(ctx, domain, i, a);
            ok[i] = 1;
            break;
          } catch (const NoStations&) {
          } catch (const TooFewStations&) {
          } catch (const NoRay&) {
          }
          ++fails[i];
        }
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!err) err = std::current_exception();
        next = n;
      }
    }
  };
  threads = std::max(1u, threads);
  if (threads == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work);
  }
  if (err) std::rethrow_exception(err);
  GenStats st;
  st.events = n;
  for (std::size_t i = 0; i < n; ++i) {
    st.failures += static_cast<std::size_t>(fails[i]);
    st.attempts += static_cast<std::size_t>(fails[i]) + (ok[i] ? 1 : 0);
    if (ok[i]) ++st.station_hist[out[i].stations.size()];
  }
  if (stats) *stats = st;
  const bool all_ok = std::all_of(ok.begin(), ok.end(), [](char c) { return c != 0; });
  if (!all_ok || 10 * st.failures > st.attempts)
    throw SimulationFailed("simulation failed for " + std::to_string(st.failures) + " of " +
                           std::to_string(st.attempts) + " attempts");
  return out;
}

}  // namespace sourcenet
