#pragma once

// Experiment configuration document (JSON). Every section is optional and
// missing keys keep their defaults; unknown keys are an error.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "sourcenet/errors.hpp"
#include "sourcenet/nn/model.hpp"
#include "sourcenet/psdr.hpp"
#include "sourcenet/train.hpp"

namespace sourcenet {

struct RegionConfig {
  Interval lat{33.0, 35.0};
  Interval lon{-119.0, -116.0};
  Interval depth_km{2.0, 20.0};
  Interval mw{3.0, 5.0};
};

struct StationsConfig {
  std::string file;           // empty: bundled list
  std::size_t n_min = 30;     // sub-sample size range when more candidates exist
  std::size_t n_max = 50;
  double max_dist_km = 280.0;  // candidates beyond this are never used
};

struct GenConfig {
  std::size_t library_size = 17;
  std::string velocity_model;  // empty: bundled base model
  std::string noise_library;   // empty: synthesized from the seed
};

struct RunConfig {
  RegionConfig region;
  StationsConfig stations;
  PsdrConfig psdr;
  GenConfig gen;
  nn::ModelConfig model;
  TrainConfig pretrain = TrainConfig::defaults(Stage::Pretrain);
  TrainConfig finetune = TrainConfig::defaults(Stage::Finetune);
  WaveNorm wave_norm = WaveNorm::Global;
  std::uint64_t seed = 0;

  void validate() const {
    for (const auto* iv : {&region.lat, &region.lon, &region.depth_km, &region.mw})
      if (!iv->ordered()) throw ConfigError("region intervals must be ordered");
    if (region.depth_km.lo < 0.0) throw ConfigError("region depth must be >= 0");
    if (stations.n_min < 1 || stations.n_min > stations.n_max)
      throw ConfigError("stations: need 1 <= n_min <= n_max");
    if (gen.library_size < 1) throw ConfigError("gen.library_size must be >= 1");
    try {
      psdr.validate();
    } catch (const InvariantError& e) {
      throw ConfigError(std::string("psdr: ") + e.what());
    }
    model.validate();
    pretrain.validate();
    finetune.validate();
  }
};

namespace detail {

using Setter = std::function<void(const nlohmann::json&)>;

inline void apply_object(const nlohmann::json& j, const std::string& section,
                         const std::map<std::string, Setter>& fields) {
  if (!j.is_object()) throw ConfigError(section + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto f = fields.find(it.key());
    if (f == fields.end()) throw ConfigError(section + ": unknown key '" + it.key() + "'");
    try {
      f->second(it.value());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(section + ": bad value for '" + it.key() + "': " + e.what());
    }
  }
}

inline Interval interval_from(const nlohmann::json& v) {
  const auto a = v.get<std::array<double, 2>>();
  return {a[0], a[1]};
}

inline nlohmann::json interval_json(const Interval& iv) { return {iv.lo, iv.hi}; }

inline LossKind parse_loss(const std::string& s) {
  if (s == "focal_l1") return LossKind::FocalL1;
  if (s == "mse") return LossKind::Mse;
  throw ConfigError("unknown loss '" + s + "' (focal_l1|mse)");
}

inline const char* loss_name(LossKind k) { return k == LossKind::Mse ? "mse" : "focal_l1"; }

inline void train_from_json(const nlohmann::json& j, TrainConfig& c, const std::string& section) {
  apply_object(j, section,
               {{"lr", [&](const auto& v) { c.lr = v.template get<double>(); }},
                {"weight_decay", [&](const auto& v) { c.weight_decay = v.template get<double>(); }},
                {"batch", [&](const auto& v) { c.batch = v.template get<std::size_t>(); }},
                {"max_epochs", [&](const auto& v) { c.max_epochs = v.template get<std::size_t>(); }},
                {"patience", [&](const auto& v) { c.patience = v.template get<std::size_t>(); }},
                {"loss", [&](const auto& v) { c.loss = parse_loss(v.template get<std::string>()); }},
                {"focal_gamma", [&](const auto& v) { c.focal_gamma = v.template get<double>(); }},
                {"focal_beta", [&](const auto& v) { c.focal_beta = v.template get<double>(); }},
                {"split", [&](const auto& v) { c.split = v.template get<std::array<double, 3>>(); }},
                {"clip_norm", [&](const auto& v) { c.clip_norm = v.template get<double>(); }},
                {"weighted_sampling", [&](const auto& v) { c.weighted_sampling = v.template get<bool>(); }},
                {"sampler_bins", [&](const auto& v) { c.sampler_bins = v.template get<int>(); }}});
}

inline nlohmann::json train_to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"batch", c.batch},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"loss", loss_name(c.loss)},
          {"focal_gamma", c.focal_gamma},
          {"focal_beta", c.focal_beta},
          {"split", c.split},
          {"clip_norm", c.clip_norm},
          {"weighted_sampling", c.weighted_sampling},
          {"sampler_bins", c.sampler_bins}};
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  using detail::apply_object;
  using detail::interval_from;
  RunConfig c;
  apply_object(
      j, "config",
      {{"seed", [&](const auto& v) { c.seed = v.template get<std::uint64_t>(); }},
       {"wave_norm",
        [&](const auto& v) {
          const auto s = v.template get<std::string>();
          if (s == "global") c.wave_norm = WaveNorm::Global;
          else if (s == "event") c.wave_norm = WaveNorm::Event;
          else throw ConfigError("wave_norm must be 'global' or 'event'");
        }},
       {"region",
        [&](const auto& v) {
          apply_object(v, "region",
                       {{"lat", [&](const auto& x) { c.region.lat = interval_from(x); }},
                        {"lon", [&](const auto& x) { c.region.lon = interval_from(x); }},
                        {"depth_km", [&](const auto& x) { c.region.depth_km = interval_from(x); }},
                        {"mw", [&](const auto& x) { c.region.mw = interval_from(x); }}});
        }},
       {"stations",
        [&](const auto& v) {
          apply_object(v, "stations",
                       {{"file", [&](const auto& x) { c.stations.file = x.template get<std::string>(); }},
                        {"n_range",
                         [&](const auto& x) {
                           const auto a = x.template get<std::array<std::size_t, 2>>();
                           c.stations.n_min = a[0];
                           c.stations.n_max = a[1];
                         }},
                        {"max_dist_km", [&](const auto& x) { c.stations.max_dist_km = x.template get<double>(); }}});
        }},
       {"psdr",
        [&](const auto& v) {
          auto& p = c.psdr;
          apply_object(v, "psdr",
                       {{"time_shift_max", [&](const auto& x) { p.time_shift_max = x.template get<double>(); }},
                        {"amp_sigma", [&](const auto& x) { p.amp_sigma = x.template get<double>(); }},
                        {"coda_rel_amp", [&](const auto& x) { p.coda_rel_amp = interval_from(x); }},
                        {"coda_tau", [&](const auto& x) { p.coda_tau = interval_from(x); }},
                        {"snr_range", [&](const auto& x) { p.snr_range = interval_from(x); }},
                        {"keep_prob", [&](const auto& x) { p.keep_prob = interval_from(x); }},
                        {"min_stations", [&](const auto& x) { p.min_stations = x.template get<std::size_t>(); }},
                        {"model_library",
                         [&](const auto& x) { p.model_library = x.template get<std::vector<std::string>>(); }}});
        }},
       {"gen",
        [&](const auto& v) {
          apply_object(v, "gen",
                       {{"library_size", [&](const auto& x) { c.gen.library_size = x.template get<std::size_t>(); }},
                        {"velocity_model", [&](const auto& x) { c.gen.velocity_model = x.template get<std::string>(); }},
                        {"noise_library", [&](const auto& x) { c.gen.noise_library = x.template get<std::string>(); }}});
        }},
       {"model", [&](const auto& v) { c.model = v.template get<nn::ModelConfig>(); }},
       {"train",
        [&](const auto& v) {
          apply_object(v, "train",
                       {{"pretrain", [&](const auto& x) { detail::train_from_json(x, c.pretrain, "train.pretrain"); }},
                        {"finetune", [&](const auto& x) { detail::train_from_json(x, c.finetune, "train.finetune"); }}});
        }}});
  c.validate();
  return c;
}

inline nlohmann::json run_config_json(const RunConfig& c) {
  using detail::interval_json;
  return {{"seed", c.seed},
          {"wave_norm", c.wave_norm == WaveNorm::Event ? "event" : "global"},
          {"region",
           {{"lat", interval_json(c.region.lat)},
            {"lon", interval_json(c.region.lon)},
            {"depth_km", interval_json(c.region.depth_km)},
            {"mw", interval_json(c.region.mw)}}},
          {"stations",
           {{"file", c.stations.file},
            {"n_range", {c.stations.n_min, c.stations.n_max}},
            {"max_dist_km", c.stations.max_dist_km}}},
          {"psdr",
           {{"time_shift_max", c.psdr.time_shift_max},
            {"amp_sigma", c.psdr.amp_sigma},
            {"coda_rel_amp", interval_json(c.psdr.coda_rel_amp)},
            {"coda_tau", interval_json(c.psdr.coda_tau)},
            {"snr_range", interval_json(c.psdr.snr_range)},
            {"keep_prob", interval_json(c.psdr.keep_prob)},
            {"min_stations", c.psdr.min_stations},
            {"model_library", c.psdr.model_library}}},
          {"gen",
           {{"library_size", c.gen.library_size},
            {"velocity_model", c.gen.velocity_model},
            {"noise_library", c.gen.noise_library}}},
          {"model", c.model},
          {"train",
           {{"pretrain", detail::train_to_json(c.pretrain)},
            {"finetune", detail::train_to_json(c.finetune)}}}};
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("config " + path + ": " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace sourcenet
