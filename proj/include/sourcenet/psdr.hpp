#pragma once

// Physics-structured domain randomization: X_aug = M(T(S(y, phi)) + n).

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "sourcenet/dsp.hpp"
#include "sourcenet/errors.hpp"
#include "sourcenet/rng.hpp"
#include "sourcenet/simulate.hpp"
#include "sourcenet/velocity_model.hpp"

namespace sourcenet {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool ordered() const { return lo <= hi; }
};

struct PsdrConfig {
  double time_shift_max = 0.5;     // s
  double amp_sigma = 0.2;          // log-normal sigma
  Interval coda_rel_amp{0.1, 0.5};
  Interval coda_tau{1.0, 5.0};     // s
  Interval snr_range{2.0, 20.0};   // log-uniform; lo = +inf disables noise
  Interval keep_prob{0.6, 1.0};
  std::size_t min_stations = 5;
  std::vector<std::string> model_library;

  void validate() const {
    if (!(time_shift_max >= 0.0)) throw InvariantError("time_shift_max must be >= 0");
    if (!(amp_sigma >= 0.0)) throw InvariantError("amp_sigma must be >= 0");
    for (const auto* iv : {&coda_rel_amp, &coda_tau, &snr_range, &keep_prob})
      if (!iv->ordered()) throw InvariantError("PSDR interval is not ordered");
    if (keep_prob.lo < 0.0 || keep_prob.hi > 1.0)
      throw InvariantError("keep_prob must lie in [0, 1]");
    if (coda_rel_amp.lo < 0.0) throw InvariantError("coda_rel_amp must be >= 0");
    if (min_stations < 1) throw InvariantError("min_stations must be >= 1");
  }

  /// Configuration under which every operator is the identity.
  static PsdrConfig identity() {
    PsdrConfig c;
    c.time_shift_max = 0.0;
    c.amp_sigma = 0.0;
    c.coda_rel_amp = {0.0, 0.0};
    c.snr_range = {std::numeric_limits<double>::infinity(),
                   std::numeric_limits<double>::infinity()};
    c.keep_prob = {1.0, 1.0};
    return c;
  }
};

// ---------------------------------------------------------------------------
// Earth structure

/// Library of n models: the base plus n-1 perturbations (vp, vs by up to
/// +/-vel_frac, thicknesses by up to +/-thick_frac, vp > vs kept).
inline std::vector<VelocityModel> build_model_library(const VelocityModel& base, std::size_t n,
                                                      Rng& rng, double vel_frac = 0.08,
                                                      double thick_frac = 0.15,
                                                      const std::string& tag = "lib") {
  base.validate();
  std::vector<VelocityModel> lib;
  lib.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    VelocityModel m = base;
    char suffix[32];
    std::snprintf(suffix, sizeof suffix, "#%s%02zu", tag.c_str(), i);
    m.id = base.id + suffix;
    if (i > 0) {
      for (std::size_t k = 0; k < m.layers.size(); ++k) {
        Layer& l = m.layers[k];
        const Layer& b = base.layers[k];
        do {
          l.vp = b.vp * (1.0 + uniform(rng, -vel_frac, vel_frac));
          l.vs = b.vs * (1.0 + uniform(rng, -vel_frac, vel_frac));
        } while (!(l.vp > l.vs));
        if (k + 1 < m.layers.size())
          l.thickness_km = b.thickness_km * (1.0 + uniform(rng, -thick_frac, thick_frac));
      }
    }
    m.validate();
    lib.push_back(std::move(m));
  }
  return lib;
}

// ---------------------------------------------------------------------------
// Noise library

/// Shape of the synthetic ambient-noise spectrum: 1/f (floored at f_floor)
/// plus a Gaussian microseism bump.
struct NoiseSpectrum {
  double f_floor_hz = 0.05;
  double bump_hz = 0.2;
  double bump_width_hz = 0.05;
  double bump_gain = 20.0;

  double psd(double f) const {
    const double d = (f - bump_hz) / bump_width_hz;
    return 1.0 / std::max(f, f_floor_hz) + bump_gain * std::exp(-0.5 * d * d);
  }
};

struct NoiseLibrary {
  double rate = kSampleRate;
  std::vector<Trace> records;
  NoiseSpectrum spectrum;
};

struct NoiseLibraryConfig {
  std::size_t n_records = 32;
  std::size_t length = 2048;
  double rate = kSampleRate;
  NoiseSpectrum spectrum;
};

/// Gaussian noise with the configured spectrum, unit RMS per component.
inline NoiseLibrary build_noise_library(const NoiseLibraryConfig& cfg, Rng& rng) {
  NoiseLibrary lib;
  lib.rate = cfg.rate;
  lib.spectrum = cfg.spectrum;
  const std::size_t n = cfg.length;
  for (std::size_t r = 0; r < cfg.n_records; ++r) {
    Trace t = Trace::zeros(n, cfg.rate);
    for (auto& comp : t.comp) {
      std::vector<std::complex<double>> half(n / 2 + 1, 0.0);
      for (std::size_t k = 1; k < half.size(); ++k) {
        const double f = static_cast<double>(k) * cfg.rate / static_cast<double>(n);
        const double a = std::sqrt(cfg.spectrum.psd(f));
        const double re = standard_normal(rng), im = standard_normal(rng);
        half[k] = {a * re, (n % 2 == 0 && k == n / 2) ? 0.0 : a * im};
      }
      comp = dsp::irfft(half, n);
      double ss = 0.0;
      for (double v : comp) ss += v * v;
      const double rms = std::sqrt(ss / static_cast<double>(n));
      for (double& v : comp) v /= rms;
    }
    lib.records.push_back(std::move(t));
  }
  return lib;
}

// ---------------------------------------------------------------------------
// Distortion T

namespace detail {

inline void shift_samples(std::vector<double>& x, long shift) {
  if (shift == 0) return;
  const long n = static_cast<long>(x.size());
  std::vector<double> y(x.size(), 0.0);
  for (long i = 0; i < n; ++i) {
    const long j = i - shift;
    if (j >= 0 && j < n) y[i] = x[j];
  }
  x = std::move(y);
}

/// Unit-RMS band-limited white noise of length n.
inline std::vector<double> band_limited_noise(std::size_t n, double rate, Rng& rng) {
  std::vector<double> w(n);
  for (double& v : w) v = standard_normal(rng);
  if (n < dsp::kMinFilterLength) return w;
  auto y = dsp::bandpass(w, 0.2, std::min(4.0, 0.45 * rate), rate);
  double ss = 0.0;
  for (double v : y) ss += v * v;
  const double rms = std::sqrt(ss / static_cast<double>(n));
  if (rms > 0.0)
    for (double& v : y) v /= rms;
  return y;
}

inline void add_coda(Trace& tr, double arrival_s, double rel_amp, double tau, Rng& rng) {
  const long n = static_cast<long>(tr.length());
  const auto i0 = std::clamp<long>(std::lround(arrival_s * tr.rate), 0, n);
  const auto i1 = std::clamp<long>(i0 + std::lround(3.0 * tr.rate), 0, n);
  double local_peak = 0.0;
  for (const auto& c : tr.comp)
    for (long i = i0; i < i1; ++i) local_peak = std::max(local_peak, std::abs(c[i]));
  for (auto& c : tr.comp) {
    const auto eta = band_limited_noise(static_cast<std::size_t>(n - i0), tr.rate, rng);
    for (long i = i0; i < n; ++i) {
      const double t = static_cast<double>(i - i0) / tr.rate;
      c[i] += rel_amp * local_peak * eta[i - i0] * std::exp(-t / tau);
    }
  }
}

}  // namespace detail

/// Stochastic time shift, amplification and scattering coda.
inline Trace distort(const Trace& in, const PsdrConfig& cfg, Rng& rng) {
  Trace tr = in;
  const double u = uniform(rng, -cfg.time_shift_max, cfg.time_shift_max);
  const double gain = std::exp(cfg.amp_sigma * standard_normal(rng));
  const long shift = std::lround(u * tr.rate);
  for (auto& c : tr.comp) {
    detail::shift_samples(c, shift);
    for (double& v : c) v *= gain;
  }
  const double dt = static_cast<double>(shift) / tr.rate;
  tr.p_pick += dt;
  tr.s_pick += dt;
  for (const double arrival : {tr.p_pick, tr.s_pick}) {
    const double a = uniform(rng, cfg.coda_rel_amp.lo, cfg.coda_rel_amp.hi);
    const double tau = uniform(rng, cfg.coda_tau.lo, cfg.coda_tau.hi);
    if (a > 0.0 && tau > 0.0) detail::add_coda(tr, arrival, a, tau, rng);
  }
  return tr;
}

// ---------------------------------------------------------------------------
// Noise n

struct NoiseDraw {
  Trace noise;  // same length as the signal; zero when noise is disabled
  double snr = std::numeric_limits<double>::infinity();
};

/// Noise segment scaled so that (signal peak) / (noise RMS) equals an SNR
/// drawn log-uniformly from snr_range.
inline NoiseDraw draw_noise(const Trace& signal, const NoiseLibrary& lib, Rng& rng,
                            const Interval& snr_range) {
  NoiseDraw d;
  d.noise = Trace::zeros(signal.length(), signal.rate);
  if (!std::isfinite(snr_range.lo)) return d;
  if (lib.records.empty()) throw NoiseTooShort("noise library is empty");
  d.snr = std::exp(uniform(rng, std::log(snr_range.lo), std::log(snr_range.hi)));
  const Trace& rec = lib.records[uniform_index(rng, lib.records.size())];
  if (rec.length() < signal.length())
    throw NoiseTooShort("noise record of " + std::to_string(rec.length()) +
                        " samples is shorter than the trace (" +
                        std::to_string(signal.length()) + ")");
  const std::size_t off = uniform_index(rng, rec.length() - signal.length() + 1);
  double ss = 0.0;
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < signal.length(); ++i) {
      const double v = rec.comp[c][off + i];
      d.noise.comp[c][i] = v;
      ss += v * v;
    }
  const double rms = std::sqrt(ss / (3.0 * static_cast<double>(signal.length())));
  const double scale = rms > 0.0 ? signal.peak() / (d.snr * rms) : 0.0;
  for (auto& c : d.noise.comp)
    for (double& v : c) v *= scale;
  return d;
}

inline std::pair<Trace, double> inject_noise(const Trace& signal, const NoiseLibrary& lib,
                                             Rng& rng, const Interval& snr_range) {
  NoiseDraw d = draw_noise(signal, lib, rng, snr_range);
  if (!std::isfinite(d.snr)) return {signal, d.snr};
  Trace out = signal;
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < out.length(); ++i) out.comp[c][i] += d.noise.comp[c][i];
  return {out, d.snr};
}

// ---------------------------------------------------------------------------
// Masking M

/// Bernoulli station dropout with a per-event keep probability; the floor of
/// min_stations is restored from the dropped stations with the highest scores.
inline SyntheticEvent dropout_stations(const SyntheticEvent& ev, const PsdrConfig& cfg,
                                       Rng& rng) {
  if (ev.stations.size() < cfg.min_stations)
    throw TooFewStations("event has " + std::to_string(ev.stations.size()) +
                         " stations, fewer than min_stations=" +
                         std::to_string(cfg.min_stations));
  const double keep = uniform(rng, cfg.keep_prob.lo, cfg.keep_prob.hi);
  const std::size_t n = ev.stations.size();
  std::vector<double> score(n);
  std::vector<char> kept(n);
  std::size_t n_kept = 0;
  for (std::size_t i = 0; i < n; ++i) {
    score[i] = uniform01(rng);
    kept[i] = score[i] < keep;
    n_kept += kept[i];
  }
  if (n_kept < cfg.min_stations) {
    std::vector<std::size_t> dropped;
    for (std::size_t i = 0; i < n; ++i)
      if (!kept[i]) dropped.push_back(i);
    std::stable_sort(dropped.begin(), dropped.end(),
                     [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
    for (std::size_t k = 0; n_kept < cfg.min_stations; ++k, ++n_kept) kept[dropped[k]] = 1;
  }
  SyntheticEvent out = ev;
  out.stations.clear();
  for (std::size_t i = 0; i < n; ++i)
    if (kept[i]) out.stations.push_back(ev.stations[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Composition

/// distort -> inject_noise -> dropout_stations; the label is never touched.
inline SyntheticEvent augment_event(const SyntheticEvent& ev, const PsdrConfig& cfg,
                                    const NoiseLibrary& lib, Rng& rng) {
  SyntheticEvent out = ev;
  for (auto& st : out.stations) {
    Trace t = distort(st.trace, cfg, rng);
    st.trace = inject_noise(t, lib, rng, cfg.snr_range).first;
  }
  return dropout_stations(out, cfg, rng);
}

struct PseudoRealParams {
  MomentTensor mt;
  EventGeom geom;
  std::vector<StationGeom> stations;
  VelocityModel base;
  PsdrConfig psdr;
  const NoiseLibrary* noise = nullptr;
  SimConfig sim;
  std::string tag = "pr";
};

/// Perturbation and noise settings that separate the pseudo-real domain from
/// the training library.
struct PseudoRealShift {
  double velocity_frac = 0.15;
  double coda_factor = 2.0;
  Interval snr_range{1.0, 10.0};
};

/// Event from a velocity model outside the training library, with doubled
/// coda amplitudes and lower SNR.
inline SyntheticEvent make_pseudo_real(const PseudoRealParams& p, Rng& rng,
                                       const PseudoRealShift& shift = {}) {
  // One perturbed model per event; index 1 of a 2-model library is the
  // perturbed member.
  auto lib = build_model_library(p.base, 2, rng, shift.velocity_frac, shift.velocity_frac,
                                 p.tag);
  VelocityModel model = std::move(lib[1]);
  SyntheticEvent ev = simulate_event(p.mt, p.geom, p.stations, model, p.sim).event;
  PsdrConfig cfg = p.psdr;
  cfg.coda_rel_amp = {cfg.coda_rel_amp.lo * shift.coda_factor,
                      cfg.coda_rel_amp.hi * shift.coda_factor};
  cfg.snr_range = shift.snr_range;
  static const NoiseLibrary kEmpty;
  if (p.noise == nullptr) cfg.snr_range = PsdrConfig::identity().snr_range;
  ev = augment_event(ev, cfg, p.noise ? *p.noise : kEmpty, rng);
  ev.domain = Domain::PseudoReal;
  return ev;
}

}  // namespace sourcenet
