#pragma once

// Butterworth band-pass design and real FFT helpers.

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <span>
#include <vector>

#include "sourcenet/errors.hpp"

namespace sourcenet::dsp {

/// One second-order section, a0 normalized to 1.
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;
};

/// Cascade of second-order sections.
struct SosFilter {
  std::vector<Biquad> sections;
  double gain = 1.0;

  /// Complex response at normalized angular frequency w (rad/sample).
  std::complex<double> response(double w) const {
    const std::complex<double> z1 = std::polar(1.0, -w), z2 = z1 * z1;
    std::complex<double> h = gain;
    for (const Biquad& s : sections)
      h *= (s.b0 + s.b1 * z1 + s.b2 * z2) / (1.0 + s.a1 * z1 + s.a2 * z2);
    return h;
  }

  /// Causal (forward-only) filtering, transposed direct form II.
  std::vector<double> apply(std::span<const double> x) const {
    std::vector<double> y(x.begin(), x.end());
    for (std::size_t i = 0; i < sections.size(); ++i) {
      const Biquad& s = sections[i];
      const double g = i == 0 ? gain : 1.0;
      double z1 = 0.0, z2 = 0.0;
      for (double& v : y) {
        const double in = g * v;
        const double out = s.b0 * in + z1;
        z1 = s.b1 * in - s.a1 * out + z2;
        z2 = s.b2 * in - s.a2 * out;
        v = out;
      }
    }
    return y;
  }
};

/// Digital Butterworth band-pass from an analog prototype of the given order
/// (2*order poles), via prewarped bilinear transform. Unit gain at the
/// geometric centre of the band.
inline SosFilter butterworth_bandpass(int order, double lo_hz, double hi_hz, double rate_hz) {
  using cd = std::complex<double>;
  const double pi = std::numbers::pi;
  const double fs2 = 2.0 * rate_hz;
  const double w1 = fs2 * std::tan(pi * lo_hz / rate_hz);
  const double w2 = fs2 * std::tan(pi * hi_hz / rate_hz);
  const double w0 = std::sqrt(w1 * w2);
  const double bw = w2 - w1;

  SosFilter f;
  for (int k = 0; k < order; ++k) {
    const cd proto = std::polar(1.0, pi * (2.0 * k + order + 1) / (2.0 * order));
    const cd half = proto * bw / 2.0;
    const cd disc = std::sqrt(half * half - w0 * w0);
    for (const cd s : {half + disc, half - disc}) {
      const cd z = (fs2 + s) / (fs2 - s);
      if (z.imag() <= 0.0) continue;  // keep one of each conjugate pair
      Biquad b;
      b.b0 = 1.0;
      b.b1 = 0.0;
      b.b2 = -1.0;  // zeros at z = +1 and z = -1
      b.a1 = -2.0 * z.real();
      b.a2 = std::norm(z);
      f.sections.push_back(b);
    }
  }
  const double wc = 2.0 * std::atan(w0 / fs2);
  f.gain = 1.0 / std::abs(f.response(wc));
  return f;
}

inline constexpr double kBandLoHz = 0.1;
inline constexpr double kBandHiHz = 2.0;
inline constexpr std::size_t kMinFilterLength = 64;

/// Causal 4th-order Butterworth band-pass (default 0.1-2.0 Hz at 20 Hz).
inline std::vector<double> bandpass(std::span<const double> x, double lo = kBandLoHz,
                                    double hi = kBandHiHz, double rate = 20.0) {
  if (x.size() < kMinFilterLength)
    throw TooShort("band-pass input needs at least 64 samples, got " + std::to_string(x.size()));
  thread_local SosFilter cached;
  thread_local double key[3] = {-1, -1, -1};
  if (key[0] != lo || key[1] != hi || key[2] != rate) {
    cached = butterworth_bandpass(4, lo, hi, rate);
    key[0] = lo;
    key[1] = hi;
    key[2] = rate;
  }
  return cached.apply(x);
}

/// Magnitudes of the real DFT, bins 0..n/2.
inline std::vector<double> rfft_magnitude(std::span<const double> x) {
  thread_local Eigen::FFT<double> fft;
  std::vector<double> in(x.begin(), x.end());
  std::vector<std::complex<double>> out;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  fft.fwd(out, in);
  std::vector<double> mag(x.size() / 2 + 1);
  for (std::size_t k = 0; k < mag.size(); ++k) mag[k] = std::abs(out[k]);
  return mag;
}

/// Real signal from a half spectrum (bins 0..n/2) of a length-n sequence.
inline std::vector<double> irfft(const std::vector<std::complex<double>>& half, std::size_t n) {
  thread_local Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> out;
  std::vector<std::complex<double>> in = half;
  fft.inv(out, in, static_cast<Eigen::Index>(n));
  return out;
}

/// Linear resampling of `x` onto `n` points spanning the same support.
inline std::vector<double> resample_linear(std::span<const double> x, std::size_t n) {
  std::vector<double> y(n, 0.0);
  if (x.empty()) return y;
  if (x.size() == 1 || n == 1) {
    std::fill(y.begin(), y.end(), x[0]);
    return y;
  }
  const double step = static_cast<double>(x.size() - 1) / static_cast<double>(n - 1);
  for (std::size_t j = 0; j < n; ++j) {
    const double pos = step * static_cast<double>(j);
    const auto i = std::min(static_cast<std::size_t>(pos), x.size() - 2);
    const double frac = pos - static_cast<double>(i);
    y[j] = (1.0 - frac) * x[i] + frac * x[i + 1];
  }
  return y;
}

}  // namespace sourcenet::dsp
