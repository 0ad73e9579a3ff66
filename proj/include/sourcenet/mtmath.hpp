#pragma once

// Moment-tensor algebra in north-east-down coordinates.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "sourcenet/errors.hpp"
#include "sourcenet/rng.hpp"

namespace sourcenet {

inline constexpr double kDeg = std::numbers::pi / 180.0;

/// Symmetric 3x3 moment tensor, N·m. Component order: xx, yy, zz, xy, xz, yz
/// with x = north, y = east, z = down.
struct MomentTensor {
  std::array<double, 6> m{};

  double xx() const { return m[0]; }
  double yy() const { return m[1]; }
  double zz() const { return m[2]; }
  double xy() const { return m[3]; }
  double xz() const { return m[4]; }
  double yz() const { return m[5]; }

  Eigen::Matrix3d matrix() const {
    Eigen::Matrix3d a;
    a << m[0], m[3], m[4],
         m[3], m[1], m[5],
         m[4], m[5], m[2];
    return a;
  }

  static MomentTensor from_matrix(const Eigen::Matrix3d& a) {
    return {{a(0, 0), a(1, 1), a(2, 2), 0.5 * (a(0, 1) + a(1, 0)),
             0.5 * (a(0, 2) + a(2, 0)), 0.5 * (a(1, 2) + a(2, 1))}};
  }

  double trace() const { return m[0] + m[1] + m[2]; }

  double frobenius() const {
    return std::sqrt(m[0] * m[0] + m[1] * m[1] + m[2] * m[2] +
                     2.0 * (m[3] * m[3] + m[4] * m[4] + m[5] * m[5]));
  }

  MomentTensor deviatoric() const {
    const double t = trace() / 3.0;
    return {{m[0] - t, m[1] - t, m[2] - t, m[3], m[4], m[5]}};
  }

  MomentTensor scaled(double s) const {
    MomentTensor out = *this;
    for (auto& v : out.m) v *= s;
    return out;
  }
};

/// Strike/dip/rake in degrees; scalar moment in N·m.
struct DoubleCouple {
  double strike = 0.0;
  double dip = 0.0;
  double rake = 0.0;
  double m0 = 1.0;
};

/// Regression target: unit-Frobenius deviatoric components (xx, yy, xy, xz, yz)
/// and moment magnitude.
struct SourceLabel {
  std::array<double, 5> dev{};
  double mw = 0.0;

  std::array<double, 6> as_array() const {
    return {dev[0], dev[1], dev[2], dev[3], dev[4], mw};
  }
  static SourceLabel from_array(const std::array<double, 6>& y) {
    return {{y[0], y[1], y[2], y[3], y[4]}, y[5]};
  }
};

inline double moment_to_mw(double m0) { return (2.0 / 3.0) * (std::log10(m0) - 9.1); }
inline double mw_to_moment(double mw) { return std::pow(10.0, 1.5 * mw + 9.1); }

/// Scalar moment of a general tensor: ||M_dev||_F / sqrt(2).
inline double scalar_moment(const MomentTensor& mt) {
  return mt.deviatoric().frobenius() / std::numbers::sqrt2;
}

/// Aki & Richards double-couple conversion.
inline MomentTensor sdr_to_mt(const DoubleCouple& dc) {
  const double phi = dc.strike * kDeg;
  const double delta = dc.dip * kDeg;
  const double lambda = dc.rake * kDeg;
  const double sd = std::sin(delta), cd = std::cos(delta);
  const double s2d = std::sin(2 * delta), c2d = std::cos(2 * delta);
  const double sl = std::sin(lambda), cl = std::cos(lambda);
  const double sp = std::sin(phi), cp = std::cos(phi);
  const double s2p = std::sin(2 * phi), c2p = std::cos(2 * phi);
  const double m0 = dc.m0;

  MomentTensor mt;
  mt.m[0] = -m0 * (sd * cl * s2p + s2d * sl * sp * sp);
  mt.m[1] = m0 * (sd * cl * s2p - s2d * sl * cp * cp);
  mt.m[3] = m0 * (sd * cl * c2p + 0.5 * s2d * sl * s2p);
  mt.m[4] = -m0 * (cd * cl * cp + c2d * sl * sp);
  mt.m[5] = -m0 * (cd * cl * sp - c2d * sl * cp);
  // Exact zero trace regardless of rounding in the other components.
  mt.m[2] = -(mt.m[0] + mt.m[1]);
  return mt;
}

inline SourceLabel mt_to_label(const MomentTensor& mt) {
  const double full = mt.frobenius();
  if (!(full > 0.0)) throw ZeroTensor("moment tensor has zero norm");
  const MomentTensor dev = mt.deviatoric();
  const double norm = dev.frobenius();
  if (!(norm > 1e-12 * full)) throw ZeroTensor("deviatoric part is zero");
  SourceLabel label;
  label.dev = {dev.m[0] / norm, dev.m[1] / norm, dev.m[3] / norm, dev.m[4] / norm,
               dev.m[5] / norm};
  label.mw = moment_to_mw(norm / std::numbers::sqrt2);
  return label;
}

/// Inverse of mt_to_label. The dev components need not be unit norm (network
/// outputs are not); they are renormalized before scaling by the moment.
inline MomentTensor label_to_mt(const SourceLabel& label) {
  const auto& d = label.dev;
  MomentTensor unit{{d[0], d[1], -(d[0] + d[1]), d[2], d[3], d[4]}};
  const double norm = unit.frobenius();
  if (!(norm > 0.0) || !std::isfinite(norm)) throw ZeroTensor("label has zero deviatoric part");
  const double m0 = mw_to_moment(label.mw);
  return unit.scaled(std::numbers::sqrt2 * m0 / norm);
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
inline Eigen::Matrix3d quaternion_rotation(double w, double x, double y, double z) {
  return Eigen::Quaterniond(w, x, y, z).normalized().toRotationMatrix();
}

/// Double couple with Haar-uniform orientation and Mw uniform on [mw_lo, mw_hi].
inline MomentTensor sample_uniform_dc(Rng& rng, double mw_lo, double mw_hi) {
  // Shoemake's uniform random unit quaternion.
  const double u1 = uniform01(rng), u2 = uniform01(rng), u3 = uniform01(rng);
  const double two_pi = 2.0 * std::numbers::pi;
  const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
  const Eigen::Matrix3d rot = quaternion_rotation(
      b * std::cos(two_pi * u3), a * std::sin(two_pi * u2), a * std::cos(two_pi * u2),
      b * std::sin(two_pi * u3));
  const double mw = uniform(rng, mw_lo, mw_hi);
  Eigen::Matrix3d ref = Eigen::Matrix3d::Zero();
  ref(0, 1) = ref(1, 0) = mw_to_moment(mw);
  return MomentTensor::from_matrix(rot * ref * rot.transpose());
}

/// Right-handed principal-axis frame, columns (T, B, P).
inline Eigen::Matrix3d principal_frame(const MomentTensor& mt) {
  const Eigen::Matrix3d a = mt.matrix();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(a);
  const Eigen::Vector3d ev = es.eigenvalues();  // ascending
  const double scale = a.norm();
  const double tol = 1e-9 * scale;
  if (!(scale > 0.0) || ev(1) - ev(0) <= tol || ev(2) - ev(1) <= tol) {
    throw DegenerateTensor("principal axes are not separable");
  }
  const Eigen::Vector3d p = es.eigenvectors().col(0);
  const Eigen::Vector3d t = es.eigenvectors().col(2);
  Eigen::Matrix3d frame;
  frame.col(0) = t;
  frame.col(1) = p.cross(t);
  frame.col(2) = p;
  return frame;
}

/// Kagan angle in degrees: the smallest rotation taking one double-couple
/// orientation onto the other, in [0, 120].
inline double kagan_angle(const MomentTensor& a, const MomentTensor& b) {
  const Eigen::Matrix3d ra = principal_frame(a);
  const Eigen::Matrix3d rb = principal_frame(b);
  const Eigen::Quaterniond q(Eigen::Matrix3d(ra.transpose() * rb));
  // Composition with the 180° symmetry rotations about T, B, P permutes the
  // quaternion components, so the minimum angle uses the largest one.
  const double c = std::max({std::abs(q.w()), std::abs(q.x()), std::abs(q.y()),
                             std::abs(q.z())});
  return 2.0 * std::acos(std::clamp(c / q.norm(), -1.0, 1.0)) / kDeg;
}

struct Radiation {
  double p_amp = 0.0;
  Eigen::Vector3d s_vec = Eigen::Vector3d::Zero();
};

/// Far-field radiation for a unit ray direction (NED).
inline Radiation radiation(const MomentTensor& mt, const Eigen::Vector3d& ray) {
  const Eigen::Vector3d m_ray = mt.matrix() * ray;
  Radiation r;
  r.p_amp = ray.dot(m_ray);
  r.s_vec = m_ray - r.p_amp * ray;
  return r;
}

/// Unit ray direction (NED) for takeoff angle (from downward vertical) and azimuth.
inline Eigen::Vector3d ray_direction(double takeoff_deg, double azimuth_deg) {
  const double th = takeoff_deg * kDeg, ph = azimuth_deg * kDeg;
  return {std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th)};
}

}  // namespace sourcenet
