#pragma once

// Test-only Kagan oracle: principal frames from a general (non-symmetric)
// eigen solver and an explicit minimum over every frame relabelling that maps
// a double couple onto itself.

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "sourcenet/mtmath.hpp"

namespace testing_oracle {

/// Columns T, B, P (largest, middle, smallest eigenvalue), right-handed.
inline Eigen::Matrix3d frame_tbp(const sourcenet::MomentTensor& mt) {
  Eigen::EigenSolver<Eigen::Matrix3d> es(mt.matrix());
  std::array<int, 3> order{0, 1, 2};
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return es.eigenvalues()(a).real() > es.eigenvalues()(b).real(); });
  Eigen::Matrix3d f;
  for (int k = 0; k < 3; ++k) f.col(k) = es.eigenvectors().col(order[k]).real().normalized();
  if (f.determinant() < 0) f.col(1) = -f.col(1);
  return f;
}

inline double rotation_angle_deg(const Eigen::Matrix3d& r) {
  const double c = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

/// Minimum over the sign flips of the frame axes that keep it right-handed
/// (the double-couple symmetry group) of the rotation taking frame a to b.
inline double kagan_brute(const sourcenet::MomentTensor& a, const sourcenet::MomentTensor& b) {
  const Eigen::Matrix3d fa = frame_tbp(a), fb = frame_tbp(b);
  double best = std::numeric_limits<double>::infinity();
  for (int sx : {-1, 1})
    for (int sy : {-1, 1})
      for (int sz : {-1, 1}) {
        if (sx * sy * sz != 1) continue;
        const Eigen::Matrix3d s = Eigen::Vector3d(sx, sy, sz).asDiagonal();
        best = std::min(best, rotation_angle_deg(fb * s * fa.transpose()));
      }
  return best;
}

/// Mean minimum rotation between two independent Haar-random double couples.
/// Relative to one of them the other is a Haar-random rotation q, and the
/// symmetry group holds the identity and half turns about the three principal
/// axes, so the angle is 2 acos(max |q_i|).
template <class Gen>
double random_pair_mean(Gen& gen, int n) {
  std::normal_distribution<double> z;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    std::array<double, 4> q{z(gen), z(gen), z(gen), z(gen)};
    const double norm = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    double big = 0.0;
    for (double c : q) big = std::max(big, std::abs(c) / norm);
    sum += 2.0 * std::acos(std::min(big, 1.0)) * 180.0 / std::numbers::pi;
  }
  return sum / n;
}

}  // namespace testing_oracle
