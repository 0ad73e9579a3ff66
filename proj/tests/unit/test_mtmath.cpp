#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "kagan_oracle.hpp"
#include "sourcenet/mtmath.hpp"

using namespace sourcenet;

namespace {

MomentTensor only_xy(double v = 1.0) { return {{0, 0, 0, v, 0, 0}}; }

void expect_tensor(const MomentTensor& m, std::array<double, 6> want, double tol = 1e-12) {
  for (int k = 0; k < 6; ++k) EXPECT_NEAR(m.m[k], want[k], tol) << "component " << k;
}

}  // namespace

TEST(SdrToMt, VerticalStrikeSlipNorthStrike) {
  // sin(dip)=1, cos(rake)=1, strike 0: only the sin2phi-free Mxy term survives.
  expect_tensor(sdr_to_mt({0, 90, 0, 1}), {0, 0, 0, 1, 0, 0});
}

TEST(SdrToMt, VerticalStrikeSlipRotated45) {
  expect_tensor(sdr_to_mt({45, 90, 0, 1}), {-1, 1, 0, 0, 0, 0});
}

TEST(SdrToMt, Thrust45) {
  expect_tensor(sdr_to_mt({0, 45, 90, 1}), {0, -1, 1, 0, 0, 0});
}

TEST(SdrToMt, ZeroTraceAndNorm) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    DoubleCouple dc{uniform(rng, 0, 360), uniform(rng, 0, 90), uniform(rng, -180, 180),
                    std::pow(10.0, uniform(rng, 10, 18))};
    const auto mt = sdr_to_mt(dc);
    EXPECT_EQ(mt.trace(), 0.0);
    EXPECT_NEAR(mt.frobenius(), std::numbers::sqrt2 * dc.m0, 1e-9 * dc.m0);
  }
}

TEST(Label, PureMxyUnitMoment) {
  const auto lab = mt_to_label(only_xy());
  EXPECT_NEAR(lab.dev[2], 1.0 / std::numbers::sqrt2, 1e-12);
  EXPECT_NEAR(lab.dev[0], 0.0, 1e-15);
  EXPECT_NEAR(lab.mw, (2.0 / 3.0) * (0.0 - 9.1), 1e-12);
  EXPECT_NEAR(lab.mw, -6.0667, 1e-4);
}

TEST(Label, MwZeroAtReferenceMoment) {
  EXPECT_NEAR(mt_to_label(only_xy(std::pow(10.0, 9.1))).mw, 0.0, 1e-12);
}

TEST(Label, Mw3Moment) { EXPECT_NEAR(mw_to_moment(3.0) / 3.98e13, 1.0, 1e-3); }

TEST(Label, RoundTrip) {
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    const auto mt = sample_uniform_dc(rng, 2.0, 6.0);
    const auto lab = mt_to_label(mt);
    double n2 = lab.dev[0] * lab.dev[0] + lab.dev[1] * lab.dev[1] +
                std::pow(lab.dev[0] + lab.dev[1], 2) +
                2 * (lab.dev[2] * lab.dev[2] + lab.dev[3] * lab.dev[3] + lab.dev[4] * lab.dev[4]);
    EXPECT_NEAR(n2, 1.0, 1e-6);
    const auto back = label_to_mt(lab);
    for (int k = 0; k < 6; ++k) EXPECT_NEAR(back.m[k], mt.m[k], 1e-6 * mt.frobenius());
    const auto lab2 = mt_to_label(back);
    for (int k = 0; k < 5; ++k) EXPECT_NEAR(lab2.dev[k], lab.dev[k], 1e-6);
    EXPECT_NEAR(lab2.mw, lab.mw, 1e-6);
  }
}

TEST(Label, Errors) {
  EXPECT_THROW(mt_to_label(MomentTensor{}), ZeroTensor);
  EXPECT_THROW(mt_to_label(MomentTensor{{1, 1, 1, 0, 0, 0}}), ZeroTensor);  // isotropic only
  EXPECT_THROW(label_to_mt(SourceLabel{{0, 0, 0, 0, 0}, 3.0}), ZeroTensor);
}

TEST(Sampling, DeterministicAndCentred) {
  Rng a(5), b(5);
  EXPECT_EQ(sample_uniform_dc(a, 3, 5).m, sample_uniform_dc(b, 3, 5).m);
  Rng rng(123);
  std::array<double, 5> mean{};
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto lab = mt_to_label(sample_uniform_dc(rng, 3, 5));
    for (int k = 0; k < 5; ++k) mean[k] += lab.dev[k] / n;
    ASSERT_GE(lab.mw, 3.0 - 1e-9);
    ASSERT_LE(lab.mw, 5.0 + 1e-9);
  }
  for (double m : mean) EXPECT_NEAR(m, 0.0, 0.02);
}

TEST(Sampling, RandomPairKaganMeanMatchesHaarOracle) {
  Rng rng(321);
  const int n = 100000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += kagan_angle(sample_uniform_dc(rng, 3, 5), sample_uniform_dc(rng, 3, 5));
  std::mt19937_64 gen(7);
  const double oracle = testing_oracle::random_pair_mean(gen, 1000000);
  // Standard error of a 1e5-pair mean is about 0.07 degrees.
  EXPECT_NEAR(sum / n, oracle, 0.5);
}

TEST(Kagan, IdentitySymmetryScaling) {
  Rng rng(9);
  for (int i = 0; i < 200; ++i) {
    const auto a = sample_uniform_dc(rng, 3, 5), b = sample_uniform_dc(rng, 3, 5);
    EXPECT_NEAR(kagan_angle(a, a), 0.0, 1e-5);
    const double ab = kagan_angle(a, b);
    EXPECT_NEAR(ab, kagan_angle(b, a), 1e-9);
    EXPECT_NEAR(ab, kagan_angle(a.scaled(7.5), b.scaled(0.01)), 1e-9);
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 120.0 + 1e-9);
  }
}

TEST(Kagan, AuxiliaryPlaneIsSameMechanism) {
  // strike 0 dip 90 rake 0 and its auxiliary plane strike 90 dip 90 rake 180.
  EXPECT_NEAR(kagan_angle(sdr_to_mt({0, 90, 0, 1}), sdr_to_mt({90, 90, 180, 1})), 0.0, 1e-5);
  EXPECT_NEAR(kagan_angle(sdr_to_mt({30, 60, 40, 1}), sdr_to_mt({30, 60, 40, 1}).scaled(3)), 0.0, 1e-5);
}

TEST(Kagan, RotationAboutNullAxis) {
  const auto a = sdr_to_mt({20, 70, 30, 1});
  const Eigen::Matrix3d frame = testing_oracle::frame_tbp(a);
  const Eigen::Vector3d b_axis = frame.col(1);
  for (double deg : {10.0, 30.0, 45.0}) {
    const Eigen::Matrix3d r = Eigen::AngleAxisd(deg * kDeg, b_axis).toRotationMatrix();
    const auto rotated = MomentTensor::from_matrix(r * a.matrix() * r.transpose());
    EXPECT_NEAR(kagan_angle(a, rotated), deg, 1e-6);
    EXPECT_NEAR(testing_oracle::kagan_brute(a, rotated), deg, 1e-6);
  }
}

TEST(Kagan, MatchesBruteForceOracle) {
  Rng rng(77);
  for (int i = 0; i < 200; ++i) {
    const auto a = sample_uniform_dc(rng, 3, 5), b = sample_uniform_dc(rng, 3, 5);
    EXPECT_NEAR(kagan_angle(a, b), testing_oracle::kagan_brute(a, b), 0.5);
  }
}

TEST(Kagan, DegenerateThrows) {
  EXPECT_THROW(kagan_angle(MomentTensor{{1, 1, -2, 0, 0, 0}}, only_xy()), DegenerateTensor);
  EXPECT_THROW(kagan_angle(MomentTensor{}, only_xy()), DegenerateTensor);
}

TEST(Radiation, NodalAndLobe) {
  EXPECT_NEAR(radiation(only_xy(), {1, 0, 0}).p_amp, 0.0, 1e-15);
  const double h = std::sqrt(0.5);
  EXPECT_NEAR(radiation(only_xy(), {h, h, 0}).p_amp, 1.0, 1e-12);
}

TEST(Radiation, TransverseSAndEvenP) {
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    const auto mt = sample_uniform_dc(rng, 3, 3);
    Eigen::Vector3d g(standard_normal(rng), standard_normal(rng), standard_normal(rng));
    g.normalize();
    const auto r = radiation(mt, g);
    EXPECT_NEAR(r.s_vec.dot(g), 0.0, 1e-9 * mt.frobenius());
    EXPECT_NEAR(radiation(mt, -g).p_amp, r.p_amp, 1e-9 * mt.frobenius());
  }
}

TEST(Radiation, SphericalMeanIsZero) {
  Rng rng(8);
  const auto mt = sample_uniform_dc(rng, 0, 0);  // m0 = 10^9.1; rescale to unit norm below
  const auto unit = mt.scaled(1.0 / scalar_moment(mt));
  double mean = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d g(standard_normal(rng), standard_normal(rng), standard_normal(rng));
    mean += radiation(unit, g.normalized()).p_amp / n;
  }
  EXPECT_NEAR(mean, 0.0, 0.01);
}
