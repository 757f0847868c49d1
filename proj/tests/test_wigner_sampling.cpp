#include "semiclassical/wigner_sampling.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace semiclassical;

namespace {

PhasePoint spec_center() {
  Eigen::VectorXd q(2), p(2);
  q << 1.0, 0.5;
  p << 0.0, 0.0;
  return {q, p};
}

// A smooth integrand with a closed-form Gaussian expectation.
double test_integrand(const PhasePoint& z) {
  return std::cos(z.q(0)) * std::cos(z.q(1)) * (1.0 + z.p(0) * z.p(1)) + std::exp(0.5 * z.p(0));
}

double test_integrand_mean(const GaussianPacket& g) {
  const double s2 = g.sigma() * g.sigma();
  const auto& c = g.center;
  return std::cos(c.q(0)) * std::cos(c.q(1)) * std::exp(-s2) * (1.0 + c.p(0) * c.p(1)) +
         std::exp(0.5 * c.p(0) + 0.125 * s2);
}

}  // namespace

TEST(Wigner, DensityAtCenterAndUnitExponent) {
  const GaussianPacket g(spec_center(), 0.1);
  const double peak = std::pow(std::numbers::pi * 0.1, -2);
  EXPECT_NEAR(wigner_density(g, spec_center()), peak, 1e-12 * peak);
  PhasePoint z = spec_center();
  z.q(0) += std::sqrt(0.1);
  EXPECT_NEAR(wigner_density(g, z), peak * std::exp(-1.0), 1e-12 * peak);
  EXPECT_THROW(GaussianPacket(spec_center(), 0.0), std::invalid_argument);
}

TEST(Wigner, DensityIntegratesToOne) {
  // Uniform Halton points on the box center +- 5 sigma (outside mass below 1e-5).
  const GaussianPacket g(spec_center(), 0.1);
  const double half = 5.0 * g.sigma();
  const QmcSampler s(100000);
  const auto bases = first_primes(4);
  double sum = 0.0;
  for (std::size_t j = 0; j < s.count; ++j) {
    PhasePoint z = spec_center();
    for (std::size_t k = 0; k < 4; ++k) {
      const double x = (2.0 * halton(s.skip + j + 1, bases[k]) - 1.0) * half;
      if (k < 2) {
        z.q(static_cast<Eigen::Index>(k)) += x;
      } else {
        z.p(static_cast<Eigen::Index>(k - 2)) += x;
      }
    }
    sum += wigner_density(g, z);
  }
  const double integral = sum / static_cast<double>(s.count) * std::pow(2.0 * half, 4);
  EXPECT_NEAR(integral, 1.0, 5e-3);
}

TEST(Halton, HandValues) {
  EXPECT_DOUBLE_EQ(halton(1, 2), 0.5);
  EXPECT_DOUBLE_EQ(halton(2, 2), 0.25);
  EXPECT_DOUBLE_EQ(halton(3, 2), 0.75);
  EXPECT_NEAR(halton(1, 3), 1.0 / 3, 1e-16);
  EXPECT_NEAR(halton(2, 3), 2.0 / 3, 1e-16);
  EXPECT_NEAR(halton(3, 3), 1.0 / 9, 1e-16);
  EXPECT_THROW(halton(0, 2), std::invalid_argument);
}

TEST(Halton, StrictlyInsideUnitInterval) {
  for (std::uint32_t b : first_primes(8)) {
    for (std::uint64_t i = 1; i < 5000; ++i) {
      const double x = halton(i, b);
      EXPECT_GT(x, 0.0);
      EXPECT_LT(x, 1.0);
    }
  }
}

TEST(Halton, FirstPrimes) {
  EXPECT_EQ(first_primes(6), (std::vector<std::uint32_t>{2, 3, 5, 7, 11, 13}));
}

TEST(InverseNormal, ReferenceValues) {
  EXPECT_EQ(inverse_normal_cdf(0.5), 0.0);
  EXPECT_NEAR(inverse_normal_cdf(0.975), 1.959963984540054, 1e-9);
  EXPECT_NEAR(inverse_normal_cdf(0.001), -3.090232306167813, 1e-9);
  EXPECT_NEAR(inverse_normal_cdf(1e-10), -6.361340902404056, 1e-9);
  EXPECT_NEAR(inverse_normal_cdf(0.3), -0.524400512708041, 1e-9);
}

TEST(InverseNormal, InvertsTheCdf) {
  for (int k = 1; k < 2000; ++k) {
    const double u = k / 2000.0;
    const double x = inverse_normal_cdf(u);
    EXPECT_NEAR(0.5 * std::erfc(-x / std::numbers::sqrt2), u, 1e-14);
  }
}

TEST(InverseNormal, Antisymmetric) {
  for (int k = 1; k < 1000; ++k) {
    const double u = k / 1000.0 * 0.5;
    EXPECT_NEAR(inverse_normal_cdf(1.0 - u), -inverse_normal_cdf(u), 1e-12);
  }
}

TEST(InverseNormal, RejectsOutsideOpenInterval) {
  EXPECT_THROW(inverse_normal_cdf(0.0), std::domain_error);
  EXPECT_THROW(inverse_normal_cdf(1.0), std::domain_error);
  EXPECT_THROW(inverse_normal_cdf(std::nan("")), std::domain_error);
}

TEST(Sampling, MedianPointIsCenter) {
  const GaussianPacket g(spec_center(), 0.1);
  const PhasePoint z = map_to_packet(g, std::vector<double>(4, 0.5));
  EXPECT_EQ(max_abs_difference(z, spec_center()), 0.0);
}

TEST(Sampling, MomentsMatchPacket) {
  const GaussianPacket g(spec_center(), 0.1);
  const std::size_t n = 20000;
  const auto pts = sample_points(g, QmcSampler(n));
  ASSERT_EQ(pts.size(), n);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(4);
  for (const auto& z : pts) mean += z.stacked();
  mean /= static_cast<double>(n);
  const Eigen::VectorXd c = spec_center().stacked();
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(4, 4);
  for (const auto& z : pts) {
    const Eigen::VectorXd x = z.stacked() - mean;
    cov += x * x.transpose();
  }
  cov /= static_cast<double>(n - 1);
  for (Eigen::Index i = 0; i < 4; ++i) {
    EXPECT_LT(std::abs(mean(i) - c(i)), 3 * g.sigma() / std::sqrt(static_cast<double>(n)));
    EXPECT_NEAR(cov(i, i), 0.05, 0.005);
  }
}

TEST(Sampling, Deterministic) {
  const GaussianPacket g(spec_center(), 0.05);
  const auto a = sample_points(g, QmcSampler(500));
  const auto b = sample_points(g, QmcSampler(500));
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(max_abs_difference(a[i], b[i]), 0.0);
  }
}

TEST(Qmc, ExpectationValues) {
  const GaussianPacket g(spec_center(), 0.1);
  const auto pts = sample_points(g, QmcSampler(10000));
  EXPECT_EQ(qmc_expectation([](const PhasePoint&) { return 1.0; }, pts), 1.0);
  EXPECT_NEAR(qmc_expectation([](const PhasePoint& z) { return z.q(0); }, pts), 1.0, 1e-2);
}

TEST(Qmc, TorsionalEnergyMatchesGaussianMoments) {
  // E[1 - cos q_i] = 1 - cos(q0_i) exp(-s^2/2), E[p_i^2 / 2] = (p0_i^2 + s^2) / 2.
  const GaussianPacket g(spec_center(), 0.01);
  const auto pts = sample_points(g, QmcSampler(20000));
  const double s2 = g.sigma() * g.sigma();
  const double expected = 2.0 - (std::cos(1.0) + std::cos(0.5)) * std::exp(-0.5 * s2) + s2;
  const double qmc = qmc_expectation(
      [](const PhasePoint& z) { return 2.0 - std::cos(z.q(0)) - std::cos(z.q(1)) + 0.5 * z.p.squaredNorm(); }, pts);
  EXPECT_NEAR(qmc, expected, 1e-4);
  // First-order moment expansion: V(q0) + O(eps).
  EXPECT_NEAR(qmc, 2.0 - std::cos(1.0) - std::cos(0.5), 0.02);
}

TEST(Qmc, ErrorDecayRate) {
  const GaussianPacket g(spec_center(), 0.1);
  const double exact = test_integrand_mean(g);
  std::vector<double> logn, loge;
  for (std::size_t n : {1000u, 10000u, 100000u}) {
    const double err = std::abs(qmc_expectation(test_integrand, sample_points(g, QmcSampler(n))) - exact);
    logn.push_back(std::log(static_cast<double>(n)));
    loge.push_back(std::log(err));
  }
  const double mx = (logn[0] + logn[1] + logn[2]) / 3, my = (loge[0] + loge[1] + loge[2]) / 3;
  double sxy = 0, sxx = 0;
  for (int i = 0; i < 3; ++i) {
    sxy += (logn[i] - mx) * (loge[i] - my);
    sxx += (logn[i] - mx) * (logn[i] - mx);
  }
  const double slope = sxy / sxx;
  EXPECT_LE(slope, -0.7);
  EXPECT_GE(slope, -1.1);
}
