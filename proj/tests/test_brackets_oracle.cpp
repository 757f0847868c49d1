#include "semiclassical/brackets_oracle.hpp"

#include "support/coupled_potential.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace semiclassical;
using semiclassical::testing::CoupledPotential;

namespace {

PhasePoint spec_point() {
  Eigen::VectorXd q(2), p(2);
  q << 1.0, 0.5;
  p << 0.0, 0.0;
  return {q, p};
}

PhasePoint moving_point() {
  Eigen::VectorXd q(2), p(2);
  q << 0.8, -0.3;
  p << 0.4, 0.25;
  return {q, p};
}

DenseTensor random_symmetric(std::mt19937_64& rng, std::size_t n, std::size_t order) {
  std::normal_distribution<double> g;
  DenseTensor t = DenseTensor::cube(n, order);
  for (std::size_t flat = 0; flat < t.size(); ++flat) {
    auto idx = t.multi_index(flat);
    std::sort(idx.begin(), idx.end());
    if (idx == t.multi_index(flat)) {
      const double x = g(rng);
      do {
        t.at(idx) = x;
      } while (std::next_permutation(idx.begin(), idx.end()));
    }
  }
  return t;
}

ObservableJet random_jet(std::mt19937_64& rng, std::size_t d) {
  ObservableJet j(d);
  std::normal_distribution<double> g;
  for (Eigen::Index i = 0; i < j.grad.size(); ++i) j.grad(i) = g(rng);
  j.hess = random_symmetric(rng, 2 * d, 2);
  j.third = random_symmetric(rng, 2 * d, 3);
  return j;
}

// A smooth non-polynomial phase-space function with random coefficients, value only.
Observable random_smooth(std::mt19937_64& rng, std::size_t d) {
  std::uniform_real_distribution<double> u(-1, 1);
  Eigen::VectorXd c1(2 * d), c2(2 * d);
  for (Eigen::Index i = 0; i < c1.size(); ++i) {
    c1(i) = u(rng);
    c2(i) = u(rng);
  }
  const double a = u(rng), b = u(rng);
  return Observable("random", d, [c1, c2, a, b](const PhasePoint& z) {
    const Eigen::VectorXd x = z.stacked();
    return a * std::sin(c1.dot(x)) + b * std::exp(0.5 * c2.dot(x)) + 0.1 * c1.dot(x) * c2.dot(x) * c2.dot(x);
  });
}

}  // namespace

TEST(PoissonBracket, OrderOneIsClassicalBracket) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const ObservableJet f = random_jet(rng, 2), g = random_jet(rng, 2);
    const double expected = f.grad.tail(2).dot(g.grad.head(2)) - f.grad.head(2).dot(g.grad.tail(2));
    EXPECT_NEAR(poisson_k(f, g, 1), expected, 1e-13);
  }
}

TEST(PoissonBracket, OrderTwoByHandInOneDimension) {
  // {a,b}_2 = 1/2 b_qq a_pp - b_qp a_qp + 1/2 b_pp a_qq
  std::mt19937_64 rng(2);
  const ObservableJet a = random_jet(rng, 1), b = random_jet(rng, 1);
  const double expected = 0.5 * b.hess(0, 0) * a.hess(1, 1) - b.hess(0, 1) * a.hess(0, 1) + 0.5 * b.hess(1, 1) * a.hess(0, 0);
  EXPECT_NEAR(poisson_k(a, b, 2), expected, 1e-13);
}

TEST(PoissonBracket, OrderThreeByHandInOneDimension) {
  // {a,b}_3 = sum_r (-1)^(3-r) / (r! (3-r)!) d_q^r d_p^(3-r) b  d_q^(3-r) d_p^r a
  std::mt19937_64 rng(3);
  const ObservableJet a = random_jet(rng, 1), b = random_jet(rng, 1);
  auto t = [](const ObservableJet& j, int nq) {
    std::vector<std::size_t> idx;
    for (int s = 0; s < 3; ++s) idx.push_back(s < nq ? 0 : 1);
    return j.third.at(idx);
  };
  const double expected =
      -t(b, 0) * t(a, 3) / 6.0 + t(b, 1) * t(a, 2) / 2.0 - t(b, 2) * t(a, 1) / 2.0 + t(b, 3) * t(a, 0) / 6.0;
  EXPECT_NEAR(poisson_k(a, b, 3), expected, 1e-13);
}

TEST(PoissonBracket, LemmaA1ExactOnJets) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const ObservableJet a = random_jet(rng, 2), b = random_jet(rng, 2);
    for (int k = 1; k <= 3; ++k) {
      const double ab = poisson_k(a, b, k), ba = poisson_k(b, a, k);
      if (k % 2 == 0) {
        EXPECT_NEAR(ab - ba, 0.0, 1e-12);
      } else {
        EXPECT_NEAR(ab - ba, 2 * ab, 1e-12);
        EXPECT_NEAR(poisson_k(a, a, k), 0.0, 1e-12);
      }
    }
  }
}

TEST(PoissonBracket, LemmaA1WithFiniteDifferenceJets) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 5; ++trial) {
    const Observable a = random_smooth(rng, 2), b = random_smooth(rng, 2);
    PhasePoint z = PhasePoint::zero(2);
    z.q << u(rng), u(rng);
    z.p << u(rng), u(rng);
    for (int k = 1; k <= 3; ++k) {
      const double ab = poisson_k(a, b, k, z), ba = poisson_k(b, a, k, z);
      const double expected = k % 2 == 0 ? 0.0 : 2 * ab;
      EXPECT_NEAR(ab - ba, expected, 1e-5) << "k = " << k;
    }
  }
}

TEST(PoissonBracket, RejectsOrder) {
  std::mt19937_64 rng(6);
  const ObservableJet a = random_jet(rng, 1);
  EXPECT_THROW(poisson_k(a, a, 0), std::invalid_argument);
  EXPECT_THROW(poisson_k(a, a, 4), std::invalid_argument);
}

TEST(Variational, HarmonicRotation) {
  const HarmonicPotential v({1.0});
  PhasePoint z = PhasePoint::zero(1);
  z.q << 0.7;
  z.p << -0.2;
  const double t = 1.3;
  const VariationalState s = variational_flow(z, t, 1e-3, v);
  Eigen::Matrix2d rot;
  rot << std::cos(t), std::sin(t), -std::sin(t), std::cos(t);
  EXPECT_LT((s.dphi - rot).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_EQ(s.d2phi.max_abs_difference(DenseTensor::cube(2, 3)), 0.0);
  EXPECT_EQ(s.d3phi.max_abs_difference(DenseTensor::cube(2, 4)), 0.0);
}

TEST(Variational, TimeZeroIsIdentity) {
  const VariationalState s = variational_flow(spec_point(), 0.0, 1e-3, TorsionalPotential(2));
  EXPECT_EQ((s.dphi - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(s.d2phi.max_abs_difference(DenseTensor::cube(4, 3)), 0.0);
}

TEST(Variational, JacobianIsSymplectic) {
  const VariationalState s = variational_flow(spec_point(), 1.0, 1e-3, TorsionalPotential(2));
  const Eigen::MatrixXd j = symplectic_j(2);
  EXPECT_LT((s.dphi.transpose() * j * s.dphi - j).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_NEAR(s.dphi.determinant(), 1.0, 1e-8);
}

TEST(Variational, MatchesFiniteDifferencesOfFlow) {
  const CoupledPotential v(2);
  const PhasePoint z0 = moving_point();
  const double t = 0.8;
  const VariationalState s = variational_flow(z0, t, 1e-3, v);
  const std::size_t steps = 800;
  EXPECT_LT(max_abs_difference(s.z, rk4_flow(z0, t, steps, v)), 1e-12);

  // Each flow component as a scalar observable; its FD jet gives row i of D Phi, D^2 Phi, D^3 Phi.
  double e1 = 0, e2 = 0, e3 = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const Observable comp("phi", 2, [&, i](const PhasePoint& z) {
      return rk4_flow(z, t, steps, v).stacked()(static_cast<Eigen::Index>(i));
    });
    const ObservableJet j = comp.jet(z0);
    for (std::size_t a = 0; a < 4; ++a) {
      e1 = std::max(e1, std::abs(j.grad(static_cast<Eigen::Index>(a)) -
                                 s.dphi(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a))));
      for (std::size_t b = 0; b < 4; ++b) {
        e2 = std::max(e2, std::abs(j.hess(a, b) - s.d2phi(i, a, b)));
        for (std::size_t c = 0; c < 4; ++c) e3 = std::max(e3, std::abs(j.third(a, b, c) - s.d3phi(i, a, b, c)));
      }
    }
  }
  EXPECT_LT(e1, 1e-8);
  EXPECT_LT(e2, 1e-6);
  EXPECT_LT(e3, 1e-5);
}

TEST(Oracle, DirectBracketMatchesTensorIntegrand) {
  // Checks the symmetrized D~^3h weights against the multi-index bracket.
  const CoupledPotential coupled(2);
  const TorsionalPotential tors(2);
  const double s = 0.6;
  for (const Observable& a : {position(1, 2), kinetic(2), total_energy(tors)}) {
    const PhasePoint w = moving_point();
    const VariationalState vs_c = variational_flow(w, s, 1e-3, coupled);
    const double tensor_c = tensor_bracket_integrand(a, vs_c, w, coupled);
    const double direct_c = direct_bracket_integrand(a, w, s, 1e-3, coupled);
    EXPECT_NEAR(tensor_c, direct_c, 1e-5) << a.name();

    const VariationalState vs_t = variational_flow(w, s, 1e-3, tors);
    EXPECT_NEAR(tensor_bracket_integrand(a, vs_t, w, tors), direct_bracket_integrand(a, w, s, 1e-3, tors), 1e-5)
        << a.name();
  }
}

TEST(Oracle, ZeroCases) {
  const TorsionalPotential v(2);
  EXPECT_EQ(a2_quadrature(position(1, 2), spec_point(), 0.0, 16, v), 0.0);
  const HarmonicPotential hv({1.0, 1.5});
  for (const auto& name : builtin_observable_names()) {
    EXPECT_EQ(a2_quadrature(make_observable(name, AnyPotential(hv)), spec_point(), 1.0, 16, hv, 1e-2), 0.0) << name;
  }
  EXPECT_THROW(a2_quadrature(position(1, 2), spec_point(), 1.0, 15, v), std::invalid_argument);
}

TEST(Oracle, AgreesWithCorrectionDynamicsTorsional) {
  const TorsionalPotential v(2);
  const PhasePoint z0 = spec_point();
  const std::vector<Observable> obs{position(1, 2), momentum(1, 2), kinetic(2), potential_energy(v)};
  const std::vector<double> quad = a2_quadrature(obs, z0, 1.0, 256, v, 1e-3);
  const CorrectionState s = evolve_correction(z0, 1.0, 1e-3, v);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const double block = a2_eval(obs[i], s);
    EXPECT_NEAR(block, quad[i], 1e-6) << obs[i].name();
    EXPECT_LE(std::abs(block - quad[i]), 1e-5 * std::abs(quad[i])) << obs[i].name();
  }
}

TEST(Oracle, AgreesWithCorrectionDynamicsCoupled) {
  const CoupledPotential v(2);
  const PhasePoint z0 = moving_point();
  const std::vector<Observable> obs{position(2, 2), momentum(1, 2), kinetic(2), potential_energy(v)};
  const std::vector<double> quad = a2_quadrature(obs, z0, 1.0, 128, v, 1e-3);
  const CorrectionState s = evolve_correction(z0, 1.0, 1e-3, v);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    EXPECT_LE(std::abs(a2_eval(obs[i], s) - quad[i]), 1e-5 * std::abs(quad[i])) << obs[i].name();
  }
}

TEST(Oracle, LemmaFlowIntegralDerivative) {
  // d/dt int_0^t (b f(s)) o Phi^(t-s) ds = int_0^t (b f'(s)) o Phi^(t-s) ds + (b f(0)) o Phi^t
  const TorsionalPotential v(2);
  const PhasePoint z0 = moving_point();
  auto b = [](const PhasePoint& z) { return std::cos(z.q(0)) + z.p(1) * z.p(1); };
  auto f = [](double s, const PhasePoint& z) { return std::sin(2 * s + z.q(1)) * (1 + z.p(0)); };
  auto fs = [](double s, const PhasePoint& z) { return 2 * std::cos(2 * s + z.q(1)) * (1 + z.p(0)); };
  const auto bf = [&](double s, const PhasePoint& z) { return b(z) * f(s, z); };
  const auto bfs = [&](double s, const PhasePoint& z) { return b(z) * fs(s, z); };

  const double t = 1.2, delta = 1e-3;
  const double lhs =
      (flow_integral(bf, z0, t + delta, 128, v, 1e-4) - flow_integral(bf, z0, t - delta, 128, v, 1e-4)) / (2 * delta);
  const PhasePoint zt = rk4_flow(z0, t, 12000, v);
  const double rhs = flow_integral(bfs, z0, t, 128, v, 1e-4) + b(zt) * f(0.0, zt);
  EXPECT_NEAR(lhs, rhs, 1e-4);
}

TEST(Oracle, SimpsonWeights) {
  const std::vector<double> w = simpson_weights(4, 1.0);
  double sum = 0;
  for (double x : w) sum += x;
  EXPECT_NEAR(sum, 1.0, 1e-15);
  EXPECT_THROW(simpson_weights(3, 1.0), std::invalid_argument);
}
