#pragma once

// Named numerical checks shared by the CLI selftest and the acceptance driver.

#include "semiclassical/brackets_oracle.hpp"
#include "semiclassical/correction_dynamics.hpp"
#include "semiclassical/experiment.hpp"
#include "semiclassical/reference_solver.hpp"
#include "semiclassical/tensor.hpp"

#include <chrono>
#include <cmath>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace semiclassical {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

namespace checks {

namespace detail {

inline PhasePoint spec_point() {
  Eigen::VectorXd q(2), p(2);
  q << 1.0, 0.5;
  p << 0.0, 0.0;
  return {q, p};
}

inline std::string sci(double x) {
  std::ostringstream o;
  o.precision(3);
  o << std::scientific << x;
  return o.str();
}

template <class F>
CheckResult timed_check(const std::string& name, F&& body) {
  CheckResult r;
  r.name = name;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline DenseTensor random_tensor(std::mt19937_64& rng, std::size_t n, std::size_t order) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  DenseTensor t = DenseTensor::cube(n, order);
  for (double& x : t.data()) x = u(rng);
  return t;
}

inline DenseTensor symmetrize3(const DenseTensor& t) {
  const std::size_t n = t.extent(0);
  DenseTensor s = DenseTensor::cube(n, 3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < n; ++k)
        s(i, j, k) = (t(i, j, k) + t(i, k, j) + t(j, i, k) + t(j, k, i) + t(k, i, j) + t(k, j, i)) / 6.0;
  return s;
}

// Smooth non-polynomial phase-space function without analytic jet.
inline Observable random_smooth(std::mt19937_64& rng, std::size_t d) {
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

inline double general_difference(const GeneralCorrectionState& a, const GeneralCorrectionState& b) {
  return (a.pack() - b.pack()).cwiseAbs().maxCoeff();
}

}  // namespace detail

/// Observables compared between the block path and the quadrature oracle.
inline std::vector<Observable> oracle_observables(const TorsionalPotential& v) {
  return {position(1, 2), momentum(1, 2), kinetic(2), potential_energy(v)};
}

/// a2 by brute-force quadrature at the torsional d = 2 center, t = 1.
inline std::vector<double> oracle_values(std::size_t n_quad = 256) {
  const TorsionalPotential v(2);
  return a2_quadrature(oracle_observables(v), detail::spec_point(), 1.0, n_quad, v, 1e-3);
}

/// Largest relative difference |block - oracle| / |oracle| with the block path driven by ops.
template <class Ops>
double oracle_relative_error(Ops& ops, const std::vector<double>& oracle) {
  const TorsionalPotential v(2);
  const CorrectionStepper stepper = CorrectionStepper::order(4);
  CorrectionState s = CorrectionState::initial(detail::spec_point());
  for (int n = 0; n < 1000; ++n) stepper.step(1e-3, s, ops);
  const std::vector<Observable> obs = oracle_observables(v);
  double worst = 0.0;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    worst = std::max(worst, std::abs(a2_eval(obs[i], s) - oracle[i]) / std::abs(oracle[i]));
  }
  return worst;
}

/// Sign flip of the Gamma_2 x Gamma_qq block of A2 (the K9 coupling).
inline void flip_k9(BlockMatrices& m) {
  const BlockLayout L(2);
  m.a2.block(static_cast<Eigen::Index>(L.g_qp - L.psi2_begin), static_cast<Eigen::Index>(L.g_qq - L.psi3_begin), 8, 4) *= -1.0;
}

inline CheckResult oracle_equivalence(const std::vector<double>& oracle) {
  return detail::timed_check("oracle_equivalence", [&](CheckResult& r) {
    const TorsionalPotential v(2);
    MatrixFreeBlocks<TorsionalPotential> ops(v);
    const double rel = oracle_relative_error(ops, oracle);
    r.passed = rel <= 1e-5;
    r.detail = "max relative difference " + detail::sci(rel) + " (limit 1e-5)";
  });
}

inline CheckResult k9_mutation_detected(const std::vector<double>& oracle) {
  return detail::timed_check("k9_mutation_detected", [&](CheckResult& r) {
    const TorsionalPotential v(2);
    DenseBlocks<TorsionalPotential> honest(v);
    DenseBlocks<TorsionalPotential> mutated(v, flip_k9);
    const double rel_honest = oracle_relative_error(honest, oracle);
    const double rel_mutated = oracle_relative_error(mutated, oracle);
    r.passed = rel_honest <= 1e-5 && rel_mutated > 1e-5;
    r.detail = "dense path " + detail::sci(rel_honest) + ", flipped K9 " + detail::sci(rel_mutated) +
               " (mutant must exceed 1e-5)";
  });
}

inline CheckResult block_general_equivalence() {
  return detail::timed_check("block_general_equivalence", [](CheckResult& r) {
    const TorsionalPotential v(2);
    const CorrectionState block = evolve_correction(detail::spec_point(), 1.0, 1e-3, v);
    const GeneralCorrectionState general = evolve_general(detail::spec_point(), 1.0, 1e-4, v);
    const double forward = detail::general_difference(to_general(block), general);
    const std::vector<double> back = from_general(general).y;
    double backward = 0.0;
    for (std::size_t i = 0; i < back.size(); ++i) backward = std::max(backward, std::abs(back[i] - block.y[i]));
    r.passed = forward <= 1e-8 && backward <= 1e-8;
    r.detail = "blocks->general " + detail::sci(forward) + ", general->blocks " + detail::sci(backward) + " (limit 1e-8)";
  });
}

inline CheckResult f4_order() {
  return detail::timed_check("f4_order", [](CheckResult& r) {
    const TorsionalPotential v(2);
    const CorrectionState fine = evolve_correction(detail::spec_point(), 1.0, 1e-4, v);
    auto err = [&](double tau) {
      const CorrectionState s = evolve_correction(detail::spec_point(), 1.0, tau, v);
      double e = 0.0;
      for (std::size_t i = 0; i < s.y.size(); ++i) e = std::max(e, std::abs(s.y[i] - fine.y[i]));
      return e;
    };
    const double ratio = err(0.1) / err(0.05);
    r.passed = ratio >= 12.0 && ratio <= 20.0;
    r.detail = "error ratio " + detail::sci(ratio) + " (expected 12..20)";
  });
}

inline CheckResult harmonic_corrections_vanish() {
  return detail::timed_check("harmonic_corrections_vanish", [](CheckResult& r) {
    const HarmonicPotential v({1.0, 2.0});
    MatrixFreeBlocks<HarmonicPotential> ops(v);
    const CorrectionStepper stepper = CorrectionStepper::order(4);
    CorrectionState s = CorrectionState::initial(detail::spec_point());
    bool zero = true;
    for (int n = 0; n < 500; ++n) {
      stepper.step(0.01, s, ops);
      const BlockLayout& L = s.layout;
      for (std::size_t i = 0; i < s.y.size(); ++i) {
        const bool phase = (i >= L.q && i < L.q + L.d) || (i >= L.p && i < L.p + L.d);
        if (!phase && s.y[i] != 0.0) zero = false;
      }
    }
    const double a2 = a2_eval(position(1, 2), s);
    r.passed = zero && a2 == 0.0;
    r.detail = zero ? "all correction tensors exactly zero after 500 steps" : "nonzero correction entry";
  });
}

inline CheckResult energy_correction_vanishes() {
  return detail::timed_check("energy_correction_vanishes", [](CheckResult& r) {
    const TorsionalPotential v(2);
    const Observable h = total_energy(v);
    const Observable one = unit_observable(2);
    MatrixFreeBlocks<TorsionalPotential> ops(v);
    const CorrectionStepper stepper = CorrectionStepper::order(4);
    CorrectionState s = CorrectionState::initial(detail::spec_point());
    double worst_h = 0.0, worst_one = 0.0;
    for (int n = 1; n <= 1500; ++n) {
      stepper.step(0.01, s, ops);
      if (n % 50 == 0) {
        worst_h = std::max(worst_h, std::abs(a2_eval(h, s)));
        worst_one = std::max(worst_one, std::abs(a2_eval(one, s)));
      }
    }
    r.passed = worst_h <= 1e-8 && worst_one == 0.0;
    r.detail = "max |a2(h)| over [0,15] " + detail::sci(worst_h) + ", max |a2(1)| " + detail::sci(worst_one);
  });
}

inline CheckResult lemma_symmetry(int trials = 200) {
  return detail::timed_check("lemma_symmetry_of_j_tensor", [&](CheckResult& r) {
    std::mt19937_64 rng(2101);
    double sym_defect = 0.0, asym_min = 1e300;
    for (int t = 0; t < trials; ++t) {
      const std::size_t d = 1 + static_cast<std::size_t>(t % 3);
      const DenseTensor raw = detail::random_tensor(rng, 2 * d, 3);
      const DenseTensor sym = detail::symmetrize3(raw);
      sym_defect = std::max(sym_defect, symmetry_defect(apply_j_triple(sym)));
      asym_min = std::min(asym_min, symmetry_defect(apply_j_triple(raw)) / std::max(1e-300, symmetry_defect(raw)));
    }
    // J D~3h at random points of the torsional potential.
    std::uniform_real_distribution<double> u(-3, 3);
    const TorsionalPotential v(2);
    for (int t = 0; t < 20; ++t) {
      const double q[2] = {u(rng), u(rng)};
      const DenseTensor jt = apply_j_triple(tilde_d3h(derivative_tensor(v, q, 3)));
      sym_defect = std::max(sym_defect, symmetry_defect(jt));
    }
    r.passed = sym_defect <= 1e-14 && asym_min > 1e-6;
    r.detail = "symmetric inputs: defect " + detail::sci(sym_defect) + "; asymmetric inputs stay asymmetric (min ratio " +
               detail::sci(asym_min) + ")";
  });
}

inline CheckResult lemma_vectorization() {
  return detail::timed_check("lemma_vectorization", [](CheckResult& r) {
    std::mt19937_64 rng(2301);
    std::uniform_real_distribution<double> u(-2, 2);
    double worst = 0.0;
    for (int t = 0; t < 30; ++t) {
      for (std::size_t m : {2u, 3u, 4u}) {
        Eigen::MatrixXd a(m, m);
        for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = u(rng);
        for (std::size_t order : {2u, 3u}) {
          const DenseTensor b = detail::random_tensor(rng, m, order);
          for (std::size_t k = 0; k < order; ++k) {
            // Literal contraction C = A_{i_k l} B_{..l..}.
            DenseTensor c = DenseTensor::cube(m, order);
            for (std::size_t f = 0; f < c.size(); ++f) {
              std::vector<std::size_t> idx = c.multi_index(f);
              const std::size_t ik = idx[k];
              double s = 0.0;
              for (std::size_t l = 0; l < m; ++l) {
                idx[k] = l;
                s += a(static_cast<Eigen::Index>(ik), static_cast<Eigen::Index>(l)) * b.at(idx);
              }
              c.data()[f] = s;
            }
            const Eigen::VectorXd kron_side = kron_mode_matrix(a, order, k) * vec(b);
            worst = std::max(worst, (vec(c) - kron_side).cwiseAbs().maxCoeff());
            worst = std::max(worst, mode_multiply(a, b, k).max_abs_difference(c));
          }
        }
      }
    }
    r.passed = worst <= 1e-12;
    r.detail = "max |vec(C) - (Id..A..Id) vec(B)| " + detail::sci(worst) + " (limit 1e-12)";
  });
}

inline CheckResult lemma_bracket_antisymmetry() {
  return detail::timed_check("lemma_bracket_antisymmetry", [](CheckResult& r) {
    std::mt19937_64 rng(1179);
    std::uniform_real_distribution<double> u(-1, 1);
    double worst = 0.0;
    for (int t = 0; t < 10; ++t) {
      const Observable a = detail::random_smooth(rng, 2), b = detail::random_smooth(rng, 2);
      PhasePoint z = PhasePoint::zero(2);
      z.q << u(rng), u(rng);
      z.p << u(rng), u(rng);
      for (int k = 1; k <= 3; ++k) {
        const double ab = poisson_k(a, b, k, z), ba = poisson_k(b, a, k, z);
        const double expected = k % 2 == 0 ? 0.0 : 2 * ab;
        worst = std::max(worst, std::abs(ab - ba - expected));
      }
    }
    r.passed = worst <= 1e-5;
    r.detail = "max deviation " + detail::sci(worst) + " over k = 1..3 (limit 1e-5)";
  });
}

inline CheckResult lemma_flow_integral() {
  return detail::timed_check("lemma_flow_integral", [](CheckResult& r) {
    const TorsionalPotential v(2);
    Eigen::VectorXd q(2), p(2);
    q << 0.8, -0.3;
    p << 0.4, 0.25;
    const PhasePoint z0{q, p};
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
    r.passed = std::abs(lhs - rhs) <= 1e-4;
    r.detail = "|lhs - rhs| " + detail::sci(std::abs(lhs - rhs)) + " (limit 1e-4)";
  });
}

/// Egorov run on a harmonic potential against the rotated packet center.
inline CheckResult harmonic_egorov(std::size_t n0, std::size_t threads) {
  return detail::timed_check("harmonic_egorov", [&](CheckResult& r) {
    RunConfig c;
    c.potential = "harmonic";
    c.potential_params = {1.0, 1.0};
    c.epsilon = 0.1;
    c.q0 = {1.0, 0.5};
    c.p0 = {0.0, 0.3};
    c.t_final = 5.0;
    c.snapshot_stride = 0.5;
    c.n0 = n0;
    c.n2 = std::min<std::size_t>(n0, 1000);
    c.tau2 = 0.25;
    c.observables = {"q1", "q2", "p1", "p2"};
    const RunOutput out = run_corrected(c, threads);
    const double limit = 3.0 * std::sqrt(c.epsilon / 2) / std::sqrt(static_cast<double>(n0));
    double worst = 0.0, worst_corr = 0.0;
    for (const ResultRow& row : out.rows) {
      const double t = row.time;
      const std::size_t j = static_cast<std::size_t>(row.observable[1] - '1');
      const double qc = c.q0[j], pc = c.p0[j];
      const double exact = row.observable[0] == 'q' ? std::cos(t) * qc + std::sin(t) * pc : -std::sin(t) * qc + std::cos(t) * pc;
      worst = std::max(worst, std::abs(*row.egorov - exact));
      worst_corr = std::max(worst_corr, std::abs(*row.correction));
    }
    r.passed = worst <= limit && worst_corr == 0.0;
    r.detail = "max |egorov - rotation| " + detail::sci(worst) + " (limit " + detail::sci(limit) +
               "), max |correction| " + detail::sci(worst_corr);
  });
}

struct ReferenceSanity {
  double unitarity_drift = 0.0;
  double free_error = 0.0;
  double harmonic_error = 0.0;
  double strang_ratio = 0.0;
};

/// Unitarity, free-particle and harmonic Ehrenfest, and Strang self-convergence on an n x n grid.
inline ReferenceSanity reference_sanity_values(std::size_t n) {
  ReferenceSanity out;
  const GridSpec g(2, n);
  auto packet = [](double q1, double q2, double p1, double p2, double eps) {
    Eigen::VectorXd q(2), p(2);
    q << q1, q2;
    p << p1, p2;
    return GaussianPacket(PhasePoint{q, p}, eps);
  };
  {
    const GridPotential v = grid_potential(TorsionalPotential(2));
    WaveFunctionGrid w = init_packet(g, packet(1.0, 0.5, 0.0, 0.0, 0.1));
    const double n0 = w.norm_squared();
    const SchrodingerPropagator prop(g, 0.1, 0.1 / 800, v);
    for (int k = 0; k < 8; ++k) {
      prop.run(w, 1000);
      out.unitarity_drift = std::max(out.unitarity_drift, std::abs(w.norm_squared() - n0));
    }
  }
  {
    WaveFunctionGrid w = init_packet(g, packet(-0.5, 0.2, 0.5, -0.3, 0.05));
    const GridObservables obs(g, free_particle());
    SchrodingerPropagator(g, 0.05, 0.05, free_particle()).run(w, 20);
    out.free_error = std::max(std::abs(obs.position(w, 0) - 0.0), std::abs(obs.position(w, 1) + 0.1));
    out.free_error = std::max({out.free_error, std::abs(obs.momentum(w, 0) - 0.5), std::abs(obs.momentum(w, 1) + 0.3)});
  }
  {
    const GridPotential v = grid_potential(HarmonicPotential({1.0, 1.0}));
    WaveFunctionGrid w = init_packet(g, packet(1.0, 0.5, 0.0, 0.3, 0.1));
    const SchrodingerPropagator prop(g, 0.1, 1e-3, v);
    const GridObservables obs(g, v);
    for (int k = 1; k <= 2; ++k) {
      prop.run(w, 1000);
      const double t = k;
      out.harmonic_error = std::max({out.harmonic_error, std::abs(obs.position(w, 0) - std::cos(t)),
                                     std::abs(obs.position(w, 1) - (0.5 * std::cos(t) + 0.3 * std::sin(t))),
                                     std::abs(obs.momentum(w, 0) + std::sin(t)),
                                     std::abs(obs.momentum(w, 1) - (-0.5 * std::sin(t) + 0.3 * std::cos(t)))});
    }
  }
  {
    const GridPotential v = grid_potential(TorsionalPotential(2));
    const GridObservables obs(g, v);
    double val[3];
    const double taus[3] = {0.02, 0.01, 0.005};
    for (int i = 0; i < 3; ++i) {
      WaveFunctionGrid w = init_packet(g, packet(1.0, 0.5, 0.0, 0.0, 0.1));
      SchrodingerPropagator(g, 0.1, taus[i], v).run(w, static_cast<std::size_t>(std::lround(1.0 / taus[i])));
      val[i] = obs.expectation(w, "q1");
    }
    out.strang_ratio = std::abs(val[0] - val[1]) / std::abs(val[1] - val[2]);
  }
  return out;
}

inline CheckResult reference_sanity(std::size_t n) {
  return detail::timed_check("reference_sanity", [&](CheckResult& r) {
    const ReferenceSanity s = reference_sanity_values(n);
    r.passed = s.unitarity_drift <= 1e-10 && s.free_error <= 1e-6 && s.harmonic_error <= 1e-6 &&
               std::abs(s.strang_ratio - 4.0) <= 1.2;
    r.detail = "grid " + std::to_string(n) + "^2: norm drift " + detail::sci(s.unitarity_drift) + ", free " +
               detail::sci(s.free_error) + ", harmonic " + detail::sci(s.harmonic_error) + ", Strang ratio " +
               detail::sci(s.strang_ratio);
  });
}

}  // namespace checks

/// The selftest suite: oracle equivalence and its mutation guard, block/general equivalence,
/// lemma properties, order checks, quadratic exactness, conservation and reference sanity.
inline std::vector<CheckResult> run_selftest(std::size_t threads, const Logger& log = {}) {
  std::vector<CheckResult> out;
  auto add = [&](CheckResult r) {
    if (log) log(std::string(r.passed ? "PASS " : "FAIL ") + r.name + ": " + r.detail);
    out.push_back(std::move(r));
  };
  std::vector<double> oracle;
  add(checks::detail::timed_check("oracle_quadrature", [&](CheckResult& r) {
    oracle = checks::oracle_values(256);
    r.passed = oracle.size() == 4;
    r.detail = "a2 quadrature for q1, p1, kinetic, potential (n_quad = 256)";
  }));
  if (!oracle.empty()) {
    add(checks::oracle_equivalence(oracle));
    add(checks::k9_mutation_detected(oracle));
  }
  add(checks::block_general_equivalence());
  add(checks::lemma_symmetry());
  add(checks::lemma_vectorization());
  add(checks::lemma_bracket_antisymmetry());
  add(checks::lemma_flow_integral());
  add(checks::f4_order());
  add(checks::harmonic_corrections_vanish());
  add(checks::harmonic_egorov(10000, threads));
  add(checks::energy_correction_vanishes());
  add(checks::reference_sanity(128));
  return out;
}

}  // namespace semiclassical
