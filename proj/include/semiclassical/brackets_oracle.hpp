#pragma once

// Ground truth for the correction term, built without the correction ODE:
//   a2(t) = -1/4 int_0^t {h, a o Phi^s}_3 o Phi^(t-s) ds,
// with the bracket written through the chain rule for D^3(a o Phi^s) and the flow derivatives
// D Phi, D^2 Phi, D^3 Phi from the variational equations (RK4). The generalized brackets
// themselves are also available directly, for cross-checks with finite-difference jets.

#include "semiclassical/correction_dynamics.hpp"
#include "semiclassical/observables.hpp"
#include "semiclassical/ode.hpp"
#include "semiclassical/phase_space.hpp"
#include "semiclassical/potentials.hpp"
#include "semiclassical/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

namespace semiclassical {

/// {a, b}_k = sum_{|alpha+beta| = k} (-1)^|beta| / (alpha! beta!) d_q^alpha d_p^beta b  d_q^beta d_p^alpha a,
/// from the k-th derivative tensors of a and b at one point (k = 1, 2, 3).
///
/// Summing over ordered index tuples instead of multi-indices: for |alpha| = r the weight
/// becomes 1 / (r! (k-r)!), with I the r position indices of b and J the k-r momentum indices.
inline double poisson_k(const ObservableJet& a, const ObservableJet& b, int k) {
  if (k < 1 || k > 3) throw std::invalid_argument("poisson_k: order must be 1, 2 or 3");
  const std::size_t n = static_cast<std::size_t>(a.grad.size());
  const std::size_t d = n / 2;
  auto entry = [&](const ObservableJet& j, const std::size_t* idx) {
    switch (k) {
      case 1: return j.grad(static_cast<Eigen::Index>(idx[0]));
      case 2: return j.hess(idx[0], idx[1]);
      default: return j.third(idx[0], idx[1], idx[2]);
    }
  };
  const double fact[4] = {1, 1, 2, 6};
  double total = 0.0;
  std::size_t tuple_count = 1;
  for (int s = 0; s < k; ++s) tuple_count *= d;
  std::size_t u[3], ib[3], ia[3];
  for (int r = 0; r <= k; ++r) {
    const double w = ((k - r) % 2 == 0 ? 1.0 : -1.0) / (fact[r] * fact[k - r]);
    double acc = 0.0;
    for (std::size_t flat = 0; flat < tuple_count; ++flat) {
      std::size_t x = flat;
      for (int s = k - 1; s >= 0; --s) {
        u[s] = x % d;
        x /= d;
      }
      // u[0..r) = I, u[r..k) = J. b takes (q_I, p_J), a takes (q_J, p_I).
      for (int s = 0; s < r; ++s) {
        ib[s] = u[s];
        ia[s] = u[s] + d;
      }
      for (int s = r; s < k; ++s) {
        ib[s] = u[s] + d;
        ia[s] = u[s];
      }
      acc += entry(b, ib) * entry(a, ia);
    }
    total += w * acc;
  }
  return total;
}

inline double poisson_k(const Observable& a, const Observable& b, int k, const PhasePoint& z) {
  if (k < 1 || k > 3) throw std::invalid_argument("poisson_k: order must be 1, 2 or 3");
  return poisson_k(a.jet(z), b.jet(z), k);
}

/// Flow point with its first three derivatives with respect to the initial point.
/// D^k Phi is stored with the component index first: (D^2 Phi)_{i j k} = d_k d_j Phi_i.
struct VariationalState {
  PhasePoint z;
  Eigen::MatrixXd dphi;
  DenseTensor d2phi;
  DenseTensor d3phi;

  VariationalState() = default;
  explicit VariationalState(const PhasePoint& z0)
      : z(z0),
        dphi(Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(2 * z0.dimension()),
                                       static_cast<Eigen::Index>(2 * z0.dimension()))),
        d2phi(DenseTensor::cube(2 * z0.dimension(), 3)),
        d3phi(DenseTensor::cube(2 * z0.dimension(), 4)) {}

  std::size_t dimension() const { return z.dimension(); }

  Eigen::VectorXd pack() const {
    const Eigen::Index n = static_cast<Eigen::Index>(2 * dimension());
    Eigen::VectorXd v(n + n * n + static_cast<Eigen::Index>(d2phi.size() + d3phi.size()));
    v << z.stacked(), Eigen::Map<const Eigen::VectorXd>(dphi.data(), n * n), vec(d2phi), vec(d3phi);
    return v;
  }

  static VariationalState unpack(std::size_t d, const Eigen::VectorXd& v) {
    const Eigen::Index n = static_cast<Eigen::Index>(2 * d);
    VariationalState s(PhasePoint::from_stacked(v.head(n)));
    s.dphi = Eigen::Map<const Eigen::MatrixXd>(v.data() + n, n, n);
    s.d2phi = unvec(s.d2phi.shape(), v.segment(n + n * n, n * n * n));
    s.d3phi = unvec(s.d3phi.shape(), v.segment(n + n * n + n * n * n, n * n * n * n));
    return s;
  }
};

/// Time derivative of the flow and its first three variational equations.
template <PotentialField P>
VariationalState variational_rhs(const VariationalState& s, const Hamiltonian<P>& h) {
  const std::size_t n = 2 * s.dimension();
  const Eigen::MatrixXd j = symplectic_j(s.dimension());
  const Eigen::MatrixXd m = j * h.hessian_matrix(s.z);
  const DenseTensor c3 = apply_j_first(h.derivative(s.z, 3));  // (J . D^3h)_{imn}
  const DenseTensor c4 = apply_j_first(h.derivative(s.z, 4));
  const Eigen::MatrixXd ft = s.dphi.transpose();

  VariationalState out(PhasePoint::from_stacked(j * h.gradient(s.z)));
  out.dphi = m * s.dphi;

  // g[i, j, n] = c3[i, m, n] dphi[m, j]
  const DenseTensor g = mode_multiply(ft, c3, 1);
  // (c3 x2 F x3 F)[i, j, k] = c3[i, m, n] dphi[m, j] dphi[n, k]
  out.d2phi = mode_multiply(ft, g, 2);
  out.d2phi += mode_multiply(m, s.d2phi, 0);

  DenseTensor t4 = mode_multiply(ft, mode_multiply(ft, mode_multiply(ft, c4, 1), 2), 3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < n; ++c) {
          double acc = 0.0;
          for (std::size_t r = 0; r < n; ++r) {
            // g is symmetric in its last two slots up to the F contraction on the middle one:
            // g[i, x, r] = sum_m c3[i, m, r] dphi[m, x].
            acc += g(i, a, r) * s.d2phi(r, b, c) + g(i, b, r) * s.d2phi(r, a, c) + g(i, c, r) * s.d2phi(r, a, b);
          }
          t4(i, a, b, c) += acc;
        }
  t4 += mode_multiply(m, s.d3phi, 0);
  out.d3phi = std::move(t4);
  return out;
}

/// Flow and variational equations from z0 over [0, t] with classical RK4.
template <PotentialField P>
VariationalState variational_flow(const PhasePoint& z0, double t, double tau, const P& v) {
  const StepCount c = commensurate_steps(t, tau);
  const Hamiltonian<P> h(v);
  const std::size_t d = z0.dimension();
  const OdeRhs f = [&](const Eigen::VectorXd& y) { return variational_rhs(VariationalState::unpack(d, y), h).pack(); };
  return VariationalState::unpack(d, rk4_integrate(f, VariationalState(z0).pack(), c.tau, c.steps));
}

/// RK4 for the flow alone, with `steps` equal steps over [0, t] (t may be negative).
template <PotentialField P>
PhasePoint rk4_flow(const PhasePoint& z0, double t, std::size_t steps, const P& v) {
  if (steps == 0) return z0;
  const Hamiltonian<P> h(v);
  const Eigen::MatrixXd j = symplectic_j(z0.dimension());
  const OdeRhs f = [&](const Eigen::VectorXd& y) { return Eigen::VectorXd(j * h.gradient(PhasePoint::from_stacked(y))); };
  return PhasePoint::from_stacked(rk4_integrate(f, z0.stacked(), t / static_cast<double>(steps), steps));
}

/// Number of equal sub-steps no longer than tau covering a span of length |t|.
inline std::size_t substeps_for(double t, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("time step must be positive");
  return static_cast<std::size_t>(std::ceil(std::abs(t) / tau - 1e-9));
}

/// D^3(a o Phi) at the initial point of the variational state, from the jet of a at its end
/// point (chain rule; indices l, m, n are derivatives in the initial point).
inline DenseTensor composed_third_derivative(const ObservableJet& a, const VariationalState& s) {
  const Eigen::MatrixXd ft = s.dphi.transpose();
  const std::size_t n = 2 * s.dimension();
  DenseTensor out = mode_multiply(ft, mode_multiply(ft, mode_multiply(ft, a.third, 0), 1), 2);
  for (std::size_t l = 0; l < n; ++l)
    for (std::size_t m = 0; m < n; ++m)
      for (std::size_t k = 0; k < n; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          acc += a.grad(static_cast<Eigen::Index>(i)) * s.d3phi(i, l, m, k);
          for (std::size_t j = 0; j < n; ++j) {
            const double h2 = a.hess(i, j);
            if (h2 == 0.0) continue;
            acc += h2 * (s.d2phi(i, l, m) * s.dphi(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) +
                         s.d2phi(i, l, k) * s.dphi(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(m)) +
                         s.d2phi(i, m, k) * s.dphi(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(l)));
          }
        }
        out(l, m, k) += acc;
      }
  return out;
}

/// The integrand {h, a o Phi^s}_3 at w = Phi^(t-s)(z0), written as
/// (J D~^3h)(w)_{nml} D^3(a o Phi^s)(w)_{lmn}, given the variational state started at w.
template <PotentialField P>
double tensor_bracket_integrand(const Observable& a, const VariationalState& s_from_w, const PhasePoint& w, const P& v) {
  const DenseTensor jd3 = apply_j_triple(tilde_d3h(derivative_tensor(v, w.q, 3)));
  const DenseTensor d3b = composed_third_derivative(a.jet(s_from_w.z), s_from_w);
  const std::size_t n = 2 * w.dimension();
  double acc = 0.0;
  for (std::size_t l = 0; l < n; ++l)
    for (std::size_t m = 0; m < n; ++m)
      for (std::size_t k = 0; k < n; ++k) acc += jd3(k, m, l) * d3b(l, m, k);
  return acc;
}

/// Same integrand through poisson_k, with the jet of a o Phi^s taken by finite differences of
/// the RK4 flow. Fully independent of the variational equations.
template <PotentialField P>
double direct_bracket_integrand(const Observable& a, const PhasePoint& w, double s, double tau, const P& v) {
  const std::size_t steps = substeps_for(s, tau);
  const Observable composed("a_o_flow", a.dimension(),
                            [&a, s, steps, &v](const PhasePoint& z) { return a(rk4_flow(z, s, steps, v)); });
  return poisson_k(total_energy(v), composed, 3, w);
}

/// Composite Simpson weights on n + 1 equispaced nodes over [0, t], n even.
inline std::vector<double> simpson_weights(std::size_t n, double t) {
  if (n < 2 || n % 2 != 0) throw std::invalid_argument("simpson: panel count must be even and at least 2");
  std::vector<double> w(n + 1);
  const double h = t / static_cast<double>(n);
  for (std::size_t k = 0; k <= n; ++k) w[k] = (k == 0 || k == n) ? h / 3 : (k % 2 == 1 ? 4 * h / 3 : 2 * h / 3);
  return w;
}

/// a2(t) for several observables by Simpson quadrature in s over n_quad panels. For each node
/// s_k the point w_k = Phi^(t - s_k)(z0) is reached with RK4 and the variational equations are
/// integrated from w_k over [0, s_k], both with sub-steps no longer than tau.
template <PotentialField P>
std::vector<double> a2_quadrature(const std::vector<Observable>& observables, const PhasePoint& z0, double t,
                                  std::size_t n_quad, const P& v, double tau = 1e-3) {
  std::vector<double> out(observables.size(), 0.0);
  if (n_quad < 2 || n_quad % 2 != 0) throw std::invalid_argument("a2_quadrature: n_quad must be even and >= 2");
  if (t == 0.0) return out;
  const std::vector<double> w = simpson_weights(n_quad, t);
  const double panel = t / static_cast<double>(n_quad);
  const std::size_t per_panel = substeps_for(panel, tau);

  // Nodes w_k for k = n_quad, n_quad - 1, ..., 0 are Phi^(j panel)(z0), j = 0..n_quad.
  std::vector<PhasePoint> nodes(n_quad + 1);
  nodes[n_quad] = z0;
  for (std::size_t j = 1; j <= n_quad; ++j) nodes[n_quad - j] = rk4_flow(nodes[n_quad - j + 1], panel, per_panel, v);

  const Hamiltonian<P> h(v);
  const std::size_t d = z0.dimension();
  const OdeRhs f = [&](const Eigen::VectorXd& y) { return variational_rhs(VariationalState::unpack(d, y), h).pack(); };
  const double dt = panel / static_cast<double>(per_panel);
  for (std::size_t k = 0; k <= n_quad; ++k) {
    const VariationalState s =
        VariationalState::unpack(d, rk4_integrate(f, VariationalState(nodes[k]).pack(), dt, k * per_panel));
    for (std::size_t o = 0; o < observables.size(); ++o) {
      out[o] += w[k] * tensor_bracket_integrand(observables[o], s, nodes[k], v);
    }
  }
  for (double& x : out) x *= -0.25;
  return out;
}

template <PotentialField P>
double a2_quadrature(const Observable& a, const PhasePoint& z0, double t, std::size_t n_quad, const P& v,
                     double tau = 1e-3) {
  return a2_quadrature(std::vector<Observable>{a}, z0, t, n_quad, v, tau).front();
}

/// int_0^t g(s, Phi^(t-s)(z0)) ds by composite Simpson with RK4 flow sub-steps no longer than tau.
template <PotentialField P>
double flow_integral(const std::function<double(double, const PhasePoint&)>& g, const PhasePoint& z0, double t,
                     std::size_t n_quad, const P& v, double tau = 1e-3) {
  if (t == 0.0) return 0.0;
  const std::vector<double> w = simpson_weights(n_quad, t);
  const double panel = t / static_cast<double>(n_quad);
  const std::size_t per_panel = substeps_for(panel, tau);
  double acc = 0.0;
  PhasePoint z = z0;  // Phi^(t - s_k)(z0), walking k downward
  for (std::size_t j = 0; j <= n_quad; ++j) {
    const std::size_t k = n_quad - j;
    acc += w[k] * g(static_cast<double>(k) * panel, z);
    if (j < n_quad) z = rk4_flow(z, panel, per_panel, v);
  }
  return acc;
}

}  // namespace semiclassical
