#pragma once

// Potentials V : R^d -> R with analytic derivative tensors up to order four,
// and the Schroedinger Hamiltonian h(q, p) = |p|^2 / 2 + V(q) built on them.
//
// Derivative tensors are written into caller-provided row-major buffers of
// length d, d^2, d^3 and d^4 so that the trajectory loops never allocate.

#include "semiclassical/phase_space.hpp"
#include "semiclassical/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <concepts>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace semiclassical {

template <class P>
concept PotentialField = requires(const P& v, std::span<const double> q, std::span<double> out) {
  { v.dimension() } -> std::convertible_to<std::size_t>;
  { v.value(q) } -> std::convertible_to<double>;
  v.gradient(q, out);
  v.hessian(q, out);
  v.third(q, out);
  v.fourth(q, out);
};

/// Potentials whose derivative tensors of order >= 2 vanish off the diagonal.
/// diagonal(order, q, out) writes the d diagonal entries of D^order V.
template <class P>
concept SeparablePotential = PotentialField<P> && requires(const P& v, std::span<const double> q,
                                                           std::span<double> out) {
  v.diagonal(2, q, out);
};

namespace detail {

inline void check_buffer(std::span<const double> q, std::span<double> out, std::size_t d, std::size_t order) {
  std::size_t n = 1;
  for (std::size_t i = 0; i < order; ++i) n *= d;
  if (q.size() != d || out.size() != n) {
    throw std::invalid_argument("potential: buffer size mismatch for derivative of order " + std::to_string(order));
  }
}

// Writes diag[i] at (i, i, ..., i) of an order-k cube buffer, zero elsewhere.
inline void scatter_diagonal(std::span<const double> diag, std::size_t order, std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  const std::size_t d = diag.size();
  std::size_t stride = 0;
  for (std::size_t k = 0, p = 1; k < order; ++k, p *= d) stride += p;
  for (std::size_t i = 0; i < d; ++i) out[i * stride] = diag[i];
}

}  // namespace detail

/// V(q) = d - sum_j cos(q_j).
class TorsionalPotential {
 public:
  explicit TorsionalPotential(std::size_t d) : d_(d) {
    if (d == 0) throw std::invalid_argument("torsional potential: dimension must be positive");
  }

  std::size_t dimension() const { return d_; }
  std::string name() const { return "torsional"; }

  double value(std::span<const double> q) const {
    double v = static_cast<double>(d_);
    for (double x : q) v -= std::cos(x);
    return v;
  }

  void gradient(std::span<const double> q, std::span<double> out) const {
    detail::check_buffer(q, out, d_, 1);
    for (std::size_t i = 0; i < d_; ++i) out[i] = std::sin(q[i]);
  }

  void diagonal(int order, std::span<const double> q, std::span<double> out) const {
    for (std::size_t i = 0; i < d_; ++i) {
      switch (order) {
        case 1: out[i] = std::sin(q[i]); break;
        case 2: out[i] = std::cos(q[i]); break;
        case 3: out[i] = -std::sin(q[i]); break;
        case 4: out[i] = -std::cos(q[i]); break;
        default: throw std::invalid_argument("torsional potential: derivative order out of range");
      }
    }
  }

  void hessian(std::span<const double> q, std::span<double> out) const { dense(2, q, out); }
  void third(std::span<const double> q, std::span<double> out) const { dense(3, q, out); }
  void fourth(std::span<const double> q, std::span<double> out) const { dense(4, q, out); }

 private:
  void dense(int order, std::span<const double> q, std::span<double> out) const {
    detail::check_buffer(q, out, d_, static_cast<std::size_t>(order));
    std::vector<double> diag(d_);
    diagonal(order, q, diag);
    detail::scatter_diagonal(diag, static_cast<std::size_t>(order), out);
  }

  std::size_t d_;
};

/// V(q) = 1/2 sum_j w_j^2 q_j^2.
class HarmonicPotential {
 public:
  explicit HarmonicPotential(std::vector<double> stiffness) : omega_(std::move(stiffness)) {
    if (omega_.empty()) throw std::invalid_argument("harmonic potential: dimension must be positive");
    for (double w : omega_) {
      if (!(w > 0.0)) throw std::invalid_argument("harmonic potential: stiffness must be positive");
    }
  }

  std::size_t dimension() const { return omega_.size(); }
  std::string name() const { return "harmonic"; }
  const std::vector<double>& stiffness() const { return omega_; }

  double value(std::span<const double> q) const {
    double v = 0.0;
    for (std::size_t i = 0; i < omega_.size(); ++i) v += 0.5 * omega_[i] * omega_[i] * q[i] * q[i];
    return v;
  }

  void gradient(std::span<const double> q, std::span<double> out) const {
    detail::check_buffer(q, out, omega_.size(), 1);
    for (std::size_t i = 0; i < omega_.size(); ++i) out[i] = omega_[i] * omega_[i] * q[i];
  }

  void diagonal(int order, std::span<const double> q, std::span<double> out) const {
    for (std::size_t i = 0; i < omega_.size(); ++i) {
      switch (order) {
        case 1: out[i] = omega_[i] * omega_[i] * q[i]; break;
        case 2: out[i] = omega_[i] * omega_[i]; break;
        case 3:
        case 4: out[i] = 0.0; break;
        default: throw std::invalid_argument("harmonic potential: derivative order out of range");
      }
    }
  }

  void hessian(std::span<const double> q, std::span<double> out) const { dense(2, q, out); }
  void third(std::span<const double> q, std::span<double> out) const { dense(3, q, out); }
  void fourth(std::span<const double> q, std::span<double> out) const { dense(4, q, out); }

 private:
  void dense(int order, std::span<const double> q, std::span<double> out) const {
    detail::check_buffer(q, out, omega_.size(), static_cast<std::size_t>(order));
    std::vector<double> diag(omega_.size());
    diagonal(order, q, diag);
    detail::scatter_diagonal(diag, static_cast<std::size_t>(order), out);
  }

  std::vector<double> omega_;
};

inline TorsionalPotential torsional_potential(std::size_t d) { return TorsionalPotential(d); }

inline HarmonicPotential harmonic_potential(std::size_t d, std::vector<double> stiffness) {
  if (stiffness.size() != d) throw std::invalid_argument("harmonic potential: need one stiffness per dimension");
  return HarmonicPotential(std::move(stiffness));
}

/// Built-in potentials selectable by name from a run configuration.
using AnyPotential = std::variant<TorsionalPotential, HarmonicPotential>;

inline AnyPotential make_potential(const std::string& name, std::size_t d, const std::vector<double>& params) {
  if (name == "torsional") {
    if (!params.empty()) throw std::invalid_argument("torsional potential takes no parameters");
    return TorsionalPotential(d);
  }
  if (name == "harmonic") {
    if (params.empty()) return HarmonicPotential(std::vector<double>(d, 1.0));
    return harmonic_potential(d, params);
  }
  throw std::invalid_argument("unknown potential '" + name + "' (expected torsional or harmonic)");
}

inline std::size_t potential_dimension(const AnyPotential& v) {
  return std::visit([](const auto& p) { return p.dimension(); }, v);
}

// Dense tensor helpers, mostly for tests and the oracle paths.

template <PotentialField P>
DenseTensor derivative_tensor(const P& v, std::span<const double> q, int order) {
  const std::size_t d = v.dimension();
  DenseTensor t = DenseTensor::cube(d, static_cast<std::size_t>(order));
  switch (order) {
    case 1: v.gradient(q, t.data()); break;
    case 2: v.hessian(q, t.data()); break;
    case 3: v.third(q, t.data()); break;
    case 4: v.fourth(q, t.data()); break;
    default: throw std::invalid_argument("derivative_tensor: order must be 1..4");
  }
  return t;
}

template <PotentialField P>
DenseTensor derivative_tensor(const P& v, const Eigen::VectorXd& q, int order) {
  return derivative_tensor(v, std::span<const double>(q.data(), static_cast<std::size_t>(q.size())), order);
}

/// Max |analytic D^order V - central differences of D^(order-1) V| at q.
template <PotentialField P>
double finite_difference_check(const P& v, const Eigen::VectorXd& q, int order, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_difference_check: step must be positive");
  if (order < 1 || order > 4) throw std::invalid_argument("finite_difference_check: order must be 1..4");
  const std::size_t d = v.dimension();
  const DenseTensor analytic = derivative_tensor(v, q, order);
  const std::size_t lower = analytic.size() / d;
  double worst = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    Eigen::VectorXd qp = q;
    Eigen::VectorXd qm = q;
    qp[static_cast<Eigen::Index>(j)] += step;
    qm[static_cast<Eigen::Index>(j)] -= step;
    std::vector<double> fp(lower);
    std::vector<double> fm(lower);
    if (order == 1) {
      fp[0] = v.value(std::span<const double>(qp.data(), d));
      fm[0] = v.value(std::span<const double>(qm.data(), d));
    } else {
      const DenseTensor tp = derivative_tensor(v, qp, order - 1);
      const DenseTensor tm = derivative_tensor(v, qm, order - 1);
      std::copy(tp.data().begin(), tp.data().end(), fp.begin());
      std::copy(tm.data().begin(), tm.data().end(), fm.begin());
    }
    // The differentiated direction is the last index of D^order V.
    for (std::size_t r = 0; r < lower; ++r) {
      const double fd = (fp[r] - fm[r]) / (2.0 * step);
      worst = std::max(worst, std::abs(fd - analytic.raw()[r * d + j]));
      if (std::isnan(fd) || std::isnan(analytic.raw()[r * d + j])) return std::nan("");
    }
  }
  return worst;
}

/// h(q, p) = |p|^2 / 2 + V(q) with dense derivative tensors on the 2d index space
/// (positions first, then momenta).
template <PotentialField P>
class Hamiltonian {
 public:
  explicit Hamiltonian(P potential) : v_(std::move(potential)) {}

  const P& potential() const { return v_; }
  std::size_t dimension() const { return v_.dimension(); }

  double value(const PhasePoint& z) const {
    return 0.5 * z.p.squaredNorm() + v_.value(span_of(z.q));
  }

  /// Dh = (DV(q), p).
  Eigen::VectorXd gradient(const PhasePoint& z) const {
    const std::size_t d = dimension();
    Eigen::VectorXd g(2 * static_cast<Eigen::Index>(d));
    v_.gradient(span_of(z.q), std::span<double>(g.data(), d));
    g.tail(static_cast<Eigen::Index>(d)) = z.p;
    return g;
  }

  /// D^k h as a dense (2d)^k tensor, k = 2..4.
  DenseTensor derivative(const PhasePoint& z, int order) const {
    const std::size_t d = dimension();
    const DenseTensor dv = derivative_tensor(v_, z.q, order);
    DenseTensor out = DenseTensor::cube(2 * d, static_cast<std::size_t>(order));
    std::vector<std::size_t> idx(static_cast<std::size_t>(order));
    for (std::size_t flat = 0; flat < dv.size(); ++flat) {
      idx = dv.multi_index(flat);
      out.at(idx) = dv.raw()[flat];
    }
    if (order == 2) {
      for (std::size_t i = 0; i < d; ++i) out(d + i, d + i) = 1.0;
    }
    return out;
  }

  Eigen::MatrixXd hessian_matrix(const PhasePoint& z) const {
    const DenseTensor h2 = derivative(z, 2);
    const auto n = static_cast<Eigen::Index>(2 * dimension());
    Eigen::MatrixXd m(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) m(i, j) = h2(i, j);
    return m;
  }

 private:
  static std::span<const double> span_of(const Eigen::VectorXd& x) {
    return {x.data(), static_cast<std::size_t>(x.size())};
  }

  P v_;
};

inline std::span<const double> as_span(const Eigen::VectorXd& x) {
  return {x.data(), static_cast<std::size_t>(x.size())};
}
inline std::span<double> as_span(Eigen::VectorXd& x) { return {x.data(), static_cast<std::size_t>(x.size())}; }

}  // namespace semiclassical
