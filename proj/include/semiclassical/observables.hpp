#pragma once

// Classical observables a(q, p) with derivative tensors up to third order on the 2d index
// space (positions first). Built-ins carry analytic jets; anything else falls back to central
// differences of the value.

#include "semiclassical/phase_space.hpp"
#include "semiclassical/potentials.hpp"
#include "semiclassical/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace semiclassical {

/// Da, D^2 a, D^3 a at one phase-space point, dense row-major over 2d indices.
struct ObservableJet {
  Eigen::VectorXd grad;
  DenseTensor hess;
  DenseTensor third;

  explicit ObservableJet(std::size_t d = 0)
      : grad(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(2 * d))),
        hess(DenseTensor::cube(2 * d, 2)),
        third(DenseTensor::cube(2 * d, 3)) {}
};

class Observable {
 public:
  using ValueFn = std::function<double(const PhasePoint&)>;
  using JetFn = std::function<void(const PhasePoint&, ObservableJet&)>;

  Observable(std::string name, std::size_t d, ValueFn value, JetFn jet = {})
      : name_(std::move(name)), d_(d), value_(std::move(value)), jet_(std::move(jet)) {
    if (!value_) throw std::invalid_argument("observable '" + name_ + "' needs a value function");
  }

  const std::string& name() const { return name_; }
  std::size_t dimension() const { return d_; }
  bool has_analytic_jet() const { return static_cast<bool>(jet_); }

  double operator()(const PhasePoint& z) const { return value_(z); }

  ObservableJet jet(const PhasePoint& z) const {
    ObservableJet j(d_);
    if (jet_) {
      jet_(z, j);
    } else {
      finite_difference_jet(z, j);
    }
    return j;
  }

  /// Central-difference jet of the value function. Steps grow with the derivative order to
  /// balance truncation against cancellation: 1e-5, 1e-4, 2e-3, each times (1 + |z|).
  void finite_difference_jet(const PhasePoint& z, ObservableJet& j) const {
    const Eigen::VectorXd x = z.stacked();
    const auto n = x.size();
    const double scale = 1.0 + x.norm();
    auto f = [&](const Eigen::VectorXd& y) { return value_(PhasePoint::from_stacked(y)); };
    auto shifted = [&](std::initializer_list<std::pair<Eigen::Index, double>> moves) {
      Eigen::VectorXd y = x;
      for (const auto& [i, h] : moves) y(i) += h;
      return f(y);
    };

    const double h1 = 1e-5 * scale;
    for (Eigen::Index i = 0; i < n; ++i) j.grad(i) = (shifted({{i, h1}}) - shifted({{i, -h1}})) / (2 * h1);

    const double h2 = 1e-4 * scale;
    for (Eigen::Index a = 0; a < n; ++a)
      for (Eigen::Index b = a; b < n; ++b) {
        const double v = (shifted({{a, h2}, {b, h2}}) - shifted({{a, h2}, {b, -h2}}) -
                          shifted({{a, -h2}, {b, h2}}) + shifted({{a, -h2}, {b, -h2}})) /
                         (4 * h2 * h2);
        j.hess(a, b) = v;
        j.hess(b, a) = v;
      }

    // Third derivatives: product stencil, Richardson-extrapolated over h and h/2.
    const double h3 = 2e-3 * scale;
    auto cube_stencil = [&](Eigen::Index a, Eigen::Index b, Eigen::Index c, double h) {
      double s = 0.0;
      for (int m = 0; m < 8; ++m) {
        const double sa = (m & 1) ? -1.0 : 1.0;
        const double sb = (m & 2) ? -1.0 : 1.0;
        const double sc = (m & 4) ? -1.0 : 1.0;
        s += sa * sb * sc * shifted({{a, sa * h}, {b, sb * h}, {c, sc * h}});
      }
      return s / (8 * h * h * h);
    };
    for (Eigen::Index a = 0; a < n; ++a)
      for (Eigen::Index b = a; b < n; ++b)
        for (Eigen::Index c = b; c < n; ++c) {
          const double s = (4.0 * cube_stencil(a, b, c, 0.5 * h3) - cube_stencil(a, b, c, h3)) / 3.0;
          const std::size_t i0 = static_cast<std::size_t>(a), i1 = static_cast<std::size_t>(b),
                            i2 = static_cast<std::size_t>(c);
          j.third(i0, i1, i2) = j.third(i0, i2, i1) = j.third(i1, i0, i2) = s;
          j.third(i1, i2, i0) = j.third(i2, i0, i1) = j.third(i2, i1, i0) = s;
        }
  }

  /// Same observable without its analytic jet, for testing the fallback.
  Observable without_jet() const { return Observable(name_ + "_fd", d_, value_); }

 private:
  std::string name_;
  std::size_t d_;
  ValueFn value_;
  JetFn jet_;
};

/// (q, p) -> q_j with j counted from 1.
inline Observable position(std::size_t j, std::size_t d) {
  if (j < 1 || j > d) throw std::out_of_range("position index " + std::to_string(j) + " outside 1.." + std::to_string(d));
  const auto k = static_cast<Eigen::Index>(j - 1);
  return Observable(
      "q" + std::to_string(j), d, [k](const PhasePoint& z) { return z.q(k); },
      [k](const PhasePoint&, ObservableJet& jet) { jet.grad(k) = 1.0; });
}

/// (q, p) -> p_j with j counted from 1.
inline Observable momentum(std::size_t j, std::size_t d) {
  if (j < 1 || j > d) throw std::out_of_range("momentum index " + std::to_string(j) + " outside 1.." + std::to_string(d));
  const auto k = static_cast<Eigen::Index>(j - 1);
  const auto dd = static_cast<Eigen::Index>(d);
  return Observable(
      "p" + std::to_string(j), d, [k](const PhasePoint& z) { return z.p(k); },
      [k, dd](const PhasePoint&, ObservableJet& jet) { jet.grad(dd + k) = 1.0; });
}

/// (q, p) -> |p|^2 / 2.
inline Observable kinetic(std::size_t d) {
  return Observable(
      "kinetic", d, [](const PhasePoint& z) { return 0.5 * z.p.squaredNorm(); },
      [d](const PhasePoint& z, ObservableJet& jet) {
        for (std::size_t i = 0; i < d; ++i) {
          jet.grad(static_cast<Eigen::Index>(d + i)) = z.p(static_cast<Eigen::Index>(i));
          jet.hess(d + i, d + i) = 1.0;
        }
      });
}

namespace detail {

template <PotentialField P>
void add_potential_jet(const P& v, const PhasePoint& z, ObservableJet& jet) {
  const std::size_t d = v.dimension();
  const std::span<const double> q = as_span(z.q);
  std::vector<double> g(d), h(d * d), t(d * d * d);
  v.gradient(q, g);
  v.hessian(q, h);
  v.third(q, t);
  for (std::size_t i = 0; i < d; ++i) {
    jet.grad(static_cast<Eigen::Index>(i)) += g[i];
    for (std::size_t j = 0; j < d; ++j) {
      jet.hess(i, j) += h[i * d + j];
      for (std::size_t k = 0; k < d; ++k) jet.third(i, j, k) += t[(i * d + j) * d + k];
    }
  }
}

}  // namespace detail

/// (q, p) -> V(q).
template <PotentialField P>
Observable potential_energy(const P& v) {
  return Observable(
      "potential", v.dimension(), [v](const PhasePoint& z) { return v.value(as_span(z.q)); },
      [v](const PhasePoint& z, ObservableJet& jet) { detail::add_potential_jet(v, z, jet); });
}

/// (q, p) -> |p|^2 / 2 + V(q).
template <PotentialField P>
Observable total_energy(const P& v) {
  const std::size_t d = v.dimension();
  return Observable(
      "total", d, [v](const PhasePoint& z) { return 0.5 * z.p.squaredNorm() + v.value(as_span(z.q)); },
      [v, d](const PhasePoint& z, ObservableJet& jet) {
        for (std::size_t i = 0; i < d; ++i) {
          jet.grad(static_cast<Eigen::Index>(d + i)) = z.p(static_cast<Eigen::Index>(i));
          jet.hess(d + i, d + i) = 1.0;
        }
        detail::add_potential_jet(v, z, jet);
      });
}

/// The constant observable a = 1.
inline Observable unit_observable(std::size_t d) {
  return Observable(
      "one", d, [](const PhasePoint&) { return 1.0; }, [](const PhasePoint&, ObservableJet&) {});
}

inline const std::vector<std::string>& builtin_observable_names() {
  static const std::vector<std::string> names{"q1", "q2", "p1", "p2", "kinetic", "potential", "total"};
  return names;
}

/// Looks up "qJ", "pJ", "kinetic", "potential" or "total".
inline Observable make_observable(const std::string& name, const AnyPotential& potential) {
  const std::size_t d = potential_dimension(potential);
  if (name == "kinetic") return kinetic(d);
  if (name == "potential") return std::visit([](const auto& v) { return potential_energy(v); }, potential);
  if (name == "total") return std::visit([](const auto& v) { return total_energy(v); }, potential);
  if (name.size() >= 2 && (name[0] == 'q' || name[0] == 'p')) {
    std::size_t j = 0;
    for (std::size_t i = 1; i < name.size(); ++i) {
      if (name[i] < '0' || name[i] > '9') throw std::invalid_argument("unknown observable '" + name + "'");
      j = 10 * j + static_cast<std::size_t>(name[i] - '0');
    }
    return name[0] == 'q' ? position(j, d) : momentum(j, d);
  }
  throw std::invalid_argument("unknown observable '" + name + "'");
}

}  // namespace semiclassical
