#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <stdexcept>

namespace semiclassical {

/// A point z = (q, p) of the 2d-dimensional phase space.
struct PhasePoint {
  Eigen::VectorXd q;
  Eigen::VectorXd p;

  PhasePoint() = default;
  PhasePoint(Eigen::VectorXd position, Eigen::VectorXd momentum)
      : q(std::move(position)), p(std::move(momentum)) {
    if (q.size() != p.size()) throw std::invalid_argument("PhasePoint: q and p differ in dimension");
  }

  static PhasePoint zero(std::size_t d) {
    const auto n = static_cast<Eigen::Index>(d);
    return {Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n)};
  }

  /// Splits a stacked (q, p) vector of length 2d.
  static PhasePoint from_stacked(const Eigen::VectorXd& z) {
    if (z.size() % 2 != 0) throw std::invalid_argument("PhasePoint: stacked vector must have even length");
    const Eigen::Index d = z.size() / 2;
    return {z.head(d), z.tail(d)};
  }

  std::size_t dimension() const { return static_cast<std::size_t>(q.size()); }

  Eigen::VectorXd stacked() const {
    Eigen::VectorXd z(q.size() + p.size());
    z << q, p;
    return z;
  }

  bool is_finite() const { return q.allFinite() && p.allFinite(); }
};

inline double max_abs_difference(const PhasePoint& a, const PhasePoint& b) {
  return std::max((a.q - b.q).cwiseAbs().maxCoeff(), (a.p - b.p).cwiseAbs().maxCoeff());
}

}  // namespace semiclassical
