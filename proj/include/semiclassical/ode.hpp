#pragma once

// Classical fourth-order Runge-Kutta for autonomous systems y' = f(y). Used only by the
// oracle paths, never by the splitting integrators.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>

namespace semiclassical {

using OdeRhs = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

inline Eigen::VectorXd rk4_step(const OdeRhs& f, const Eigen::VectorXd& y, double h) {
  const Eigen::VectorXd k1 = f(y);
  const Eigen::VectorXd k2 = f(y + 0.5 * h * k1);
  const Eigen::VectorXd k3 = f(y + 0.5 * h * k2);
  const Eigen::VectorXd k4 = f(y + h * k3);
  return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

inline Eigen::VectorXd rk4_integrate(const OdeRhs& f, Eigen::VectorXd y, double h, std::size_t steps) {
  for (std::size_t n = 0; n < steps; ++n) y = rk4_step(f, y, h);
  return y;
}

}  // namespace semiclassical
