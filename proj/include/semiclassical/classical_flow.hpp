#pragma once

// Symplectic integration of q' = p, p' = -DV(q): exact drift and kick sub-flows,
// the symmetric Strang step, and higher-order compositions of it.

#include "semiclassical/phase_space.hpp"
#include "semiclassical/potentials.hpp"

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace semiclassical {

/// q <- q + t p.
inline PhasePoint drift(double t, PhasePoint z) {
  z.q += t * z.p;
  return z;
}

/// p <- p - t DV(q).
template <PotentialField P>
PhasePoint kick(double t, PhasePoint z, const P& v) {
  Eigen::VectorXd g(z.q.size());
  v.gradient(as_span(z.q), as_span(g));
  z.p -= t * g;
  return z;
}

enum class StrangOrdering { drift_kick_drift, kick_drift_kick };

/// One symmetric second-order step. The default is drift(t/2) kick(t) drift(t/2).
template <PotentialField P>
PhasePoint strang_step(double tau, const PhasePoint& z, const P& v,
                       StrangOrdering ordering = StrangOrdering::drift_kick_drift) {
  if (ordering == StrangOrdering::drift_kick_drift) return drift(0.5 * tau, kick(tau, drift(0.5 * tau, z), v));
  return kick(0.5 * tau, drift(tau, kick(0.5 * tau, z, v)), v);
}

enum class Composition {
  /// Recursive triple jump, any even order up to 8.
  triple_jump,
  /// Yoshida's 15-stage symmetric eighth-order set (his solution D); order 8 only.
  yoshida8_optimized,
};

/// Weights w_i such that one step of length tau is the product of base steps of length w_i tau.
///
/// Triple jump: level 2 is a single unit step; level 2k+2 is the level-2k scheme run with step
/// lengths g tau, (1 - 2g) tau, g tau in turn, g = 1 / (2 - 2^(1/(2k+1))).
class SplittingScheme {
 public:
  explicit SplittingScheme(int order, Composition kind = Composition::triple_jump)
      : order_(order), kind_(kind), weights_{1.0} {
    if (order < 2 || order % 2 != 0 || order > 8) {
      throw std::invalid_argument("splitting order must be one of 2, 4, 6, 8 (got " + std::to_string(order) + ")");
    }
    if (kind == Composition::yoshida8_optimized) {
      if (order != 8) throw std::invalid_argument("the optimized composition exists for order 8 only");
      static constexpr double w[7] = {0.102799849391985,  -1.96061023297549,  1.93813913762276,
                                      -0.158240635368243, -1.44485223686048,  0.253693336566229,
                                      0.914844246229740};
      double sum = 0.0;
      for (double x : w) sum += x;
      weights_.clear();
      for (int i = 6; i >= 0; --i) weights_.push_back(w[i]);
      weights_.push_back(1.0 - 2.0 * sum);
      for (int i = 0; i < 7; ++i) weights_.push_back(w[i]);
      return;
    }
    for (int k = 1; 2 * k < order; ++k) {
      const double g = gamma(k);
      std::vector<double> next;
      next.reserve(3 * weights_.size());
      for (double outer : {g, 1.0 - 2.0 * g, g}) {
        for (double x : weights_) next.push_back(outer * x);
      }
      weights_ = std::move(next);
    }
  }

  /// g for the step from order 2k to 2k+2.
  static double gamma(int k) { return 1.0 / (2.0 - std::pow(2.0, 1.0 / (2.0 * k + 1.0))); }

  int order() const { return order_; }
  Composition kind() const { return kind_; }
  const std::vector<double>& weights() const { return weights_; }
  std::size_t substeps() const { return weights_.size(); }

 private:
  int order_;
  Composition kind_;
  std::vector<double> weights_;
};

/// Scheme used for the classical flow: the optimized set at order 8, the triple jump otherwise.
inline SplittingScheme default_flow_scheme(int order) {
  return order == 8 ? SplittingScheme(8, Composition::yoshida8_optimized) : SplittingScheme(order);
}

inline SplittingScheme make_splitting_scheme(int order) { return SplittingScheme(order); }

/// Turns a symmetric second-order step into one of the requested order.
template <class State>
std::function<State(double, const State&)> compose_order(std::function<State(double, const State&)> base_step,
                                                         int order, Composition kind = Composition::triple_jump) {
  SplittingScheme scheme(order, kind);
  if (order == 2) return base_step;
  return [base = std::move(base_step), w = scheme.weights()](double tau, const State& s) {
    State out = s;
    for (double c : w) out = base(c * tau, out);
    return out;
  };
}

struct StepCount {
  std::size_t steps = 0;
  double tau = 0.0;
};

/// Splits [0, t] into round(t / tau) equal steps. The ratio must be within 1e-9 (relative) of an
/// integer; no partial final step is taken.
inline StepCount commensurate_steps(double t, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw std::invalid_argument("time step must be positive and finite");
  if (!(t >= 0.0) || !std::isfinite(t)) throw std::invalid_argument("final time must be nonnegative and finite");
  const double ratio = t / tau;
  const double n = std::round(ratio);
  if (std::abs(ratio - n) > 1e-9 * std::max(1.0, ratio)) {
    throw std::invalid_argument("time " + std::to_string(t) + " is not an integer multiple of step " +
                                std::to_string(tau));
  }
  StepCount c;
  c.steps = static_cast<std::size_t>(n);
  c.tau = c.steps > 0 ? t / n : tau;
  return c;
}

/// A composed drift/kick integrator flattened into alternating coefficient lists with adjacent
/// drifts merged. Works in place on raw q, p arrays with one gradient buffer, so it is cheap to
/// run per sample point.
class FlowStepper {
 public:
  explicit FlowStepper(const SplittingScheme& scheme, StrangOrdering ordering = StrangOrdering::drift_kick_drift)
      : order_(scheme.order()) {
    // Sequence of (type, weight) pairs before merging: 0 = drift, 1 = kick.
    std::vector<std::pair<int, double>> ops;
    for (double w : scheme.weights()) {
      if (ordering == StrangOrdering::drift_kick_drift) {
        ops.push_back({0, 0.5 * w});
        ops.push_back({1, w});
        ops.push_back({0, 0.5 * w});
      } else {
        ops.push_back({1, 0.5 * w});
        ops.push_back({0, w});
        ops.push_back({1, 0.5 * w});
      }
    }
    for (const auto& op : ops) {
      if (!ops_.empty() && ops_.back().first == op.first) {
        ops_.back().second += op.second;
      } else {
        ops_.push_back(op);
      }
    }
  }

  int order() const { return order_; }
  std::size_t gradient_evaluations() const {
    std::size_t n = 0;
    for (const auto& op : ops_) n += static_cast<std::size_t>(op.first);
    return n;
  }

  /// Advances (q, p) by one step of length tau. grad is scratch of length d.
  template <PotentialField P>
  void step(double tau, std::span<double> q, std::span<double> p, std::span<double> grad, const P& v) const {
    const std::size_t d = q.size();
    for (const auto& [type, w] : ops_) {
      const double c = w * tau;
      if (type == 0) {
        for (std::size_t i = 0; i < d; ++i) q[i] += c * p[i];
      } else {
        v.gradient(q, grad);
        for (std::size_t i = 0; i < d; ++i) p[i] -= c * grad[i];
      }
    }
  }

  template <PotentialField P>
  PhasePoint step(double tau, PhasePoint z, const P& v) const {
    Eigen::VectorXd g(z.q.size());
    step(tau, as_span(z.q), as_span(z.p), as_span(g), v);
    return z;
  }

 private:
  int order_;
  std::vector<std::pair<int, double>> ops_;
};

/// Approximates the flow at time t from z0 with round(t / tau) steps of the given order.
/// Order 8 uses the optimized composition; see default_flow_scheme.
template <PotentialField P>
PhasePoint propagate(const PhasePoint& z0, double t, double tau, int order, const P& v) {
  const StepCount c = commensurate_steps(t, tau);
  const FlowStepper stepper(default_flow_scheme(order));
  PhasePoint z = z0;
  Eigen::VectorXd g(z.q.size());
  for (std::size_t n = 0; n < c.steps; ++n) stepper.step(c.tau, as_span(z.q), as_span(z.p), as_span(g), v);
  return z;
}

}  // namespace semiclassical
