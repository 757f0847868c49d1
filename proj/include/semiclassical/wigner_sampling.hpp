#pragma once

// Wigner functions of Gaussian wave packets and quasi-Monte Carlo quadrature against them.
//
// W(z) = (pi eps)^(-d) exp(-|z - z0|^2 / eps) is the normal density with covariance (eps/2) Id
// on phase space. Nodes are Halton points pushed through the inverse normal CDF.

#include "semiclassical/phase_space.hpp"

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace semiclassical {

struct GaussianPacket {
  PhasePoint center;
  double epsilon = 1.0;

  GaussianPacket(PhasePoint c, double eps) : center(std::move(c)), epsilon(eps) {
    if (!(eps > 0.0) || !std::isfinite(eps)) throw std::invalid_argument("packet: epsilon must be positive");
  }

  std::size_t dimension() const { return center.dimension(); }
  /// Standard deviation of every phase-space coordinate.
  double sigma() const { return std::sqrt(0.5 * epsilon); }
};

inline double wigner_density(const GaussianPacket& packet, const PhasePoint& z) {
  const double r2 = (z.q - packet.center.q).squaredNorm() + (z.p - packet.center.p).squaredNorm();
  const double d = static_cast<double>(packet.dimension());
  return std::pow(std::numbers::pi * packet.epsilon, -d) * std::exp(-r2 / packet.epsilon);
}

/// Radical inverse of index in the given base.
inline double halton(std::uint64_t index, std::uint32_t base) {
  if (index < 1) throw std::invalid_argument("halton: index must be at least 1");
  if (base < 2) throw std::invalid_argument("halton: base must be at least 2");
  double result = 0.0;
  double f = 1.0 / base;
  while (index > 0) {
    result += static_cast<double>(index % base) * f;
    index /= base;
    f /= base;
  }
  return result;
}

inline std::vector<std::uint32_t> first_primes(std::size_t count) {
  std::vector<std::uint32_t> primes;
  for (std::uint32_t c = 2; primes.size() < count; ++c) {
    bool prime = true;
    for (std::uint32_t p : primes) {
      if (p * p > c) break;
      if (c % p == 0) {
        prime = false;
        break;
      }
    }
    if (prime) primes.push_back(c);
  }
  return primes;
}

/// Standard normal quantile: Acklam's rational approximation followed by one Halley step on
/// the erfc-based CDF.
inline double inverse_normal_cdf(double u) {
  if (!(u > 0.0 && u < 1.0)) throw std::domain_error("inverse_normal_cdf: argument must lie in (0, 1)");
  static constexpr double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                  1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                  6.680131188771972e+01, -1.328068155288572e+01};
  static constexpr double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                  -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double e[4] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                  3.754408661907416e+00};
  constexpr double low = 0.02425;

  // Work on the lower half and mirror, so q(1 - u) = -q(u) holds by construction.
  const bool upper = u > 0.5;
  const double v = upper ? 1.0 - u : u;
  double x;
  if (v < low) {
    const double q = std::sqrt(-2.0 * std::log(v));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((e[0] * q + e[1]) * q + e[2]) * q + e[3]) * q + 1.0);
  } else {
    const double q = v - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  }
  if (v != 0.5) {
    const double err = 0.5 * std::erfc(-x / std::numbers::sqrt2) - v;
    const double g = err * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
    x -= g / (1.0 + 0.5 * x * g);
  }
  return upper ? -x : x;
}

/// Halton nodes in (0,1)^(2d) with the first 2d primes as bases; node j uses index skip + j + 1.
struct QmcSampler {
  std::size_t count = 0;
  std::size_t skip = 64;

  QmcSampler(std::size_t n, std::size_t skip_count = 64) : count(n), skip(skip_count) {
    if (n < 1) throw std::invalid_argument("sampler: need at least one point");
  }

  /// Unit-cube node j (0-based) in dimension dims.
  std::vector<double> unit_point(std::size_t j, std::size_t dims) const {
    const std::vector<std::uint32_t> bases = first_primes(dims);
    std::vector<double> u(dims);
    for (std::size_t k = 0; k < dims; ++k) u[k] = halton(skip + j + 1, bases[k]);
    return u;
  }
};

/// Maps a unit-cube point to phase space: coordinate-wise quantile, scaled by sqrt(eps/2),
/// shifted by the packet center (positions first).
inline PhasePoint map_to_packet(const GaussianPacket& packet, const std::vector<double>& u) {
  const std::size_t d = packet.dimension();
  if (u.size() != 2 * d) throw std::invalid_argument("map_to_packet: expected 2d coordinates");
  const double s = packet.sigma();
  PhasePoint z = packet.center;
  for (std::size_t i = 0; i < d; ++i) {
    z.q(static_cast<Eigen::Index>(i)) += s * inverse_normal_cdf(u[i]);
    z.p(static_cast<Eigen::Index>(i)) += s * inverse_normal_cdf(u[d + i]);
  }
  return z;
}

inline std::vector<PhasePoint> sample_points(const GaussianPacket& packet, const QmcSampler& sampler) {
  const std::size_t dims = 2 * packet.dimension();
  const std::vector<std::uint32_t> bases = first_primes(dims);
  std::vector<PhasePoint> out;
  out.reserve(sampler.count);
  std::vector<double> u(dims);
  for (std::size_t j = 0; j < sampler.count; ++j) {
    for (std::size_t k = 0; k < dims; ++k) u[k] = halton(sampler.skip + j + 1, bases[k]);
    out.push_back(map_to_packet(packet, u));
  }
  return out;
}

inline double qmc_expectation(const std::function<double(const PhasePoint&)>& f, const std::vector<PhasePoint>& points) {
  if (points.empty()) throw std::invalid_argument("qmc_expectation: no points");
  double sum = 0.0;
  for (const PhasePoint& z : points) sum += f(z);
  return sum / static_cast<double>(points.size());
}

}  // namespace semiclassical
