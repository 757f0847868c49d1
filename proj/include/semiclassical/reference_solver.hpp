#pragma once

// Grid reference for i eps d/dt psi = (-eps^2/2 Laplace + V) psi: Strang splitting with Fourier
// collocation on a periodic box,
//     psi <- e^{-i V tau / (2 eps)} F^{-1} e^{-i eps |k|^2 tau / 2} F e^{-i V tau / (2 eps)} psi.

#include "semiclassical/phase_space.hpp"
#include "semiclassical/potentials.hpp"
#include "semiclassical/wigner_sampling.hpp"

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <cstddef>
#include <functional>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace semiclassical {

using Complex = std::complex<double>;

/// Tensor grid with n points per axis on [x_min, x_max)^d, periodic.
struct GridSpec {
  std::size_t dimension = 2;
  std::size_t points = 256;
  double x_min = -3.0;
  double x_max = 3.0;

  GridSpec() = default;
  GridSpec(std::size_t d, std::size_t n, double lo = -3.0, double hi = 3.0) : dimension(d), points(n), x_min(lo), x_max(hi) {
    validate();
  }

  void validate() const {
    if (dimension < 1 || dimension > 3) throw std::invalid_argument("grid: dimension must be 1, 2 or 3");
    if (points < 4 || (points & (points - 1)) != 0) throw std::invalid_argument("grid: points per axis must be a power of two");
    if (!(x_max > x_min)) throw std::invalid_argument("grid: empty interval");
  }

  double length() const { return x_max - x_min; }
  double spacing() const { return length() / static_cast<double>(points); }
  double cell_volume() const { return std::pow(spacing(), static_cast<double>(dimension)); }
  std::size_t total() const {
    std::size_t t = 1;
    for (std::size_t a = 0; a < dimension; ++a) t *= points;
    return t;
  }
  double coordinate(std::size_t i) const { return x_min + static_cast<double>(i) * spacing(); }
  /// Wavenumber for FFT index i: 2 pi m / L with m in [-n/2, n/2).
  double wavenumber(std::size_t i) const {
    const auto n = static_cast<std::ptrdiff_t>(points);
    const auto m = static_cast<std::ptrdiff_t>(i) < n / 2 ? static_cast<std::ptrdiff_t>(i) : static_cast<std::ptrdiff_t>(i) - n;
    return 2.0 * std::numbers::pi * static_cast<double>(m) / length();
  }
  /// Per-axis indices of flat index (axis 0 slowest).
  void unflatten(std::size_t flat, std::size_t* idx) const {
    for (std::size_t a = dimension; a-- > 0;) {
      idx[a] = flat % points;
      flat /= points;
    }
  }
};

struct WaveFunctionGrid {
  GridSpec grid;
  double epsilon = 0.1;
  double time = 0.0;
  std::vector<Complex> psi;
  /// |factor - 1| applied when normalizing the sampled initial packet.
  double renormalization = 0.0;

  double norm_squared() const {
    double s = 0.0;
    for (const Complex& c : psi) s += std::norm(c);
    return s * grid.cell_volume();
  }

  /// Mass in the cells within `fraction` of the box edge along any axis.
  double boundary_mass(double fraction = 1.0 / 16) const {
    const auto band = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(grid.points)));
    std::size_t idx[3];
    double s = 0.0;
    for (std::size_t f = 0; f < psi.size(); ++f) {
      grid.unflatten(f, idx);
      bool edge = false;
      for (std::size_t a = 0; a < grid.dimension; ++a) edge = edge || idx[a] < band || idx[a] + band >= grid.points;
      if (edge) s += std::norm(psi[f]);
    }
    return s * grid.cell_volume();
  }
};

/// psi_0(q) = (pi eps)^(-d/4) exp(-|q - q0|^2 / (2 eps) + i p0.(q - q0) / eps), sampled and
/// normalized to discrete norm 1.
inline WaveFunctionGrid init_packet(const GridSpec& grid, const GaussianPacket& packet, double max_boundary_mass = 1e-12) {
  grid.validate();
  if (packet.dimension() != grid.dimension) throw std::invalid_argument("init_packet: packet and grid dimensions differ");
  WaveFunctionGrid w;
  w.grid = grid;
  w.epsilon = packet.epsilon;
  w.psi.resize(grid.total());
  const double eps = packet.epsilon;
  const double amp = std::pow(std::numbers::pi * eps, -0.25 * static_cast<double>(grid.dimension));
  std::size_t idx[3];
  for (std::size_t f = 0; f < w.psi.size(); ++f) {
    grid.unflatten(f, idx);
    double r2 = 0.0, phase = 0.0;
    for (std::size_t a = 0; a < grid.dimension; ++a) {
      const double x = grid.coordinate(idx[a]) - packet.center.q(static_cast<Eigen::Index>(a));
      r2 += x * x;
      phase += packet.center.p(static_cast<Eigen::Index>(a)) * x;
    }
    w.psi[f] = amp * std::exp(Complex(-r2 / (2 * eps), phase / eps));
  }
  const double factor = 1.0 / std::sqrt(w.norm_squared());
  for (Complex& c : w.psi) c *= factor;
  w.renormalization = std::abs(factor - 1.0);
  const double edge = w.boundary_mass();
  if (edge > max_boundary_mass) {
    throw std::runtime_error("init_packet: mass " + std::to_string(edge) + " near the boundary exceeds the threshold");
  }
  return w;
}

namespace detail {

inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwPlanDeleter {
  void operator()(fftw_plan_s* p) const {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fftw_destroy_plan(p);
  }
};
using FftwPlan = std::unique_ptr<fftw_plan_s, FftwPlanDeleter>;

}  // namespace detail

/// In-place forward/backward FFT pair for one grid shape. Planning is serialized; execution
/// through the new-array interface is thread-safe.
class GridFft {
 public:
  explicit GridFft(const GridSpec& grid) : grid_(grid) {
    std::vector<int> dims(grid.dimension, static_cast<int>(grid.points));
    std::vector<Complex> scratch(grid.total());
    auto* buf = reinterpret_cast<fftw_complex*>(scratch.data());
    std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
    forward_.reset(fftw_plan_dft(static_cast<int>(dims.size()), dims.data(), buf, buf, FFTW_FORWARD, FFTW_ESTIMATE | FFTW_UNALIGNED));
    backward_.reset(fftw_plan_dft(static_cast<int>(dims.size()), dims.data(), buf, buf, FFTW_BACKWARD, FFTW_ESTIMATE | FFTW_UNALIGNED));
    if (!forward_ || !backward_) throw std::runtime_error("FFTW planning failed");
  }

  /// Unnormalized forward transform, in place.
  void forward(std::vector<Complex>& x) const { execute(forward_.get(), x); }
  /// Unnormalized backward transform, in place (divide by total() to invert forward).
  void backward(std::vector<Complex>& x) const { execute(backward_.get(), x); }

 private:
  void execute(fftw_plan p, std::vector<Complex>& x) const {
    if (x.size() != grid_.total()) throw std::invalid_argument("fft: size mismatch");
    auto* buf = reinterpret_cast<fftw_complex*>(x.data());
    fftw_execute_dft(p, buf, buf);
  }

  GridSpec grid_;
  detail::FftwPlan forward_;
  detail::FftwPlan backward_;
};

using GridPotential = std::function<double(std::span<const double>)>;

template <PotentialField P>
GridPotential grid_potential(const P& v) {
  return [v](std::span<const double> q) { return v.value(q); };
}

inline GridPotential grid_potential(const AnyPotential& v) {
  return std::visit([](const auto& p) { return grid_potential(p); }, v);
}

inline GridPotential free_particle() {
  return [](std::span<const double>) { return 0.0; };
}

/// Potential values on the grid.
inline std::vector<double> sample_potential(const GridSpec& grid, const GridPotential& v) {
  std::vector<double> out(grid.total());
  std::size_t idx[3];
  double q[3];
  for (std::size_t f = 0; f < out.size(); ++f) {
    grid.unflatten(f, idx);
    for (std::size_t a = 0; a < grid.dimension; ++a) q[a] = grid.coordinate(idx[a]);
    out[f] = v(std::span<const double>(q, grid.dimension));
  }
  return out;
}

/// |k|^2 on the FFT index layout.
inline std::vector<double> wavenumber_squared(const GridSpec& grid) {
  std::vector<double> out(grid.total());
  std::size_t idx[3];
  for (std::size_t f = 0; f < out.size(); ++f) {
    grid.unflatten(f, idx);
    double k2 = 0.0;
    for (std::size_t a = 0; a < grid.dimension; ++a) k2 += grid.wavenumber(idx[a]) * grid.wavenumber(idx[a]);
    out[f] = k2;
  }
  return out;
}

/// Strang split-step propagator with precomputed phase factors for one (grid, eps, tau).
class SchrodingerPropagator {
 public:
  SchrodingerPropagator(const GridSpec& grid, double epsilon, double tau, const GridPotential& v)
      : grid_(grid), epsilon_(epsilon), tau_(tau), fft_(grid) {
    if (!(epsilon > 0.0) || !(tau > 0.0)) throw std::invalid_argument("propagator: epsilon and tau must be positive");
    const std::vector<double> pot = sample_potential(grid, v);
    const std::vector<double> k2 = wavenumber_squared(grid);
    half_potential_.resize(pot.size());
    full_potential_.resize(pot.size());
    kinetic_.resize(k2.size());
    const double inv_n = 1.0 / static_cast<double>(grid.total());
    for (std::size_t f = 0; f < pot.size(); ++f) {
      half_potential_[f] = std::polar(1.0, -pot[f] * tau / (2 * epsilon));
      full_potential_[f] = std::polar(1.0, -pot[f] * tau / epsilon);
      kinetic_[f] = inv_n * std::polar(1.0, -epsilon * k2[f] * tau / 2);
    }
  }

  double tau() const { return tau_; }

  void step(WaveFunctionGrid& w) const {
    std::vector<Complex>& psi = w.psi;
    for (std::size_t f = 0; f < psi.size(); ++f) psi[f] *= half_potential_[f];
    fft_.forward(psi);
    for (std::size_t f = 0; f < psi.size(); ++f) psi[f] *= kinetic_[f];
    fft_.backward(psi);
    for (std::size_t f = 0; f < psi.size(); ++f) psi[f] *= half_potential_[f];
    w.time += tau_;
  }

  /// `steps` consecutive steps with the two adjacent half potential phases merged.
  void run(WaveFunctionGrid& w, std::size_t steps) const {
    if (steps == 0) return;
    std::vector<Complex>& psi = w.psi;
    for (std::size_t f = 0; f < psi.size(); ++f) psi[f] *= half_potential_[f];
    for (std::size_t s = 0; s < steps; ++s) {
      fft_.forward(psi);
      for (std::size_t f = 0; f < psi.size(); ++f) psi[f] *= kinetic_[f];
      fft_.backward(psi);
      const std::vector<Complex>& phase = s + 1 == steps ? half_potential_ : full_potential_;
      for (std::size_t f = 0; f < psi.size(); ++f) psi[f] *= phase[f];
    }
    w.time += static_cast<double>(steps) * tau_;
  }

  const GridFft& fft() const { return fft_; }

 private:
  GridSpec grid_;
  double epsilon_;
  double tau_;
  GridFft fft_;
  std::vector<Complex> half_potential_;
  std::vector<Complex> full_potential_;
  std::vector<Complex> kinetic_;
};

inline void schrodinger_step(WaveFunctionGrid& w, double tau, const GridPotential& v) {
  SchrodingerPropagator(w.grid, w.epsilon, tau, v).step(w);
}

/// Expectation values of the built-in observables. Position and potential by real-space
/// quadrature; momentum and kinetic energy through Fourier multipliers.
class GridObservables {
 public:
  GridObservables(const GridSpec& grid, const GridPotential& v)
      : grid_(grid), fft_(grid), potential_(sample_potential(grid, v)), k2_(wavenumber_squared(grid)) {}

  double norm(const WaveFunctionGrid& w) const { return w.norm_squared(); }

  double position(const WaveFunctionGrid& w, std::size_t axis) const {
    check_axis(axis);
    std::size_t idx[3];
    double s = 0.0;
    for (std::size_t f = 0; f < w.psi.size(); ++f) {
      grid_.unflatten(f, idx);
      s += std::norm(w.psi[f]) * grid_.coordinate(idx[axis]);
    }
    return s * grid_.cell_volume();
  }

  double potential(const WaveFunctionGrid& w) const {
    double s = 0.0;
    for (std::size_t f = 0; f < w.psi.size(); ++f) s += std::norm(w.psi[f]) * potential_[f];
    return s * grid_.cell_volume();
  }

  double momentum(const WaveFunctionGrid& w, std::size_t axis) const {
    check_axis(axis);
    const std::vector<Complex> hat = transform(w);
    std::size_t idx[3];
    double s = 0.0, mass = 0.0;
    for (std::size_t f = 0; f < hat.size(); ++f) {
      grid_.unflatten(f, idx);
      const double m = std::norm(hat[f]);
      s += m * w.epsilon * grid_.wavenumber(idx[axis]);
      mass += m;
    }
    return s / mass;
  }

  double kinetic(const WaveFunctionGrid& w) const {
    const std::vector<Complex> hat = transform(w);
    double s = 0.0, mass = 0.0;
    for (std::size_t f = 0; f < hat.size(); ++f) {
      const double m = std::norm(hat[f]);
      s += m * 0.5 * w.epsilon * w.epsilon * k2_[f];
      mass += m;
    }
    return s / mass;
  }

  /// By observable name: "qJ", "pJ" (1-based), "kinetic", "potential", "total".
  double expectation(const WaveFunctionGrid& w, const std::string& name) const {
    if (name == "kinetic") return kinetic(w);
    if (name == "potential") return potential(w);
    if (name == "total") return kinetic(w) + potential(w);
    if (name.size() >= 2 && (name[0] == 'q' || name[0] == 'p')) {
      std::size_t j = 0;
      for (std::size_t i = 1; i < name.size(); ++i) {
        if (name[i] < '0' || name[i] > '9') throw std::invalid_argument("unknown observable '" + name + "'");
        j = 10 * j + static_cast<std::size_t>(name[i] - '0');
      }
      if (j < 1 || j > grid_.dimension) throw std::out_of_range("observable '" + name + "' outside the grid dimension");
      return name[0] == 'q' ? position(w, j - 1) : momentum(w, j - 1);
    }
    throw std::invalid_argument("unknown observable '" + name + "'");
  }

 private:
  void check_axis(std::size_t axis) const {
    if (axis >= grid_.dimension) throw std::out_of_range("grid axis out of range");
  }
  std::vector<Complex> transform(const WaveFunctionGrid& w) const {
    std::vector<Complex> hat = w.psi;
    fft_.forward(hat);
    return hat;
  }

  GridSpec grid_;
  GridFft fft_;
  std::vector<double> potential_;
  std::vector<double> k2_;
};

}  // namespace semiclassical
