#pragma once

// Flat key-value run configuration.
//
//     # comment
//     epsilon = 0.1
//     q0 = 1, 0.5
//
// Unknown keys are rejected. Lists are comma separated. Integers accept exponent notation
// ("1e5") as long as the value is integral.

#include "semiclassical/classical_flow.hpp"
#include "semiclassical/observables.hpp"
#include "semiclassical/potentials.hpp"
#include "semiclassical/wigner_sampling.hpp"

#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace semiclassical {

/// Invalid configuration or command line; maps to exit code 1.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  double epsilon = 0.1;
  std::size_t dimension = 2;
  std::string potential = "torsional";
  std::vector<double> potential_params;
  std::vector<double> q0{1.0, 0.5};
  std::vector<double> p0{0.0, 0.0};
  double t_final = 15.0;
  double snapshot_stride = 0.5;

  std::size_t n0 = 100000;
  double tau0 = 0.1;
  int order0 = 8;
  std::size_t n2 = 500;
  double tau2 = 0.25;
  std::size_t halton_skip = 64;
  std::vector<std::string> observables{"q1", "q2", "p1", "p2", "kinetic", "potential", "total"};

  bool reference = false;
  std::size_t grid_points = 256;
  double grid_min = -3.0;
  double grid_max = 3.0;
  /// 0 selects eps / 800, rounded down to divide the snapshot stride.
  double reference_tau = 0.0;
  /// Empty selects <output_dir>/reference_cache.
  std::string cache_dir;

  std::string output_dir = "out";
  std::size_t threads = 0;

  // Sweeps: axis in {epsilon, n2, tau2}; optional per-value n0/n2/tau2 lists for epsilon sweeps.
  std::string sweep_axis;
  std::vector<double> sweep_values;
  std::vector<double> sweep_n0;
  std::vector<double> sweep_n2;
  std::vector<double> sweep_tau2;
  /// "reference" (grid solver) or "correction" (a fine correction run at baseline_n2/baseline_tau2).
  std::string sweep_against = "reference";
  std::size_t baseline_n2 = 0;
  double baseline_tau2 = 0.0;

  GaussianPacket packet() const {
    Eigen::VectorXd q = Eigen::Map<const Eigen::VectorXd>(q0.data(), static_cast<Eigen::Index>(q0.size()));
    Eigen::VectorXd p = Eigen::Map<const Eigen::VectorXd>(p0.data(), static_cast<Eigen::Index>(p0.size()));
    return {PhasePoint{q, p}, epsilon};
  }

  AnyPotential make_potential_instance() const { return make_potential(potential, dimension, potential_params); }

  std::size_t snapshot_count() const { return static_cast<std::size_t>(std::llround(t_final / snapshot_stride)) + 1; }

  std::vector<double> snapshot_times() const {
    std::vector<double> t(snapshot_count());
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = static_cast<double>(k) * snapshot_stride;
    return t;
  }

  /// Reference step: the requested one (or eps / 800) shrunk to divide the snapshot stride.
  double effective_reference_tau() const {
    const double want = reference_tau > 0.0 ? reference_tau : epsilon / 800.0;
    const double per = std::ceil(snapshot_stride / want - 1e-9);
    return snapshot_stride / per;
  }

  std::string effective_cache_dir() const { return cache_dir.empty() ? output_dir + "/reference_cache" : cache_dir; }

  void validate() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

inline double parse_double(const std::string& key, const std::string& s) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + s + "'");
  }
  if (used != s.size() || !std::isfinite(x)) throw ConfigError("config: '" + key + "' expects a number, got '" + s + "'");
  return x;
}

inline std::size_t parse_count(const std::string& key, const std::string& s) {
  const double x = parse_double(key, s);
  if (x < 0 || x != std::floor(x) || x > 1e15) throw ConfigError("config: '" + key + "' expects a nonnegative integer");
  return static_cast<std::size_t>(x);
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("config: '" + key + "' expects true or false");
}

inline std::vector<double> parse_doubles(const std::string& key, const std::string& s) {
  std::vector<double> out;
  for (const std::string& item : split_list(s)) out.push_back(parse_double(key, item));
  return out;
}

inline std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + format_double(v[i]);
  return s;
}

inline std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i];
  return s;
}

/// True if a / b is an integer up to rounding.
inline bool divides(double b, double a) {
  const double r = a / b;
  return std::abs(r - std::round(r)) <= 1e-9 * std::max(1.0, r);
}

}  // namespace detail

inline void apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  if (key == "epsilon") c.epsilon = parse_double(key, value);
  else if (key == "dimension") c.dimension = parse_count(key, value);
  else if (key == "potential") c.potential = value;
  else if (key == "potential_params") c.potential_params = parse_doubles(key, value);
  else if (key == "q0") c.q0 = parse_doubles(key, value);
  else if (key == "p0") c.p0 = parse_doubles(key, value);
  else if (key == "t_final") c.t_final = parse_double(key, value);
  else if (key == "snapshot_stride") c.snapshot_stride = parse_double(key, value);
  else if (key == "n0") c.n0 = parse_count(key, value);
  else if (key == "tau0") c.tau0 = parse_double(key, value);
  else if (key == "order0") c.order0 = static_cast<int>(parse_count(key, value));
  else if (key == "n2") c.n2 = parse_count(key, value);
  else if (key == "tau2") c.tau2 = parse_double(key, value);
  else if (key == "halton_skip") c.halton_skip = parse_count(key, value);
  else if (key == "observables") c.observables = split_list(value);
  else if (key == "reference") c.reference = parse_bool(key, value);
  else if (key == "grid_points") c.grid_points = parse_count(key, value);
  else if (key == "grid_min") c.grid_min = parse_double(key, value);
  else if (key == "grid_max") c.grid_max = parse_double(key, value);
  else if (key == "reference_tau") c.reference_tau = parse_double(key, value);
  else if (key == "cache_dir") c.cache_dir = value;
  else if (key == "output_dir") c.output_dir = value;
  else if (key == "threads") c.threads = parse_count(key, value);
  else if (key == "sweep_axis") c.sweep_axis = value;
  else if (key == "sweep_values") c.sweep_values = parse_doubles(key, value);
  else if (key == "sweep_n0") c.sweep_n0 = parse_doubles(key, value);
  else if (key == "sweep_n2") c.sweep_n2 = parse_doubles(key, value);
  else if (key == "sweep_tau2") c.sweep_tau2 = parse_doubles(key, value);
  else if (key == "sweep_against") c.sweep_against = value;
  else if (key == "baseline_n2") c.baseline_n2 = parse_count(key, value);
  else if (key == "baseline_tau2") c.baseline_tau2 = parse_double(key, value);
  else throw ConfigError("config: unknown key '" + key + "'");
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    if (seen.count(key)) throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    seen[key] = lineno;
    apply_setting(c, key, detail::trim(line.substr(eq + 1)));
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

/// Canonical text form; parse_config(to_text(c)) reproduces c.
inline std::string to_text(const RunConfig& c) {
  using detail::format_double;
  using detail::join;
  std::ostringstream o;
  o << "epsilon = " << format_double(c.epsilon) << "\n"
    << "dimension = " << c.dimension << "\n"
    << "potential = " << c.potential << "\n"
    << "potential_params = " << join(c.potential_params) << "\n"
    << "q0 = " << join(c.q0) << "\n"
    << "p0 = " << join(c.p0) << "\n"
    << "t_final = " << format_double(c.t_final) << "\n"
    << "snapshot_stride = " << format_double(c.snapshot_stride) << "\n"
    << "n0 = " << c.n0 << "\n"
    << "tau0 = " << format_double(c.tau0) << "\n"
    << "order0 = " << c.order0 << "\n"
    << "n2 = " << c.n2 << "\n"
    << "tau2 = " << format_double(c.tau2) << "\n"
    << "halton_skip = " << c.halton_skip << "\n"
    << "observables = " << join(c.observables) << "\n"
    << "reference = " << (c.reference ? "true" : "false") << "\n"
    << "grid_points = " << c.grid_points << "\n"
    << "grid_min = " << format_double(c.grid_min) << "\n"
    << "grid_max = " << format_double(c.grid_max) << "\n"
    << "reference_tau = " << format_double(c.reference_tau) << "\n"
    << "cache_dir = " << c.cache_dir << "\n"
    << "output_dir = " << c.output_dir << "\n"
    << "threads = " << c.threads << "\n";
  if (!c.sweep_axis.empty()) {
    o << "sweep_axis = " << c.sweep_axis << "\n"
      << "sweep_values = " << join(c.sweep_values) << "\n"
      << "sweep_n0 = " << join(c.sweep_n0) << "\n"
      << "sweep_n2 = " << join(c.sweep_n2) << "\n"
      << "sweep_tau2 = " << join(c.sweep_tau2) << "\n"
      << "sweep_against = " << c.sweep_against << "\n"
      << "baseline_n2 = " << c.baseline_n2 << "\n"
      << "baseline_tau2 = " << format_double(c.baseline_tau2) << "\n";
  }
  return o.str();
}

inline void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
  if (!(epsilon > 0.0)) fail("epsilon must be positive");
  if (dimension < 1) fail("dimension must be at least 1");
  try {
    const AnyPotential v = make_potential_instance();
    for (const std::string& name : observables) make_observable(name, v);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    fail(e.what());
  }
  if (observables.empty()) fail("at least one observable is required");
  if (q0.size() != dimension || p0.size() != dimension) fail("q0 and p0 need 'dimension' entries");
  if (!(t_final >= 0.0)) fail("t_final must be nonnegative");
  if (!(snapshot_stride > 0.0)) fail("snapshot_stride must be positive");
  if (!detail::divides(snapshot_stride, t_final)) fail("t_final must be a multiple of snapshot_stride");
  if (n0 < 1) fail("n0 must be at least 1");
  if (n2 > n0) fail("n2 must not exceed n0");
  if (!(tau0 > 0.0) || !(tau2 > 0.0)) fail("tau0 and tau2 must be positive");
  if (!detail::divides(tau0, snapshot_stride)) fail("snapshot_stride must be a multiple of tau0");
  if (!detail::divides(tau2, snapshot_stride)) fail("snapshot_stride must be a multiple of tau2");
  if (order0 != 2 && order0 != 4 && order0 != 6 && order0 != 8) fail("order0 must be 2, 4, 6 or 8");
  if (reference) {
    if (dimension > 3) fail("the grid reference supports dimension 1 to 3");
    if (grid_points < 4 || (grid_points & (grid_points - 1)) != 0) fail("grid_points must be a power of two");
    if (!(grid_max > grid_min)) fail("grid_max must exceed grid_min");
    if (reference_tau < 0.0) fail("reference_tau must be nonnegative");
  }
  if (!sweep_axis.empty()) {
    if (sweep_axis != "epsilon" && sweep_axis != "n2" && sweep_axis != "tau2") fail("sweep_axis must be epsilon, n2 or tau2");
    if (sweep_values.empty()) fail("sweep_values must not be empty");
    for (std::size_t i = 1; i < sweep_values.size(); ++i) {
      if (!(sweep_values[i] > sweep_values[i - 1]) && !(sweep_values[i] < sweep_values[i - 1])) fail("sweep_values must be strictly sorted");
      if ((sweep_values[i] > sweep_values[i - 1]) != (sweep_values[1] > sweep_values[0])) fail("sweep_values must be sorted");
    }
    for (const auto* list : {&sweep_n0, &sweep_n2, &sweep_tau2}) {
      if (!list->empty() && list->size() != sweep_values.size()) fail("per-value sweep lists must match sweep_values in length");
    }
    if (sweep_against != "reference" && sweep_against != "correction") fail("sweep_against must be reference or correction");
    if (sweep_against == "correction" && (baseline_n2 < 1 || !(baseline_tau2 > 0.0))) {
      fail("a correction baseline needs baseline_n2 and baseline_tau2");
    }
  }
}

}  // namespace semiclassical
