#pragma once

// Experiment driver: Egorov and corrected expectation values over a snapshot grid, the grid
// reference, comparisons and parameter sweeps.

#include "semiclassical/classical_flow.hpp"
#include "semiclassical/correction_dynamics.hpp"
#include "semiclassical/observables.hpp"
#include "semiclassical/reference_solver.hpp"
#include "semiclassical/run_config.hpp"
#include "semiclassical/wigner_sampling.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace semiclassical {

/// A numerical self-check failed (boundary mass, unitarity, non-finite values); exit code 2.
class NumericalCheckFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Logger = std::function<void(const std::string&)>;

/// Values per snapshot time and observable, stored [time][observable].
struct Series {
  std::vector<double> times;
  std::vector<std::string> observables;
  std::vector<double> values;

  Series() = default;
  Series(std::vector<double> t, std::vector<std::string> obs)
      : times(std::move(t)), observables(std::move(obs)), values(times.size() * observables.size(), 0.0) {}

  double& at(std::size_t t, std::size_t o) { return values[t * observables.size() + o]; }
  double at(std::size_t t, std::size_t o) const { return values[t * observables.size() + o]; }
};

inline std::size_t resolve_threads(std::size_t requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? hw : 1;
}

namespace detail {

/// Calls fn(i) for i in [0, n) on up to `threads` workers. The first exception is rethrown.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(n);
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

/// Pairwise sum of rows [lo, hi) of a row-major (rows x width) buffer into out.
inline void pairwise_rows(const double* data, std::size_t width, std::size_t lo, std::size_t hi, double* out) {
  if (hi - lo == 1) {
    std::copy(data + lo * width, data + (lo + 1) * width, out);
    return;
  }
  const std::size_t mid = lo + (hi - lo) / 2;
  std::vector<double> right(width);
  pairwise_rows(data, width, lo, mid, out);
  pairwise_rows(data, width, mid, hi, right.data());
  for (std::size_t k = 0; k < width; ++k) out[k] += right[k];
}

}  // namespace detail

/// Points per work block. Fixed, so sums do not depend on the thread count.
inline constexpr std::size_t kQmcBlock = 256;

/// Mean over points of per-point vectors of length `width`. The worker factory is called once
/// per block and returns fn(point, out). Block sums and the sum over blocks are pairwise, so
/// the result is bit-identical for any thread count.
template <class WorkerFactory>
std::vector<double> qmc_mean(const std::vector<PhasePoint>& points, std::size_t width, std::size_t threads,
                             const WorkerFactory& make_worker) {
  std::vector<double> mean(width, 0.0);
  if (points.empty()) return mean;
  const std::size_t blocks = (points.size() + kQmcBlock - 1) / kQmcBlock;
  std::vector<double> block_sums(blocks * width);
  detail::parallel_for(blocks, threads, [&](std::size_t b) {
    auto fn = make_worker();
    const std::size_t lo = b * kQmcBlock, hi = std::min(points.size(), lo + kQmcBlock);
    std::vector<double> per_point((hi - lo) * width);
    for (std::size_t i = lo; i < hi; ++i) fn(points[i], per_point.data() + (i - lo) * width);
    detail::pairwise_rows(per_point.data(), width, 0, hi - lo, block_sums.data() + b * width);
  });
  detail::pairwise_rows(block_sums.data(), width, 0, blocks, mean.data());
  const double inv = 1.0 / static_cast<double>(points.size());
  for (double& x : mean) x *= inv;
  for (double x : mean) {
    if (!std::isfinite(x)) throw NumericalCheckFailure("non-finite sample mean");
  }
  return mean;
}

inline std::vector<Observable> make_observables(const RunConfig& c, const AnyPotential& v) {
  std::vector<Observable> out;
  for (const std::string& name : c.observables) out.push_back(make_observable(name, v));
  return out;
}

/// I^{N0}(a o flow) at every snapshot, order0 splitting with step tau0.
inline Series egorov_series(const RunConfig& c, std::size_t threads) {
  c.validate();
  const AnyPotential any = c.make_potential_instance();
  const std::vector<Observable> obs = make_observables(c, any);
  Series out(c.snapshot_times(), c.observables);
  const std::vector<PhasePoint> points = sample_points(c.packet(), QmcSampler(c.n0, c.halton_skip));
  const StepCount per = commensurate_steps(c.snapshot_stride, c.tau0);
  const FlowStepper stepper(default_flow_scheme(c.order0));
  const std::size_t S = out.times.size(), O = obs.size(), d = c.dimension;
  std::visit(
      [&](const auto& v) {
        out.values = qmc_mean(points, S * O, threads, [&] {
          return [&, g = Eigen::VectorXd(static_cast<Eigen::Index>(d))](const PhasePoint& z0, double* row) mutable {
            PhasePoint z = z0;
            for (std::size_t s = 0; s < S; ++s) {
              for (std::size_t o = 0; o < O; ++o) row[s * O + o] = obs[o](z);
              if (s + 1 == S) break;
              for (std::size_t n = 0; n < per.steps; ++n) stepper.step(per.tau, as_span(z.q), as_span(z.p), as_span(g), v);
            }
          };
        });
      },
      any);
  return out;
}

/// I^{N2}(a2) at every snapshot, fourth-order correction splitting with step tau2. All zero for n2 = 0.
inline Series correction_series(const RunConfig& c, std::size_t threads) {
  c.validate();
  const AnyPotential any = c.make_potential_instance();
  const std::vector<Observable> obs = make_observables(c, any);
  Series out(c.snapshot_times(), c.observables);
  if (c.n2 == 0) return out;
  const std::vector<PhasePoint> points = sample_points(c.packet(), QmcSampler(c.n2, c.halton_skip));
  const StepCount per = commensurate_steps(c.snapshot_stride, c.tau2);
  const CorrectionStepper stepper = CorrectionStepper::order(4);
  const std::size_t S = out.times.size(), O = obs.size();
  std::visit(
      [&](const auto& v) {
        using P = std::decay_t<decltype(v)>;
        out.values = qmc_mean(points, S * O, threads, [&] {
          return [&, ops = MatrixFreeBlocks<P>(v)](const PhasePoint& z0, double* row) mutable {
            CorrectionState s = CorrectionState::initial(z0);
            for (std::size_t k = 0; k < S; ++k) {
              for (std::size_t o = 0; o < O; ++o) row[k * O + o] = a2_eval(obs[o], s);
              if (k + 1 == S) break;
              for (std::size_t n = 0; n < per.steps; ++n) stepper.step(per.tau, s, ops);
            }
          };
        });
      },
      any);
  return out;
}

/// Grid and step used for the reference. The long-run variant switches to 1024 points per
/// axis and, for the tabulated epsilons, the step count over [0, 15] listed with them.
struct ReferenceSettings {
  GridSpec grid;
  double tau = 0.0;
};

inline ReferenceSettings reference_settings(const RunConfig& c, bool long_run) {
  ReferenceSettings r;
  r.grid = GridSpec(c.dimension, long_run ? 1024 : c.grid_points, c.grid_min, c.grid_max);
  RunConfig t = c;
  if (long_run && c.reference_tau == 0.0) {
    static const std::map<double, double> steps_over_15{{0.1, 1.2e5}, {0.05, 3.6e5}, {0.02, 3.6e5}, {0.01, 1.2e6}};
    for (const auto& [eps, steps] : steps_over_15) {
      if (std::abs(c.epsilon - eps) <= 1e-12) t.reference_tau = 15.0 / steps;
    }
  }
  r.tau = t.effective_reference_tau();
  return r;
}

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string reference_key(const RunConfig& c, const ReferenceSettings& r) {
  std::ostringstream k;
  k << "eps=" << format_double(c.epsilon) << ";d=" << c.dimension << ";V=" << c.potential << "(" << join(c.potential_params)
    << ");q0=" << join(c.q0) << ";p0=" << join(c.p0) << ";n=" << r.grid.points << ";box=" << format_double(r.grid.x_min)
    << ":" << format_double(r.grid.x_max) << ";tau=" << format_double(r.tau) << ";T=" << format_double(c.t_final)
    << ";stride=" << format_double(c.snapshot_stride) << ";obs=" << join(c.observables);
  return k.str();
}

inline std::optional<Series> load_cached_reference(const std::filesystem::path& file, const std::string& key,
                                                   const RunConfig& c) {
  std::ifstream in(file);
  if (!in) return std::nullopt;
  std::string line;
  if (!std::getline(in, line) || line != "# " + key) return std::nullopt;
  if (!std::getline(in, line) || line != "time,observable,value") return std::nullopt;
  Series s(c.snapshot_times(), c.observables);
  std::size_t count = 0;
  while (std::getline(in, line)) {
    const std::vector<std::string> f = split_list(line);
    if (f.size() != 3 || count >= s.values.size()) return std::nullopt;
    s.values[count++] = std::stod(f[2]);
  }
  if (count != s.values.size()) return std::nullopt;
  return s;
}

inline void store_cached_reference(const std::filesystem::path& file, const std::string& key, const Series& s) {
  std::filesystem::create_directories(file.parent_path());
  const std::filesystem::path tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << "# " << key << "\ntime,observable,value\n";
    for (std::size_t t = 0; t < s.times.size(); ++t) {
      for (std::size_t o = 0; o < s.observables.size(); ++o) {
        out << format_double(s.times[t]) << "," << s.observables[o] << "," << format_double(s.at(t, o)) << "\n";
      }
    }
  }
  std::filesystem::rename(tmp, file);
}

}  // namespace detail

struct ReferenceRun {
  Series values;
  ReferenceSettings settings;
  double max_norm_drift = 0.0;
  double max_boundary_mass = 0.0;
  bool from_cache = false;
};

/// Grid reference at the snapshot times. Aborts when the boundary mass exceeds 1e-8 or the
/// norm drifts by more than 1e-10.
inline ReferenceRun reference_series(const RunConfig& c, bool long_run = false, bool use_cache = true,
                                     const Logger& log = {}) {
  RunConfig checked = c;
  checked.reference = true;
  checked.validate();
  ReferenceRun run;
  run.settings = reference_settings(c, long_run);
  const std::string key = detail::reference_key(c, run.settings);
  char name[40];
  std::snprintf(name, sizeof name, "ref-%016llx.csv", static_cast<unsigned long long>(detail::fnv1a(key)));
  const std::filesystem::path file = std::filesystem::path(c.effective_cache_dir()) / name;
  if (use_cache) {
    if (auto cached = detail::load_cached_reference(file, key, c)) {
      if (log) log("reference: cache hit " + file.string());
      run.values = std::move(*cached);
      run.from_cache = true;
      return run;
    }
  }

  const AnyPotential any = c.make_potential_instance();
  const GridPotential v = grid_potential(any);
  WaveFunctionGrid w;
  try {
    w = init_packet(run.settings.grid, c.packet());
  } catch (const std::runtime_error& e) {
    throw NumericalCheckFailure(e.what());
  }
  const SchrodingerPropagator prop(run.settings.grid, c.epsilon, run.settings.tau, v);
  const GridObservables obs(run.settings.grid, v);
  const StepCount per = commensurate_steps(c.snapshot_stride, run.settings.tau);
  run.values = Series(c.snapshot_times(), c.observables);
  const double n0 = w.norm_squared();
  for (std::size_t s = 0; s < run.values.times.size(); ++s) {
    if (s > 0) prop.run(w, per.steps);
    const double edge = w.boundary_mass();
    const double drift = std::abs(w.norm_squared() - n0);
    run.max_boundary_mass = std::max(run.max_boundary_mass, edge);
    run.max_norm_drift = std::max(run.max_norm_drift, drift);
    if (edge > 1e-8) {
      throw NumericalCheckFailure("reference: boundary mass " + detail::format_double(edge) + " at t = " +
                                  detail::format_double(run.values.times[s]));
    }
    if (drift > 1e-10) throw NumericalCheckFailure("reference: norm drift " + detail::format_double(drift));
    for (std::size_t o = 0; o < c.observables.size(); ++o) run.values.at(s, o) = obs.expectation(w, c.observables[o]);
    if (log && s > 0) log("reference: t = " + detail::format_double(run.values.times[s]));
  }
  if (use_cache) detail::store_cached_reference(file, key, run.values);
  return run;
}

/// One CSV row. Missing fields are written empty.
struct ResultRow {
  double time = 0.0;
  std::string observable;
  std::optional<double> egorov;
  std::optional<double> correction;
  std::optional<double> corrected;
  std::optional<double> reference;

  std::optional<double> err_egorov() const {
    if (egorov && reference) return std::abs(*egorov - *reference);
    return std::nullopt;
  }
  std::optional<double> err_corrected() const {
    if (corrected && reference) return std::abs(*corrected - *reference);
    return std::nullopt;
  }
};

/// corrected = egorov + eps^2 correction, row by row.
inline double corrected_value(double egorov, double correction, double epsilon) {
  return egorov + (epsilon * epsilon) * correction;
}

inline std::vector<ResultRow> make_rows(const RunConfig& c, const Series* egorov, const Series* correction,
                                        const Series* reference) {
  const std::vector<double> times = c.snapshot_times();
  std::vector<ResultRow> rows;
  for (std::size_t t = 0; t < times.size(); ++t) {
    for (std::size_t o = 0; o < c.observables.size(); ++o) {
      ResultRow r;
      r.time = times[t];
      r.observable = c.observables[o];
      if (egorov) {
        r.egorov = egorov->at(t, o);
        r.correction = correction ? correction->at(t, o) : 0.0;
        r.corrected = corrected_value(*r.egorov, *r.correction, c.epsilon);
      }
      if (reference) r.reference = reference->at(t, o);
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

struct RunOutput {
  RunConfig config;
  std::vector<ResultRow> rows;
  double egorov_seconds = 0.0;
  double correction_seconds = 0.0;
  double reference_seconds = 0.0;
  std::optional<ReferenceRun> reference;
};

namespace detail {

template <class F>
auto timed(double& seconds, F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  auto r = f();
  seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace detail

inline RunOutput run_egorov(const RunConfig& c, std::size_t threads) {
  RunOutput out;
  out.config = c;
  const Series e = detail::timed(out.egorov_seconds, [&] { return egorov_series(c, threads); });
  out.rows = make_rows(c, &e, nullptr, nullptr);
  return out;
}

/// Egorov plus the eps^2 correction; adds the grid reference when the config asks for it.
inline RunOutput run_corrected(const RunConfig& c, std::size_t threads, bool long_run = false, const Logger& log = {}) {
  RunOutput out;
  out.config = c;
  const Series e = detail::timed(out.egorov_seconds, [&] { return egorov_series(c, threads); });
  if (log) log("egorov: " + detail::format_double(out.egorov_seconds) + " s");
  const Series a2 = detail::timed(out.correction_seconds, [&] { return correction_series(c, threads); });
  if (log) log("correction: " + detail::format_double(out.correction_seconds) + " s");
  if (c.reference) {
    out.reference = detail::timed(out.reference_seconds, [&] { return reference_series(c, long_run, true, log); });
  }
  out.rows = make_rows(c, &e, &a2, out.reference ? &out.reference->values : nullptr);
  return out;
}

inline RunOutput run_reference(const RunConfig& c, bool long_run = false, const Logger& log = {}) {
  RunOutput out;
  out.config = c;
  out.reference = detail::timed(out.reference_seconds, [&] { return reference_series(c, long_run, true, log); });
  out.rows = make_rows(c, nullptr, nullptr, &out.reference->values);
  return out;
}

// CSV.

inline const char* kResultHeader = "time,observable,egorov,correction,corrected,reference,err_egorov,err_corrected";

namespace detail {

inline std::string field(const std::optional<double>& x) { return x ? format_double(*x) : std::string(); }

inline std::optional<double> parse_field(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return parse_double("csv field", s);
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows) {
  out << kResultHeader << "\n";
  for (const ResultRow& r : rows) {
    out << detail::format_double(r.time) << "," << r.observable << "," << detail::field(r.egorov) << ","
        << detail::field(r.correction) << "," << detail::field(r.corrected) << "," << detail::field(r.reference) << ","
        << detail::field(r.err_egorov()) << "," << detail::field(r.err_corrected()) << "\n";
  }
}

inline std::vector<ResultRow> read_results_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != kResultHeader) throw ConfigError("results CSV: unexpected header");
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    const std::vector<std::string> f = detail::split_csv(line);
    if (f.size() != 8) throw ConfigError("results CSV: expected 8 fields in '" + line + "'");
    ResultRow r;
    r.time = detail::parse_double("time", f[0]);
    r.observable = f[1];
    r.egorov = detail::parse_field(f[2]);
    r.correction = detail::parse_field(f[3]);
    r.corrected = detail::parse_field(f[4]);
    r.reference = detail::parse_field(f[5]);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::vector<ResultRow> read_results_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read results file '" + path + "'");
  return read_results_csv(in);
}

// Comparison.

struct ErrorRow {
  double time = 0.0;
  std::string observable;
  double err_egorov = std::numeric_limits<double>::quiet_NaN();
  double err_corrected = std::numeric_limits<double>::quiet_NaN();
};

struct ErrorSummary {
  std::string observable;
  double mean_err_egorov = std::numeric_limits<double>::quiet_NaN();
  double max_err_egorov = std::numeric_limits<double>::quiet_NaN();
  double mean_err_corrected = std::numeric_limits<double>::quiet_NaN();
  double max_err_corrected = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline double column(const ResultRow& r, const std::optional<double>& x) {
  if (x) return *x;
  if (r.reference) return *r.reference;
  throw ConfigError("compare: row at t = " + format_double(r.time) + " has neither the value nor a reference");
}

}  // namespace detail

/// Per-row |A - B| for the egorov and corrected columns. A row without a column falls back to
/// its reference value, so a run compares directly against a reference-only file.
inline std::vector<ErrorRow> compare(const std::vector<ResultRow>& a, const std::vector<ResultRow>& b) {
  if (a.size() != b.size()) throw ConfigError("compare: runs have different snapshot grids");
  std::vector<ErrorRow> out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].observable != b[i].observable || std::abs(a[i].time - b[i].time) > 1e-12) {
      throw ConfigError("compare: runs have different snapshot grids");
    }
    ErrorRow e;
    e.time = a[i].time;
    e.observable = a[i].observable;
    e.err_egorov = std::abs(detail::column(a[i], a[i].egorov) - detail::column(b[i], b[i].egorov));
    e.err_corrected = std::abs(detail::column(a[i], a[i].corrected) - detail::column(b[i], b[i].corrected));
    out.push_back(std::move(e));
  }
  return out;
}

/// Errors of a run against the reference column it carries.
inline std::vector<ErrorRow> errors_against_reference(const std::vector<ResultRow>& rows) {
  std::vector<ErrorRow> out;
  for (const ResultRow& r : rows) {
    if (!r.reference) throw ConfigError("errors_against_reference: row without reference value");
    ErrorRow e;
    e.time = r.time;
    e.observable = r.observable;
    if (auto x = r.err_egorov()) e.err_egorov = *x;
    if (auto x = r.err_corrected()) e.err_corrected = *x;
    out.push_back(std::move(e));
  }
  return out;
}

/// Mean and maximum over time per observable, in first-seen order, followed by "all"
/// (mean over every row, maximum over every row).
inline std::vector<ErrorSummary> summarize(const std::vector<ErrorRow>& errors) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const ErrorRow*>> by;
  for (const ErrorRow& e : errors) {
    if (!by.count(e.observable)) order.push_back(e.observable);
    by[e.observable].push_back(&e);
  }
  auto stats = [](const std::string& name, const std::vector<const ErrorRow*>& rs) {
    ErrorSummary s;
    s.observable = name;
    double se = 0, sc = 0, me = 0, mc = 0;
    for (const ErrorRow* r : rs) {
      se += r->err_egorov;
      sc += r->err_corrected;
      me = std::max(me, r->err_egorov);
      mc = std::max(mc, r->err_corrected);
      if (std::isnan(r->err_egorov)) me = r->err_egorov;
      if (std::isnan(r->err_corrected)) mc = r->err_corrected;
    }
    const double n = static_cast<double>(rs.size());
    s.mean_err_egorov = se / n;
    s.max_err_egorov = me;
    s.mean_err_corrected = sc / n;
    s.max_err_corrected = mc;
    return s;
  };
  std::vector<ErrorSummary> out;
  std::vector<const ErrorRow*> all;
  for (const std::string& name : order) {
    out.push_back(stats(name, by[name]));
    all.insert(all.end(), by[name].begin(), by[name].end());
  }
  if (!all.empty()) out.push_back(stats("all", all));
  return out;
}

inline void write_errors_csv(std::ostream& out, const std::vector<ErrorRow>& errors) {
  auto f = [](double x) { return std::isnan(x) ? std::string() : detail::format_double(x); };
  out << "time,observable,err_egorov,err_corrected\n";
  for (const ErrorRow& e : errors) {
    out << detail::format_double(e.time) << "," << e.observable << "," << f(e.err_egorov) << "," << f(e.err_corrected) << "\n";
  }
}

inline void write_summary_csv(std::ostream& out, const std::vector<ErrorSummary>& s) {
  auto f = [](double x) { return std::isnan(x) ? std::string() : detail::format_double(x); };
  out << "observable,mean_err_egorov,max_err_egorov,mean_err_corrected,max_err_corrected\n";
  for (const ErrorSummary& e : s) {
    out << e.observable << "," << f(e.mean_err_egorov) << "," << f(e.max_err_egorov) << "," << f(e.mean_err_corrected)
        << "," << f(e.max_err_corrected) << "\n";
  }
}

/// Least-squares slope of log(y) against log(x); NaN unless at least two positive pairs.
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size() && i < y.size(); ++i) {
    if (x[i] > 0 && y[i] > 0 && std::isfinite(y[i])) {
      lx.push_back(std::log(x[i]));
      ly.push_back(std::log(y[i]));
    }
  }
  if (lx.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const double n = static_cast<double>(lx.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i] / n;
    my += ly[i] / n;
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  return sxx > 0 ? sxy / sxx : std::numeric_limits<double>::quiet_NaN();
}

// Sweeps.

struct SweepRow {
  double value = 0.0;
  ErrorSummary summary;
};

struct SweepSlope {
  std::string observable;
  std::string metric;
  double slope = std::numeric_limits<double>::quiet_NaN();
};

struct SweepResult {
  std::string axis;
  std::vector<double> values;
  std::vector<SweepRow> rows;
  std::vector<SweepSlope> slopes;
  std::vector<RunOutput> runs;
};

/// Base config with the i-th sweep value (and per-value lists) applied.
inline RunConfig sweep_point(const RunConfig& base, std::size_t i) {
  RunConfig c = base;
  const double x = base.sweep_values.at(i);
  if (base.sweep_axis == "epsilon") c.epsilon = x;
  else if (base.sweep_axis == "n2") c.n2 = static_cast<std::size_t>(std::llround(x));
  else if (base.sweep_axis == "tau2") c.tau2 = x;
  if (!base.sweep_n0.empty()) c.n0 = static_cast<std::size_t>(std::llround(base.sweep_n0[i]));
  if (!base.sweep_n2.empty()) c.n2 = static_cast<std::size_t>(std::llround(base.sweep_n2[i]));
  if (!base.sweep_tau2.empty()) c.tau2 = base.sweep_tau2[i];
  c.sweep_axis.clear();
  c.sweep_values.clear();
  c.sweep_n0.clear();
  c.sweep_n2.clear();
  c.sweep_tau2.clear();
  return c;
}

/// Runs every sweep value, measures errors against the grid reference or against a fine
/// correction baseline, and fits log-log slopes of the errors against the swept value.
/// Against a correction baseline only the correction term is compared, so the egorov
/// columns stay empty.
inline SweepResult sweep(const RunConfig& base, std::size_t threads, bool long_run = false, const Logger& log = {}) {
  base.validate();
  if (base.sweep_axis.empty()) throw ConfigError("sweep: sweep_axis is not set");
  SweepResult result;
  result.axis = base.sweep_axis;
  result.values = base.sweep_values;
  const bool vs_reference = base.sweep_against == "reference";
  std::optional<Series> cached_egorov;
  std::map<double, Series> baselines;

  for (std::size_t i = 0; i < base.sweep_values.size(); ++i) {
    RunConfig c = sweep_point(base, i);
    c.reference = vs_reference;
    c.validate();
    if (log) log("sweep " + base.sweep_axis + " = " + detail::format_double(base.sweep_values[i]));
    RunOutput run;
    run.config = c;
    std::vector<ErrorRow> errors;
    if (vs_reference) {
      if (base.sweep_axis == "epsilon" || !cached_egorov) {
        cached_egorov = detail::timed(run.egorov_seconds, [&] { return egorov_series(c, threads); });
      }
      const Series a2 = detail::timed(run.correction_seconds, [&] { return correction_series(c, threads); });
      run.reference = detail::timed(run.reference_seconds, [&] { return reference_series(c, long_run, true, log); });
      run.rows = make_rows(c, &*cached_egorov, &a2, &run.reference->values);
      errors = errors_against_reference(run.rows);
    } else {
      if (!baselines.count(c.epsilon)) {
        RunConfig b = c;
        b.n2 = base.baseline_n2;
        b.tau2 = base.baseline_tau2;
        b.n0 = std::max(b.n0, b.n2);
        baselines[c.epsilon] = correction_series(b, threads);
      }
      const Series& ref = baselines[c.epsilon];
      const Series a2 = detail::timed(run.correction_seconds, [&] { return correction_series(c, threads); });
      const double e2 = c.epsilon * c.epsilon;
      for (std::size_t t = 0; t < a2.times.size(); ++t) {
        for (std::size_t o = 0; o < a2.observables.size(); ++o) {
          ResultRow r;
          r.time = a2.times[t];
          r.observable = a2.observables[o];
          r.correction = a2.at(t, o);
          run.rows.push_back(r);
          ErrorRow e;
          e.time = r.time;
          e.observable = r.observable;
          e.err_corrected = e2 * std::abs(a2.at(t, o) - ref.at(t, o));
          errors.push_back(e);
        }
      }
    }
    for (const ErrorSummary& s : summarize(errors)) result.rows.push_back({base.sweep_values[i], s});
    result.runs.push_back(std::move(run));
  }

  std::vector<std::string> names;
  for (const SweepRow& r : result.rows) {
    if (std::find(names.begin(), names.end(), r.summary.observable) == names.end()) names.push_back(r.summary.observable);
  }
  using Getter = double (*)(const ErrorSummary&);
  const std::pair<const char*, Getter> metrics[] = {
      {"mean_err_egorov", [](const ErrorSummary& s) { return s.mean_err_egorov; }},
      {"max_err_egorov", [](const ErrorSummary& s) { return s.max_err_egorov; }},
      {"mean_err_corrected", [](const ErrorSummary& s) { return s.mean_err_corrected; }},
      {"max_err_corrected", [](const ErrorSummary& s) { return s.max_err_corrected; }},
  };
  for (const std::string& name : names) {
    for (const auto& [metric, get] : metrics) {
      std::vector<double> x, y;
      for (const SweepRow& r : result.rows) {
        if (r.summary.observable == name) {
          x.push_back(r.value);
          y.push_back(get(r.summary));
        }
      }
      result.slopes.push_back({name, metric, loglog_slope(x, y)});
    }
  }
  return result;
}

inline void write_sweep_csv(std::ostream& out, const SweepResult& s) {
  auto f = [](double x) { return std::isnan(x) ? std::string() : detail::format_double(x); };
  out << "axis,value,observable,mean_err_egorov,max_err_egorov,mean_err_corrected,max_err_corrected\n";
  for (const SweepRow& r : s.rows) {
    out << s.axis << "," << detail::format_double(r.value) << "," << r.summary.observable << "," << f(r.summary.mean_err_egorov)
        << "," << f(r.summary.max_err_egorov) << "," << f(r.summary.mean_err_corrected) << ","
        << f(r.summary.max_err_corrected) << "\n";
  }
}

inline void write_slopes_csv(std::ostream& out, const SweepResult& s) {
  out << "axis,observable,metric,slope\n";
  for (const SweepSlope& sl : s.slopes) {
    out << s.axis << "," << sl.observable << "," << sl.metric << ","
        << (std::isnan(sl.slope) ? std::string() : detail::format_double(sl.slope)) << "\n";
  }
}

// Output directory helpers.

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream o;
  o << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return o.str();
}

/// Writes results.csv (deterministic) and metadata.txt (timestamps, timings, settings).
inline void write_run_outputs(const std::string& dir, const RunOutput& run, const std::string& command, std::size_t threads,
                              const std::string& started) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(std::filesystem::path(dir) / "results.csv");
    write_results_csv(out, run.rows);
  }
  std::ofstream meta(std::filesystem::path(dir) / "metadata.txt");
  meta << "command = " << command << "\n"
       << "started = " << started << "\n"
       << "finished = " << utc_timestamp() << "\n"
       << "threads = " << threads << "\n"
       << "elapsed_egorov_seconds = " << detail::format_double(run.egorov_seconds) << "\n"
       << "elapsed_correction_seconds = " << detail::format_double(run.correction_seconds) << "\n"
       << "elapsed_reference_seconds = " << detail::format_double(run.reference_seconds) << "\n";
  if (run.reference) {
    meta << "reference_grid_points = " << run.reference->settings.grid.points << "\n"
         << "reference_tau = " << detail::format_double(run.reference->settings.tau) << "\n"
         << "reference_from_cache = " << (run.reference->from_cache ? "true" : "false") << "\n"
         << "reference_max_norm_drift = " << detail::format_double(run.reference->max_norm_drift) << "\n"
         << "reference_max_boundary_mass = " << detail::format_double(run.reference->max_boundary_mass) << "\n";
  }
  meta << "\n# configuration\n" << to_text(run.config);
}

}  // namespace semiclassical
