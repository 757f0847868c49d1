// semiclassical: run, reference, compare, sweep, selftest.
//
// Exit codes: 0 success, 1 validation error, 2 numerical-check failure.

#include "semiclassical/experiment.hpp"
#include "semiclassical/run_config.hpp"
#include "semiclassical/selftest.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

using namespace semiclassical;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kNumerical = 2;

struct Options {
  std::string config_path;
  std::string out_dir;
  std::size_t threads = 0;
  bool long_run = false;
  std::string run_a;
  std::string run_b;
};

void log_line(const std::string& s) { std::cerr << s << std::endl; }

RunConfig load(const Options& o) {
  if (o.config_path.empty()) throw ConfigError("--config is required");
  RunConfig c = load_config(o.config_path);
  if (!o.out_dir.empty()) c.output_dir = o.out_dir;
  if (o.threads > 0) c.threads = o.threads;
  c.validate();
  return c;
}

void print_summary(const std::vector<ErrorSummary>& s) {
  write_summary_csv(std::cout, s);
}

int cmd_run(const Options& o) {
  const RunConfig c = load(o);
  const std::size_t threads = resolve_threads(c.threads);
  const std::string started = utc_timestamp();
  const RunOutput out = run_corrected(c, threads, o.long_run, log_line);
  write_run_outputs(c.output_dir, out, "run", threads, started);
  log_line("wrote " + (std::filesystem::path(c.output_dir) / "results.csv").string());
  if (c.reference) print_summary(summarize(errors_against_reference(out.rows)));
  return kOk;
}

int cmd_reference(const Options& o) {
  RunConfig c = load(o);
  c.reference = true;
  c.validate();
  const std::string started = utc_timestamp();
  const RunOutput out = run_reference(c, o.long_run, log_line);
  write_run_outputs(c.output_dir, out, o.long_run ? "reference --long-run" : "reference", 1, started);
  log_line("wrote " + (std::filesystem::path(c.output_dir) / "results.csv").string());
  return kOk;
}

int cmd_compare(const Options& o) {
  const std::vector<ErrorRow> errors = compare(read_results_csv(o.run_a), read_results_csv(o.run_b));
  const std::vector<ErrorSummary> summary = summarize(errors);
  if (!o.out_dir.empty()) {
    std::filesystem::create_directories(o.out_dir);
    std::ofstream e(std::filesystem::path(o.out_dir) / "errors.csv");
    write_errors_csv(e, errors);
    std::ofstream s(std::filesystem::path(o.out_dir) / "summary.csv");
    write_summary_csv(s, summary);
  }
  print_summary(summary);
  return kOk;
}

int cmd_sweep(const Options& o) {
  const RunConfig c = load(o);
  if (c.sweep_axis.empty()) throw ConfigError("sweep: the config needs sweep_axis and sweep_values");
  const std::size_t threads = resolve_threads(c.threads);
  const std::string started = utc_timestamp();
  const auto t0 = std::chrono::steady_clock::now();
  const SweepResult r = sweep(c, threads, o.long_run, log_line);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const std::filesystem::path dir(c.output_dir);
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "sweep.csv");
    write_sweep_csv(f, r);
  }
  {
    std::ofstream f(dir / "sweep_slopes.csv");
    write_slopes_csv(f, r);
  }
  for (std::size_t i = 0; i < r.runs.size(); ++i) {
    std::ofstream f(dir / ("results_" + std::to_string(i) + ".csv"));
    write_results_csv(f, r.runs[i].rows);
  }
  std::ofstream meta(dir / "metadata.txt");
  meta << "command = sweep\nstarted = " << started << "\nfinished = " << utc_timestamp() << "\nthreads = " << threads
       << "\nelapsed_seconds = " << seconds << "\n\n# configuration\n"
       << to_text(c);
  write_sweep_csv(std::cout, r);
  write_slopes_csv(std::cout, r);
  return kOk;
}

int cmd_selftest(const Options& o) {
  const std::vector<CheckResult> results = run_selftest(resolve_threads(o.threads), [](const std::string& s) {
    std::cout << s << std::endl;
  });
  std::size_t failed = 0;
  for (const CheckResult& r : results) failed += r.passed ? 0 : 1;
  std::cout << (failed == 0 ? "selftest passed" : "selftest failed: " + std::to_string(failed) + " check(s)") << std::endl;
  return failed == 0 ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semiclassical expectation values with second-order Egorov corrections"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* cfg = sub->add_option("--config", o.config_path, "Run configuration (key = value text)");
    if (needs_config) cfg->required()->check(CLI::ExistingFile);
    sub->add_option("--out", o.out_dir, "Output directory (overrides output_dir)");
    sub->add_option("--threads", o.threads, "Worker threads (0 = hardware concurrency)");
    sub->add_flag("--long-run", o.long_run, "Full-size reference: 1024 points per axis and tabulated step counts");
  };

  CLI::App* run = app.add_subcommand("run", "Egorov and corrected expectation values (plus reference if configured)");
  add_common(run, true);
  CLI::App* reference = app.add_subcommand("reference", "Grid reference expectation values");
  add_common(reference, true);
  CLI::App* cmp = app.add_subcommand("compare", "Per-time and summary errors between two result files");
  cmp->add_option("run_a", o.run_a, "Results CSV")->required()->check(CLI::ExistingFile);
  cmp->add_option("run_b", o.run_b, "Results CSV (or a reference-only file)")->required()->check(CLI::ExistingFile);
  cmp->add_option("--out", o.out_dir, "Directory for errors.csv and summary.csv");
  CLI::App* sw = app.add_subcommand("sweep", "Parameter sweep over epsilon, n2 or tau2 with log-log slopes");
  add_common(sw, true);
  CLI::App* self = app.add_subcommand("selftest", "Oracle equivalence, lemma properties and order checks");
  self->add_option("--threads", o.threads, "Worker threads (0 = hardware concurrency)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kValidation;
  }

  try {
    if (*run) return cmd_run(o);
    if (*reference) return cmd_reference(o);
    if (*cmp) return cmd_compare(o);
    if (*sw) return cmd_sweep(o);
    if (*self) return cmd_selftest(o);
  } catch (const NumericalCheckFailure& e) {
    std::cerr << "numerical check failed: " << e.what() << std::endl;
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kValidation;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kNumerical;
  }
  return kValidation;
}
