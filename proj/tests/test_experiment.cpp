#include "semiclassical/experiment.hpp"
#include "semiclassical/run_config.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace semiclassical;

namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("semiclassical_test_experiment_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig small_torsional() {
  RunConfig c;
  c.epsilon = 0.1;
  c.t_final = 2.0;
  c.snapshot_stride = 0.5;
  c.n0 = 700;
  c.n2 = 300;
  c.tau2 = 0.25;
  c.observables = {"q1", "q2", "p1", "p2", "kinetic", "potential", "total"};
  return c;
}

RunConfig small_reference(const fs::path& dir) {
  RunConfig c = small_torsional();
  c.t_final = 1.0;
  c.reference = true;
  c.grid_points = 64;
  c.output_dir = dir.string();
  c.cache_dir = (dir / "cache").string();
  return c;
}

std::string csv_text(const std::vector<ResultRow>& rows) {
  std::ostringstream o;
  write_results_csv(o, rows);
  return o.str();
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SEMICLASSICAL_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

// Configuration.

TEST(RunConfig, TextRoundTrip) {
  RunConfig c = small_torsional();
  c.potential = "harmonic";
  c.potential_params = {1.5, 0.75};
  c.q0 = {0.3, -0.2};
  c.p0 = {0.1, 0.7};
  c.sweep_axis = "tau2";
  c.sweep_values = {0.25, 0.125};
  c.sweep_against = "correction";
  c.baseline_n2 = 300;
  c.baseline_tau2 = 1.0 / 64;
  const std::string text = to_text(c);
  const RunConfig back = parse_config(text);
  EXPECT_EQ(to_text(back), text);
  EXPECT_EQ(back.potential_params, c.potential_params);
  EXPECT_EQ(back.observables, c.observables);
  EXPECT_DOUBLE_EQ(back.baseline_tau2, 1.0 / 64);
  EXPECT_NO_THROW(back.validate());
}

TEST(RunConfig, ParsesCommentsAndScientificCounts) {
  const RunConfig c = parse_config("# header\nn0 = 1e5   # samples\n\nn2=500\nobservables = q1 ,total\n");
  EXPECT_EQ(c.n0, 100000u);
  EXPECT_EQ(c.n2, 500u);
  EXPECT_EQ(c.observables, (std::vector<std::string>{"q1", "total"}));
}

TEST(RunConfig, RejectsMalformedText) {
  EXPECT_THROW(parse_config("epsilon 0.1\n"), ConfigError);
  EXPECT_THROW(parse_config("unknown_key = 3\n"), ConfigError);
  EXPECT_THROW(parse_config("n0 = 10\nn0 = 20\n"), ConfigError);
  EXPECT_THROW(parse_config("epsilon = abc\n"), ConfigError);
  EXPECT_THROW(parse_config("n0 = 1.5\n"), ConfigError);
  EXPECT_THROW(parse_config("reference = maybe\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/run.conf"), ConfigError);
}

TEST(RunConfig, ValidationMessages) {
  auto expect_invalid = [](const std::function<void(RunConfig&)>& edit) {
    RunConfig c = small_torsional();
    edit(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  EXPECT_NO_THROW(small_torsional().validate());
  expect_invalid([](RunConfig& c) { c.epsilon = 0; });
  expect_invalid([](RunConfig& c) { c.n2 = c.n0 + 1; });
  expect_invalid([](RunConfig& c) { c.tau2 = 0.3; });
  expect_invalid([](RunConfig& c) { c.tau0 = -0.1; });
  expect_invalid([](RunConfig& c) { c.t_final = 1.25; });
  expect_invalid([](RunConfig& c) { c.order0 = 3; });
  expect_invalid([](RunConfig& c) { c.q0 = {1.0}; });
  expect_invalid([](RunConfig& c) { c.potential = "morse"; });
  expect_invalid([](RunConfig& c) { c.observables = {"q3"}; });
  expect_invalid([](RunConfig& c) { c.observables = {}; });
  expect_invalid([](RunConfig& c) {
    c.reference = true;
    c.grid_points = 100;
  });
  expect_invalid([](RunConfig& c) {
    c.sweep_axis = "n0";
    c.sweep_values = {1, 2};
  });
  expect_invalid([](RunConfig& c) {
    c.sweep_axis = "tau2";
    c.sweep_values = {0.25, 0.0625, 0.125};
  });
  expect_invalid([](RunConfig& c) {
    c.sweep_axis = "epsilon";
    c.sweep_values = {0.1, 0.05};
    c.sweep_n0 = {1e4};
  });
  expect_invalid([](RunConfig& c) {
    c.sweep_axis = "tau2";
    c.sweep_values = {0.25, 0.125};
    c.sweep_against = "correction";
  });
}

TEST(RunConfig, SnapshotTimesAndReferenceStep) {
  const RunConfig c = small_torsional();
  EXPECT_EQ(c.snapshot_times(), (std::vector<double>{0.0, 0.5, 1.0, 1.5, 2.0}));
  const double tau = c.effective_reference_tau();
  EXPECT_LE(tau, c.epsilon / 800);
  EXPECT_NEAR(c.snapshot_stride / tau, std::round(c.snapshot_stride / tau), 1e-9);
}

TEST(RunConfig, ShippedPresetsCarryTheirSamplingParameters) {
  const fs::path dir = fs::path(SEMICLASSICAL_SOURCE_DIR) / "configs";
  struct Row {
    const char* file;
    double eps;
    std::size_t n0;
    double tau0;
    std::size_t n2;
    double tau2;
  };
  const Row rows[] = {{"preset_eps0.1.conf", 0.1, 100000, 0.1, 500, 0.25},
                      {"preset_eps0.05.conf", 0.05, 1000000, 0.1, 1000, 0.125},
                      {"preset_eps0.02.conf", 0.02, 10000000, 0.1, 10000, 0.03125},
                      {"preset_eps0.01.conf", 0.01, 100000000, 0.1, 10000, 0.03125}};
  for (const Row& r : rows) {
    const RunConfig c = load_config((dir / r.file).string());
    EXPECT_NO_THROW(c.validate()) << r.file;
    EXPECT_EQ(c.epsilon, r.eps) << r.file;
    EXPECT_EQ(c.n0, r.n0) << r.file;
    EXPECT_EQ(c.tau0, r.tau0) << r.file;
    EXPECT_EQ(c.n2, r.n2) << r.file;
    EXPECT_EQ(c.tau2, r.tau2) << r.file;
    EXPECT_EQ(c.q0, (std::vector<double>{1.0, 0.5})) << r.file;
    EXPECT_EQ(c.t_final, 15.0) << r.file;
  }
  std::size_t count = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() != ".conf") continue;
    EXPECT_NO_THROW(load_config(entry.path().string()).validate()) << entry.path();
    ++count;
  }
  EXPECT_GE(count, 7u);
}

// Rows and CSV.

TEST(Results, CorrectedIdentityHoldsExactly) {
  const RunConfig c = small_torsional();
  const RunOutput out = run_corrected(c, 1);
  ASSERT_EQ(out.rows.size(), c.snapshot_count() * c.observables.size());
  bool any_nonzero = false;
  for (const ResultRow& r : out.rows) {
    ASSERT_TRUE(r.egorov && r.correction && r.corrected);
    EXPECT_TRUE(same_bits(*r.corrected, *r.egorov + (c.epsilon * c.epsilon) * *r.correction));
    any_nonzero = any_nonzero || *r.correction != 0.0;
  }
  EXPECT_TRUE(any_nonzero);
}

TEST(Results, CsvRoundTripIsExact) {
  const RunConfig c = small_torsional();
  std::vector<ResultRow> rows = run_corrected(c, 1).rows;
  rows[3].reference = 0.125;
  const std::string text = csv_text(rows);
  EXPECT_EQ(text.substr(0, text.find('\n')), kResultHeader);
  std::istringstream in(text);
  const std::vector<ResultRow> back = read_results_csv(in);
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].observable, rows[i].observable);
    EXPECT_TRUE(same_bits(back[i].time, rows[i].time));
    EXPECT_TRUE(same_bits(*back[i].egorov, *rows[i].egorov));
    EXPECT_TRUE(same_bits(*back[i].corrected, *rows[i].corrected));
    EXPECT_EQ(back[i].reference.has_value(), i == 3);
  }
  EXPECT_EQ(csv_text(back), text);
}

TEST(Results, CsvRejectsWrongHeader) {
  std::istringstream in("time,value\n0,1\n");
  EXPECT_THROW(read_results_csv(in), std::invalid_argument);
}

TEST(Results, ZeroCorrectionSamplesDegenerateToEgorov) {
  RunConfig c = small_torsional();
  c.n2 = 0;
  const RunOutput corrected = run_corrected(c, 1);
  const RunOutput plain = run_egorov(c, 1);
  ASSERT_EQ(corrected.rows.size(), plain.rows.size());
  for (std::size_t i = 0; i < plain.rows.size(); ++i) {
    EXPECT_EQ(*corrected.rows[i].correction, 0.0);
    EXPECT_TRUE(same_bits(*corrected.rows[i].corrected, *plain.rows[i].egorov));
    EXPECT_TRUE(same_bits(*corrected.rows[i].egorov, *plain.rows[i].egorov));
  }
}

TEST(Results, InitialRowIsTheSampleMoment) {
  RunConfig c = small_torsional();
  c.n2 = 0;
  const RunOutput out = run_egorov(c, 1);
  const std::vector<PhasePoint> pts = sample_points(c.packet(), QmcSampler(c.n0, c.halton_skip));
  double q1 = 0.0;
  for (const PhasePoint& z : pts) q1 += z.q[0];
  q1 /= static_cast<double>(pts.size());
  EXPECT_NEAR(*out.rows[0].egorov, q1, 1e-14);
  EXPECT_EQ(out.rows[0].observable, "q1");
}

// Determinism.

TEST(Determinism, BitIdenticalAcrossThreadCounts) {
  RunConfig c = small_torsional();
  c.n0 = 1300;  // several 256-point blocks plus a partial one
  c.n2 = 600;
  const std::string serial = csv_text(run_corrected(c, 1).rows);
  EXPECT_EQ(csv_text(run_corrected(c, 3).rows), serial);
  EXPECT_EQ(csv_text(run_corrected(c, 8).rows), serial);
  EXPECT_EQ(csv_text(run_corrected(c, 1).rows), serial);
}

TEST(Determinism, RunOutputFilesRepeatByteForByte) {
  const fs::path dir = scratch_dir("repeat");
  const RunConfig c = small_torsional();
  auto read = [](const fs::path& p) {
    std::ifstream f(p);
    std::stringstream s;
    s << f.rdbuf();
    return s.str();
  };
  write_run_outputs((dir / "a").string(), run_corrected(c, 2), "run", 2, utc_timestamp());
  write_run_outputs((dir / "b").string(), run_corrected(c, 1), "run", 1, utc_timestamp());
  EXPECT_EQ(read(dir / "a" / "results.csv"), read(dir / "b" / "results.csv"));
  EXPECT_NE(read(dir / "a" / "metadata.txt").find("elapsed_egorov_seconds"), std::string::npos);
}

// Physics rows.

TEST(Physics, HarmonicEgorovIsTheRotatedCenter) {
  RunConfig c;
  c.epsilon = 0.1;
  c.potential = "harmonic";
  c.potential_params = {1.0, 1.0};
  c.q0 = {1.0, 0.5};
  c.p0 = {0.0, 0.3};
  c.t_final = 3.0;
  c.snapshot_stride = 0.5;
  c.n0 = 10000;
  c.n2 = 200;
  c.observables = {"q1", "q2", "p1", "p2"};
  const RunOutput out = run_corrected(c, 1);
  const double tol = 3.0 * std::sqrt(c.epsilon / 2) / std::sqrt(static_cast<double>(c.n0));
  for (const ResultRow& r : out.rows) {
    const double t = r.time, C = std::cos(t), S = std::sin(t);
    double exact = 0.0;
    if (r.observable == "q1") exact = C * 1.0;
    if (r.observable == "q2") exact = C * 0.5 + S * 0.3;
    if (r.observable == "p1") exact = -S * 1.0;
    if (r.observable == "p2") exact = -S * 0.5 + C * 0.3;
    EXPECT_NEAR(*r.egorov, exact, tol) << r.observable << " t=" << t;
    EXPECT_EQ(*r.correction, 0.0) << r.observable << " t=" << t;
  }
}

TEST(Physics, TotalEnergyRowIsConserved) {
  RunConfig c = small_torsional();
  c.t_final = 3.0;
  c.tau2 = 1.0 / 128;
  c.observables = {"total"};
  const RunOutput out = run_corrected(c, 1);
  const double e0 = *out.rows.front().egorov;
  for (const ResultRow& r : out.rows) {
    EXPECT_NEAR(*r.egorov, e0, 1e-9) << "t=" << r.time;
    EXPECT_LE(std::abs(*r.correction), 1e-8) << "t=" << r.time;
  }
}

// Compare and summaries.

TEST(Compare, IdenticalRunsGiveZeroErrors) {
  const std::vector<ResultRow> rows = run_corrected(small_torsional(), 1).rows;
  const std::vector<ErrorRow> errors = compare(rows, rows);
  ASSERT_EQ(errors.size(), rows.size());
  for (const ErrorRow& e : errors) {
    EXPECT_EQ(e.err_egorov, 0.0);
    EXPECT_EQ(e.err_corrected, 0.0);
  }
  for (const ErrorSummary& s : summarize(errors)) {
    EXPECT_EQ(s.mean_err_egorov, 0.0);
    EXPECT_EQ(s.max_err_corrected, 0.0);
  }
}

TEST(Compare, MismatchedSnapshotGridsAreRejected) {
  RunConfig a = small_torsional(), b = small_torsional();
  b.t_final = 1.5;
  const auto ra = run_egorov(a, 1).rows, rb = run_egorov(b, 1).rows;
  EXPECT_THROW(compare(ra, rb), ConfigError);
  b = small_torsional();
  b.snapshot_stride = 0.2;
  b.t_final = 0.8;
  b.tau2 = 0.1;
  auto rc = run_egorov(b, 1).rows;
  rc.resize(ra.size());
  EXPECT_THROW(compare(ra, rc), ConfigError);
}

TEST(Compare, SummaryIsMeanAndMaxOverTime) {
  std::vector<ErrorRow> errors;
  const double vals[] = {1e-3, 4e-3, 2e-3};
  for (int k = 0; k < 3; ++k) {
    errors.push_back({0.5 * k, "q1", vals[k], vals[k] / 10});
    errors.push_back({0.5 * k, "p1", 2 * vals[k], 0.0});
  }
  const std::vector<ErrorSummary> s = summarize(errors);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[0].observable, "q1");
  EXPECT_NEAR(s[0].mean_err_egorov, 7e-3 / 3, 1e-18);
  EXPECT_EQ(s[0].max_err_egorov, 4e-3);
  EXPECT_EQ(s[0].max_err_corrected, 4e-4);
  EXPECT_EQ(s[1].observable, "p1");
  EXPECT_EQ(s[1].max_err_egorov, 8e-3);
  EXPECT_EQ(s[2].observable, "all");
  EXPECT_EQ(s[2].max_err_egorov, 8e-3);
  EXPECT_NEAR(s[2].mean_err_egorov, 21e-3 / 6, 1e-18);
}

TEST(Slope, RecoversPowerLaws) {
  const std::vector<double> x{0.25, 0.125, 0.0625, 0.03125};
  std::vector<double> y4, yh;
  for (double v : x) {
    y4.push_back(3.0 * std::pow(v, 4));
    yh.push_back(0.2 * std::pow(v, -0.5));
  }
  EXPECT_NEAR(loglog_slope(x, y4), 4.0, 1e-12);
  EXPECT_NEAR(loglog_slope(x, yh), -0.5, 1e-12);
  EXPECT_TRUE(std::isnan(loglog_slope({1.0}, {2.0})));
  EXPECT_TRUE(std::isnan(loglog_slope({1.0, 2.0}, {0.0, 1.0})));
}

// Reference runs and sweeps.

TEST(Reference, CacheHitReturnsStoredValues) {
  const fs::path dir = scratch_dir("cache");
  const RunConfig c = small_reference(dir);
  const ReferenceRun first = reference_series(c);
  EXPECT_FALSE(first.from_cache);
  EXPECT_LE(first.max_norm_drift, 1e-10);
  EXPECT_LE(first.max_boundary_mass, 1e-8);
  const ReferenceRun second = reference_series(c);
  EXPECT_TRUE(second.from_cache);
  ASSERT_EQ(second.values.values.size(), first.values.values.size());
  for (std::size_t i = 0; i < first.values.values.size(); ++i) {
    EXPECT_TRUE(same_bits(second.values.values[i], first.values.values[i]));
  }
  RunConfig other = c;
  other.epsilon = 0.09;
  EXPECT_FALSE(reference_series(other).from_cache);
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(c.cache_dir)) ++files;
  EXPECT_EQ(files, 2u);
}

TEST(Reference, LeakingPacketIsANumericalFailure) {
  RunConfig c = small_reference(scratch_dir("leak"));
  c.q0 = {2.7, 0.0};
  EXPECT_THROW(reference_series(c, false, false), NumericalCheckFailure);
}

TEST(Reference, LongRunUsesTheFullGridAndTabulatedSteps) {
  RunConfig c = small_torsional();
  const ReferenceSettings r = reference_settings(c, true);
  EXPECT_EQ(r.grid.points, 1024u);
  EXPECT_NEAR(15.0 / r.tau, 1.2e5, 1e-6);
  c.epsilon = 0.01;
  EXPECT_NEAR(15.0 / reference_settings(c, true).tau, 1.2e6, 1e-4);
  EXPECT_EQ(reference_settings(c, false).grid.points, c.grid_points);
}

TEST(Sweep, SingleValueMatchesRunAndCompare) {
  const fs::path dir = scratch_dir("single");
  RunConfig base = small_reference(dir);
  base.sweep_axis = "epsilon";
  base.sweep_values = {0.1};
  const SweepResult s = sweep(base, 1);
  const RunOutput direct = run_corrected(sweep_point(base, 0), 1);
  EXPECT_EQ(csv_text(s.runs.at(0).rows), csv_text(direct.rows));
  const std::vector<ErrorSummary> expected = summarize(errors_against_reference(direct.rows));
  ASSERT_EQ(s.rows.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    EXPECT_EQ(s.rows[i].summary.observable, expected[i].observable);
    EXPECT_TRUE(same_bits(s.rows[i].summary.max_err_corrected, expected[i].max_err_corrected));
    EXPECT_TRUE(same_bits(s.rows[i].summary.mean_err_egorov, expected[i].mean_err_egorov));
  }
  for (const SweepSlope& sl : s.slopes) EXPECT_TRUE(std::isnan(sl.slope));
}

TEST(Sweep, CompareAgainstReferenceOnlyFile) {
  const fs::path dir = scratch_dir("refonly");
  const RunConfig c = small_reference(dir);
  const RunOutput run = run_corrected(c, 1);
  const RunOutput ref = run_reference(c);
  const std::vector<ErrorRow> a = compare(run.rows, ref.rows);
  const std::vector<ErrorRow> b = errors_against_reference(run.rows);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].err_egorov, b[i].err_egorov);
    EXPECT_EQ(a[i].err_corrected, b[i].err_corrected);
  }
}

TEST(Sweep, SplittingErrorAgainstFineBaselineIsFourthOrder) {
  RunConfig base = small_torsional();
  base.n2 = 200;
  base.observables = {"q1", "p1", "kinetic"};
  base.sweep_axis = "tau2";
  base.sweep_values = {0.25, 0.125, 0.0625};
  base.sweep_against = "correction";
  base.baseline_n2 = 200;
  base.baseline_tau2 = 1.0 / 256;
  const SweepResult s = sweep(base, 1);
  for (const SweepRow& r : s.rows) EXPECT_TRUE(std::isnan(r.summary.max_err_egorov));
  bool found = false;
  for (const SweepSlope& sl : s.slopes) {
    if (sl.observable == "all" && sl.metric == "max_err_corrected") {
      EXPECT_GE(sl.slope, 3.5);
      EXPECT_LE(sl.slope, 4.5);
      found = true;
    }
  }
  EXPECT_TRUE(found);
  std::ostringstream o;
  write_slopes_csv(o, s);
  EXPECT_EQ(o.str().substr(0, o.str().find('\n')), "axis,observable,metric,slope");
}

// Command line.

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch_dir("cli");
  const fs::path good = dir / "good.conf", bad = dir / "bad.conf", leak = dir / "leak.conf";
  RunConfig c = small_torsional();
  c.t_final = 1.0;
  c.observables = {"q1"};
  std::ofstream(good) << to_text(c);
  std::ofstream(bad) << "epsilon = -1\n";
  RunConfig l = small_reference(dir);
  l.q0 = {2.7, 0.0};
  std::ofstream(leak) << to_text(l);

  EXPECT_EQ(run_cli("run --config " + good.string() + " --out " + (dir / "out").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "results.csv"));
  EXPECT_TRUE(fs::exists(dir / "out" / "metadata.txt"));
  const std::string r = (dir / "out" / "results.csv").string();
  EXPECT_EQ(run_cli("compare " + r + " " + r + " --out " + (dir / "cmp").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "cmp" / "summary.csv"));
  EXPECT_EQ(run_cli("run --config " + bad.string()), 1);
  EXPECT_EQ(run_cli("run"), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("reference --config " + leak.string() + " --out " + (dir / "leak").string()), 2);
}
