// Command-line front end: single closed-loop runs, Monte-Carlo batches, the
// property-validation suites, and SOCP problem-file dumps.
//
// All deterministic outputs (trace.csv, metrics.json, table.csv minus its
// solve-time column, config.json, socp.json) are byte-reproducible for a
// fixed seed; wall-clock figures go to timing.json.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmpc/sim.hpp"
#include "mmpc/validation.hpp"

namespace fs = std::filesystem;
using namespace mmpc;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;
  std::optional<int> scenario;
  std::optional<double> distance;
  std::optional<double> speed;
  std::optional<std::string> variant;
  std::optional<int> horizon;
  std::optional<double> risk;
  std::optional<double> confidence;
  std::optional<int> true_mode;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "JSON config file");
  cmd->add_option("--out", opts.out_dir, "output directory");
  cmd->add_option("--seed", opts.seed, "RNG seed override");
  cmd->add_option("--scenario", opts.scenario, "scenario id (1-3)");
  cmd->add_option("--distance", opts.distance, "EV initial distance, m");
  cmd->add_option("--speed", opts.speed, "EV initial speed, m/s");
  cmd->add_option("--variant", opts.variant, "policy | open_loop")
      ->check(CLI::IsMember({"policy", "open_loop"}));
  cmd->add_option("--horizon", opts.horizon, "prediction horizon N");
  cmd->add_option("--risk", opts.risk, "per-constraint risk level");
  cmd->add_option("--confidence", opts.confidence,
                  "chi-square confidence level for mode inference");
  cmd->add_option("--true-mode", opts.true_mode, "TV true mode index");
}

ScenarioConfig load_config(const CommonOpts& opts) {
  ScenarioConfig cfg;
  if (!opts.config_path.empty()) {
    std::ifstream in(opts.config_path);
    if (!in)
      throw std::invalid_argument("cannot open config file: " +
                                  opts.config_path);
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    cfg = scenario_config_from_json(text);
  }
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.scenario) cfg.scenario = *opts.scenario;
  if (opts.distance) cfg.initial_distance = *opts.distance;
  if (opts.speed) cfg.initial_speed = *opts.speed;
  if (opts.variant) {
    cfg.smpc.variant = *opts.variant == "policy" ? SmpcVariant::policy
                                                 : SmpcVariant::open_loop;
  }
  if (opts.horizon) cfg.smpc.horizon = *opts.horizon;
  if (opts.risk) cfg.smpc.risk = *opts.risk;
  if (opts.confidence) cfg.smpc.confidence = *opts.confidence;
  if (opts.true_mode) cfg.true_mode = *opts.true_mode;
  cfg.validate();
  return cfg;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

int cmd_run(const CommonOpts& opts) {
  const ScenarioConfig cfg = load_config(opts);
  fs::create_directories(opts.out_dir);
  const fs::path out(opts.out_dir);

  const ClosedLoopTrace trace = run_closed_loop(cfg);
  const ScenarioWorld world = make_scenario(cfg);
  const MetricsReport metrics = compute_metrics(trace, world.reference);

  save_trace_csv(trace, (out / "trace.csv").string());
  write_file(out / "metrics.json", metrics_to_json(metrics, false));
  write_file(out / "config.json", scenario_config_to_json(cfg));

  double build_ms = 0.0, solve_ms = 0.0;
  for (const TraceStep& s : trace.steps) {
    build_ms += s.build_ms;
    solve_ms += s.solve_ms;
  }
  const double n = trace.steps.empty() ? 1.0 : (double)trace.steps.size();
  nlohmann::json timing{{"steps", trace.steps.size()},
                        {"mean_build_ms", build_ms / n},
                        {"mean_solve_ms", solve_ms / n},
                        {"mean_step_ms", (build_ms + solve_ms) / n}};
  write_file(out / "timing.json", timing.dump(2) + "\n");

  std::printf("steps=%zu goal=%s terminal_error=%.3f feasibility=%.1f%%\n",
              trace.steps.size(), trace.goal_reached ? "yes" : "no",
              trace.terminal_error, metrics.feasibility_pct);
  return 0;
}

/// Table I shape: one row per scenario and variant, metrics averaged across
/// the initial-condition cells.
std::string aggregate_table_csv(const BatchReport& report) {
  std::string csv =
      "scenario,variant,time_ratio,lat_accel_ratio,long_jerk,lat_jerk,"
      "ref_deviation,min_distance,feasibility_pct,solve_time_ms\n";
  char buf[256];
  for (int sc = 1; sc <= 3; ++sc) {
    for (SmpcVariant variant : {SmpcVariant::policy, SmpcVariant::open_loop}) {
      MetricsReport acc{};
      int cells = 0;
      for (const BatchCell& c : report.cells) {
        if (c.scenario != sc || c.variant != variant) continue;
        acc.episode_time_ratio += c.mean.episode_time_ratio;
        acc.lat_accel_ratio += c.mean.lat_accel_ratio;
        acc.long_jerk += c.mean.long_jerk;
        acc.lat_jerk += c.mean.lat_jerk;
        acc.ref_deviation += c.mean.ref_deviation;
        acc.min_distance += c.mean.min_distance;
        acc.feasibility_pct += c.mean.feasibility_pct;
        acc.solve_time_ms += c.mean.solve_time_ms;
        ++cells;
      }
      if (cells == 0) continue;
      std::snprintf(buf, sizeof(buf),
                    "%d,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", sc,
                    variant == SmpcVariant::policy ? "policy" : "open_loop",
                    acc.episode_time_ratio / cells, acc.lat_accel_ratio / cells,
                    acc.long_jerk / cells, acc.lat_jerk / cells,
                    acc.ref_deviation / cells, acc.min_distance / cells,
                    acc.feasibility_pct / cells, acc.solve_time_ms / cells);
      csv += buf;
    }
  }
  return csv;
}

int cmd_batch(const CommonOpts& opts, const std::string& grid_name, int reps,
              int workers) {
  const ScenarioConfig base = load_config(opts);
  std::vector<ScenarioConfig> grid;
  if (grid_name == "full") {
    for (int sc = 1; sc <= 3; ++sc) {
      for (double d : {10.0, 20.0}) {
        for (double v : {8.0, 10.0}) {
          for (SmpcVariant variant :
               {SmpcVariant::policy, SmpcVariant::open_loop}) {
            ScenarioConfig cfg = base;
            cfg.scenario = sc;
            cfg.initial_distance = d;
            cfg.initial_speed = v;
            cfg.smpc.variant = variant;
            cfg.validate();
            grid.push_back(cfg);
          }
        }
      }
    }
  } else if (grid_name == "single") {
    for (SmpcVariant variant :
         {SmpcVariant::policy, SmpcVariant::open_loop}) {
      ScenarioConfig cfg = base;
      cfg.smpc.variant = variant;
      grid.push_back(cfg);
    }
  } else {
    throw std::invalid_argument("unknown grid: " + grid_name +
                                " (expected full or single)");
  }

  fs::create_directories(opts.out_dir);
  const fs::path out(opts.out_dir);
  const auto t0 = std::chrono::steady_clock::now();
  const BatchReport report = batch_run(grid, reps, workers);
  const double wall_s = std::chrono::duration<double>(
                            std::chrono::steady_clock::now() - t0)
                            .count();

  write_file(out / "table.csv", aggregate_table_csv(report));
  write_file(out / "batch.json", batch_to_json(report, false));
  write_file(out / "config.json", scenario_config_to_json(base));
  double solve_ms = 0.0;
  for (const BatchCell& c : report.cells) solve_ms += c.mean.solve_time_ms;
  nlohmann::json timing{
      {"episodes", (int)grid.size() * reps},
      {"wall_s", wall_s},
      {"mean_solve_ms",
       report.cells.empty() ? 0.0 : solve_ms / report.cells.size()}};
  write_file(out / "timing.json", timing.dump(2) + "\n");

  std::printf("%zu cells, %d episodes, %.1f s\n", report.cells.size(),
              (int)grid.size() * reps, wall_s);
  return 0;
}

int cmd_validate(const std::string& suite, std::uint64_t seed, int samples) {
  std::vector<SuiteResult> results;
  auto want = [&](const char* name) {
    return suite == "all" || suite == name;
  };
  // sample counts track the documented budgets; --samples scales the
  // dominant Monte-Carlo loop of the selected suite
  if (want("implication"))
    results.push_back(validate_ca_implication(seed, samples > 0 ? samples
                                                                : 100000));
  if (want("marginal")) {
    results.push_back(
        validate_conditional_level(seed, 20, samples > 0 ? samples : 1000000));
    results.push_back(
        validate_marginal_covariance(seed, 10, samples > 0 ? samples
                                                           : 1000000));
  }
  if (want("affinity")) results.push_back(validate_policy_affinity(seed, 100));
  if (want("cost"))
    results.push_back(
        validate_cost_certificate(seed, 10, samples > 0 ? samples : 1000000));
  if (want("chance"))
    results.push_back(
        validate_chance_calibration(seed, samples > 0 ? samples : 100000));
  if (want("solver")) results.push_back(validate_solver_battery(seed, 200));
  if (results.empty())
    throw std::invalid_argument(
        "unknown suite: " + suite +
        " (expected all, implication, marginal, affinity, cost, chance, solver)");

  bool all_pass = true;
  for (const SuiteResult& r : results) {
    std::printf("%-22s %s  %s\n", r.name.c_str(), r.pass ? "PASS" : "FAIL",
                r.detail.c_str());
    all_pass = all_pass && r.pass;
  }
  return all_pass ? 0 : 1;
}

int cmd_dump_socp(const CommonOpts& opts) {
  const ScenarioConfig cfg = load_config(opts);
  fs::create_directories(opts.out_dir);
  const ScenarioWorld world = make_scenario(cfg);
  ScenarioConfig scfg = cfg;
  scfg.smpc.num_modes = (int)world.tv_modes.size();
  const GmmPrediction gmm =
      scenario_gmm(world, scfg, world.tv_start, world.tv_initial_speed);
  const SmpcProblem prob =
      build_socp(world.reference.states[0], world.tv_start, world.reference, 0,
                 gmm, scfg.smpc);
  const fs::path path = fs::path(opts.out_dir) / "socp.json";
  save_program(prob.program, path.string());
  std::printf("wrote %s (%zd vars, %zu cones)\n", path.string().c_str(),
              prob.program.num_vars(), prob.program.cones.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal stochastic MPC simulator"};
  app.require_subcommand(1);

  CommonOpts run_opts, batch_opts, dump_opts;
  std::string grid_name = "full";
  int reps = 1;
  int workers = (int)std::thread::hardware_concurrency();
  std::string suite = "all";
  std::uint64_t val_seed = 1;
  int val_samples = 0;

  CLI::App* run = app.add_subcommand("run", "single closed-loop episode");
  add_common(run, run_opts);

  CLI::App* batch = app.add_subcommand("batch", "Monte-Carlo batch");
  add_common(batch, batch_opts);
  batch->add_option("--grid", grid_name, "full | single");
  batch->add_option("--reps", reps, "repetitions per grid cell");
  batch->add_option("--workers", workers, "worker threads");

  CLI::App* validate =
      app.add_subcommand("validate", "property-validation suites");
  validate->add_option("--suite", suite,
                       "all | implication | marginal | affinity | cost | chance | solver");
  validate->add_option("--seed", val_seed, "suite RNG seed");
  validate->add_option("--samples", val_samples,
                       "Monte-Carlo sample count (0 = suite default)");

  CLI::App* dump =
      app.add_subcommand("dump-socp", "write one assembled program as JSON");
  add_common(dump, dump_opts);

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(run_opts);
    if (batch->parsed()) return cmd_batch(batch_opts, grid_name, reps, workers);
    if (validate->parsed()) return cmd_validate(suite, val_seed, val_samples);
    if (dump->parsed()) return cmd_dump_socp(dump_opts);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
