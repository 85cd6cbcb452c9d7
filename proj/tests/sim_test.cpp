#include <cstdio>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "mmpc/sim.hpp"

using namespace mmpc;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ScenarioConfig fast_config() {
  ScenarioConfig cfg;
  cfg.scenario = 1;
  cfg.initial_distance = 10.0;
  cfg.initial_speed = 8.0;
  cfg.seed = 1;
  return cfg;
}

}  // namespace

TEST_CASE("lane path geometry") {
  LanePath path({0.0, 0.0}, 0.0);
  path.line(5.0).arc(2.0, M_PI / 2);
  CHECK(path.length() == doctest::Approx(5.0 + M_PI).epsilon(1e-12));

  CHECK((path.point_at(0.0) - Eigen::Vector2d(0.0, 0.0)).norm() < 1e-12);
  CHECK((path.point_at(3.0) - Eigen::Vector2d(3.0, 0.0)).norm() < 1e-12);
  CHECK(path.heading_at(3.0) == doctest::Approx(0.0));
  // End of the quarter arc: left turn of radius 2 starting at (5, 0).
  CHECK((path.point_at(path.length()) - Eigen::Vector2d(7.0, 2.0)).norm() <
        1e-9);
  CHECK(path.heading_at(path.length()) == doctest::Approx(M_PI / 2));
  // Arc midpoint at 45 degrees.
  CHECK((path.point_at(5.0 + M_PI / 2) -
         (Eigen::Vector2d(5.0, 2.0) +
          2.0 * Eigen::Vector2d(std::sin(M_PI / 4), -std::cos(M_PI / 4))))
            .norm() < 1e-9);
  // Beyond-the-end queries clamp.
  CHECK((path.point_at(100.0) - path.point_at(path.length())).norm() < 1e-12);

  // Projection inverts point_at for small lateral offsets.
  for (double s : {0.5, 2.5, 5.5, 6.5}) {
    const double h = path.heading_at(s);
    const Eigen::Vector2d normal(-std::sin(h), std::cos(h));
    const Eigen::Vector2d p = path.point_at(s) + 0.2 * normal;
    CHECK(path.project(p) == doctest::Approx(s).epsilon(1e-6));
  }
}

TEST_CASE("scenario config validation") {
  CHECK_NOTHROW(fast_config().validate());
  ScenarioConfig bad = fast_config();
  bad.scenario = 9;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = fast_config();
  bad.true_mode = 5;
  CHECK_THROWS(bad.validate());
  bad = fast_config();
  bad.dt = 0.0;
  CHECK_THROWS(bad.validate());
  bad = fast_config();
  bad.max_steps = 0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("scenario worlds are well formed") {
  for (int sc = 1; sc <= 3; ++sc) {
    ScenarioConfig cfg = fast_config();
    cfg.scenario = sc;
    const ScenarioWorld world = make_scenario(cfg);
    CHECK(world.tv_modes.size() == 3);
    CHECK(world.mode_priors.size() == 3);
    CHECK(world.mode_priors.sum() == doctest::Approx(1.0));
    CHECK(world.reference.states.size() > cfg.smpc.horizon + 1);
    // The goal sits on the reference path.
    double best = 1e9;
    for (const EvState& s : world.reference.states)
      best = std::min(best, (Eigen::Vector2d(s.x_pos, s.y_pos) -
                             world.goal_point)
                                .norm());
    CHECK(best < 1.0);
    const GmmPrediction gmm =
        scenario_gmm(world, cfg, world.tv_start, world.tv_initial_speed);
    CHECK(gmm.num_modes() == 3);
    CHECK(gmm.horizon() == (std::size_t)cfg.smpc.horizon);
    CHECK_NOTHROW(gmm.validate());
    // Restricting to one mode collapses the mixture.
    const GmmPrediction one =
        scenario_gmm(world, cfg, world.tv_start, world.tv_initial_speed, 1);
    CHECK(one.num_modes() == 1);
    CHECK(one.mode_probs(0) == doctest::Approx(1.0));
    for (std::size_t k = 0; k < one.horizon(); ++k)
      CHECK((one.means[0][k] - gmm.means[1][k]).norm() < 1e-12);
  }
}

TEST_CASE("closed loop is deterministic") {
  const ScenarioConfig cfg = fast_config();
  const ClosedLoopTrace a = run_closed_loop(cfg);
  const ClosedLoopTrace b = run_closed_loop(cfg);
  REQUIRE(a.steps.size() == b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    CHECK((a.steps[i].state.vec() - b.steps[i].state.vec()).norm() == 0.0);
    CHECK((a.steps[i].input.vec() - b.steps[i].input.vec()).norm() == 0.0);
    CHECK((a.steps[i].tv_pos - b.steps[i].tv_pos).norm() == 0.0);
    CHECK(a.steps[i].objective == b.steps[i].objective);
    CHECK(a.steps[i].status == b.steps[i].status);
  }
  CHECK((a.final_state.vec() - b.final_state.vec()).norm() == 0.0);
  CHECK(a.terminal_error == b.terminal_error);

  save_trace_csv(a, "trace_a_test.csv");
  save_trace_csv(b, "trace_b_test.csv");
  CHECK(slurp("trace_a_test.csv") == slurp("trace_b_test.csv"));
  std::remove("trace_a_test.csv");
  std::remove("trace_b_test.csv");

  // A different seed produces a different trace.
  ScenarioConfig other = cfg;
  other.seed = 2;
  const ClosedLoopTrace c = run_closed_loop(other);
  bool differs = c.steps.size() != a.steps.size();
  for (std::size_t i = 0; !differs && i < a.steps.size(); ++i)
    differs = (a.steps[i].state.vec() - c.steps[i].state.vec()).norm() > 0;
  CHECK(differs);
}

TEST_CASE("closed loop avoids the TV") {
  ScenarioConfig cfg = fast_config();
  const ClosedLoopTrace trace = run_closed_loop(cfg);
  CHECK(trace.goal_reached);
  for (const TraceStep& s : trace.steps) CHECK(s.g_value >= 1.0 - 1e-9);
}

TEST_CASE("obstacle-free noise-free loop tracks the reference") {
  ScenarioConfig cfg = fast_config();
  cfg.tv_present = false;
  cfg.ev_noise = false;
  cfg.tv_noise = false;
  const ClosedLoopTrace trace = run_closed_loop(cfg);
  CHECK(trace.goal_reached);
  CHECK(trace.terminal_error < 0.05);
}

TEST_CASE("metrics on a reference-shaped trace") {
  ScenarioConfig cfg = fast_config();
  const ScenarioWorld world = make_scenario(cfg);
  const ReferenceTrajectory& ref = world.reference;

  // Find the reference step that first enters the goal radius.
  std::size_t goal_idx = 0;
  for (std::size_t i = 0; i < ref.states.size(); ++i) {
    if ((Eigen::Vector2d(ref.states[i].x_pos, ref.states[i].y_pos) -
         world.goal_point)
            .norm() < 1.0) {
      goal_idx = i;
      break;
    }
  }
  REQUIRE(goal_idx > 2);

  ClosedLoopTrace trace;
  trace.dt = ref.dt;
  trace.goal_point = world.goal_point;
  trace.goal_reached = true;
  trace.goal_step = (int)goal_idx;
  trace.final_state = ref.states[goal_idx];
  for (std::size_t i = 0; i < goal_idx; ++i) {
    TraceStep s;
    s.step = (int)i;
    s.time = i * ref.dt;
    s.state = ref.states[i];
    s.input = ref.inputs[i];
    s.tv_pos = Eigen::Vector2d(100.0, 100.0);
    s.status = SmpcStatus::optimal;
    trace.steps.push_back(s);
  }

  const MetricsReport m = compute_metrics(trace, ref);
  CHECK(m.episode_time_ratio == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m.lat_accel_ratio == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(m.ref_deviation < 1e-9);
  CHECK(m.feasibility_pct == 100.0);
  CHECK(m.min_distance > 50.0);
  CHECK(m.jerk_defined);

  // One fallback step drops the feasibility percentage accordingly.
  ClosedLoopTrace braked = trace;
  braked.steps[3].status = SmpcStatus::fallback;
  const MetricsReport mb = compute_metrics(braked, ref);
  CHECK(mb.feasibility_pct ==
        doctest::Approx(100.0 * (goal_idx - 1.0) / goal_idx));

  // A single-step trace cannot difference jerks.
  ClosedLoopTrace tiny = trace;
  tiny.steps.resize(1);
  tiny.goal_reached = false;
  const MetricsReport mt = compute_metrics(tiny, ref);
  CHECK(!mt.jerk_defined);
  CHECK(mt.long_jerk == 0.0);
  CHECK(mt.lat_jerk == 0.0);

  ClosedLoopTrace empty;
  CHECK_THROWS(compute_metrics(empty, ref));
}

TEST_CASE("batch matches single runs and ignores worker count") {
  ScenarioConfig cfg = fast_config();
  const ClosedLoopTrace trace = run_closed_loop(cfg);
  const MetricsReport single =
      compute_metrics(trace, make_scenario(cfg).reference);

  const BatchReport one = batch_run({cfg}, 1, 1);
  REQUIRE(one.cells.size() == 1);
  CHECK(one.cells[0].episodes == 1);
  CHECK(one.cells[0].mean.episode_time_ratio ==
        doctest::Approx(single.episode_time_ratio).epsilon(1e-12));
  CHECK(one.cells[0].mean.ref_deviation ==
        doctest::Approx(single.ref_deviation).epsilon(1e-12));
  CHECK(one.cells[0].mean.feasibility_pct ==
        doctest::Approx(single.feasibility_pct).epsilon(1e-12));
  CHECK(one.cells[0].collision_rate == 0.0);

  // Two identical configs produce identical cells; the worker count is
  // irrelevant to the numbers.
  const BatchReport two = batch_run({cfg, cfg}, 1, 2);
  REQUIRE(two.cells.size() == 2);
  CHECK(two.cells[0].mean.episode_time_ratio ==
        two.cells[1].mean.episode_time_ratio);
  CHECK(two.cells[0].mean.solve_time_ms > 0.0);
  CHECK(two.cells[0].mean.episode_time_ratio ==
        doctest::Approx(single.episode_time_ratio).epsilon(1e-12));

  const std::string table = batch_to_table_csv(two);
  std::stringstream ss(table);
  std::string line;
  int rows = 0;
  while (std::getline(ss, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 3);  // header + one row per cell

  CHECK_THROWS(batch_run({}, 1, 1));
  CHECK_THROWS(batch_run({cfg}, 0, 1));
}

TEST_CASE("metrics and config json round trips") {
  MetricsReport m;
  m.episode_time_ratio = 1.25;
  m.feasibility_pct = 87.5;
  const std::string with_timing = metrics_to_json(m, true);
  const std::string without = metrics_to_json(m, false);
  CHECK(with_timing.find("solve_time_ms") != std::string::npos);
  CHECK(without.find("solve_time_ms") == std::string::npos);
  CHECK(without.find("1.25") != std::string::npos);

  ScenarioConfig cfg = fast_config();
  cfg.scenario = 2;
  cfg.initial_distance = 17.5;
  cfg.smpc.risk = 0.03;
  cfg.smpc.variant = SmpcVariant::open_loop;
  const std::string text = scenario_config_to_json(cfg);
  const ScenarioConfig back = scenario_config_from_json(text);
  CHECK(back.scenario == 2);
  CHECK(back.initial_distance == 17.5);
  CHECK(back.smpc.risk == 0.03);
  CHECK(back.smpc.variant == SmpcVariant::open_loop);
  CHECK(scenario_config_to_json(back) == text);

  CHECK_THROWS_AS(scenario_config_from_json("{\"bogus\": 1}"),
                  std::invalid_argument);
  const ScenarioConfig defaults = scenario_config_from_json("{}");
  CHECK(defaults.scenario == 1);
  CHECK(defaults.smpc.horizon == 10);
}
