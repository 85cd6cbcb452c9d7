#ifndef MMPC_SIM_HPP
#define MMPC_SIM_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mmpc/smpc.hpp"

namespace mmpc {

/// Piecewise line/arc center line with arc-length parametrization.
class LanePath {
 public:
  LanePath() = default;
  LanePath(const Eigen::Vector2d& start, double heading);

  LanePath& line(double length);
  /// sweep > 0 turns left, sweep < 0 turns right.
  LanePath& arc(double radius, double sweep);

  double length() const { return total_; }
  Eigen::Vector2d point_at(double s) const;  // s clamped to [0, length]
  double heading_at(double s) const;
  /// Arc length of the point on the path closest to p.
  double project(const Eigen::Vector2d& p) const;

 private:
  struct Segment {
    bool is_arc = false;
    Eigen::Vector2d start = Eigen::Vector2d::Zero();
    double heading = 0.0;
    double length = 0.0;
    Eigen::Vector2d center = Eigen::Vector2d::Zero();  // arcs only
    double radius = 0.0;
    double sweep = 0.0;
  };

  Eigen::Vector2d end_point_ = Eigen::Vector2d::Zero();
  double end_heading_ = 0.0;
  double total_ = 0.0;
  std::vector<Segment> segs_;
};

/// One hypothesis about what the TV will do: which lane it follows and how
/// fast. A yielding mode brakes to a stop instead of tracking cruise_speed.
struct TvMode {
  LanePath path;
  double cruise_speed = 8.0;
  bool yields = false;
};

struct ScenarioWorld {
  ReferenceTrajectory reference;  // padded past the goal by one horizon
  Eigen::Vector2d goal_point = Eigen::Vector2d::Zero();
  std::vector<TvMode> tv_modes;
  Eigen::VectorXd mode_priors;
  Eigen::Vector2d tv_start = Eigen::Vector2d::Zero();
  double tv_initial_speed = 0.0;
};

/// Intersection geometry: square box of half-width 6 m, lane centers offset
/// 2 m from the road axis (right-hand traffic). The EV approaches northbound
/// on x = +2, the TV southbound on x = -2.
///   scenario 1: EV turns left, TV modes {straight, yield, left turn}
///   scenario 2: EV turns right, TV modes {left turn, yield, straight};
///               the TV's left turn ends in the EV's exit lane
///   scenario 3: EV turns left, TV modes {left turn, yield, straight};
///               the TV's left turn crosses the EV's path inside the box
struct ScenarioConfig {
  int scenario = 1;
  double initial_distance = 10.0;  // EV start to the intersection box, m
  double initial_speed = 8.0;      // m/s
  double tv_distance = 0.0;        // TV start to the intersection box, m;
                                   // 0 picks a spacing that lets the EV
                                   // clear each conflict point first
  int true_mode = 0;               // index into the scenario's mode set
  int max_steps = 200;
  std::uint64_t seed = 1;
  double dt = 0.2;
  bool tv_present = true;
  bool ev_noise = true;
  bool tv_noise = true;
  SmpcConfig smpc{};

  void validate() const;
};

struct TraceStep {
  int step = 0;
  double time = 0.0;
  EvState state{};   // state the controller saw
  EvInput input{};   // input applied over [time, time + dt)
  Eigen::Vector2d tv_pos = Eigen::Vector2d::Zero();
  SmpcStatus status = SmpcStatus::fallback;
  double objective = 0.0;
  double build_ms = 0.0;  // wall clock; excluded from the CSV
  double solve_ms = 0.0;  // wall clock; excluded from the CSV
  int k_bar = -1;         // -1 when the modes never separate in the window
  Eigen::VectorXd belief;
  bool resolved = false;
  double g_value = 0.0;  // collision function at (state, tv_pos)
};

struct ClosedLoopTrace {
  std::vector<TraceStep> steps;
  EvState final_state{};
  Eigen::Vector2d goal_point = Eigen::Vector2d::Zero();
  bool goal_reached = false;
  int goal_step = -1;          // steps taken when the goal radius was entered
  double terminal_error = 0.0; // final position vs the same-time reference
  double dt = 0.2;
};

struct MetricsReport {
  double episode_time_ratio = 0.0;  // steps to goal vs reference steps to goal
  double lat_accel_ratio = 0.0;     // peak v * psi_dot vs the reference peak
  double long_jerk = 0.0;           // mean |da/dt|
  double lat_jerk = 0.0;            // mean |d(lat accel)/dt|
  double ref_deviation = 0.0;       // mean closest-point distance to reference
  double min_distance = 0.0;        // min EV-TV center distance
  double feasibility_pct = 0.0;     // 100 * optimal steps / total steps
  double solve_time_ms = 0.0;
  bool jerk_defined = true;  // false for traces too short to difference
};

struct BatchCell {
  int scenario = 0;
  double distance = 0.0;
  double speed = 0.0;
  SmpcVariant variant = SmpcVariant::policy;
  int episodes = 0;
  MetricsReport mean;
  double collision_rate = 0.0;        // episodes with any g < 1 step
  double chance_violation_rate = 0.0; // g < 1 frequency over feasible steps
};

struct BatchReport {
  std::vector<BatchCell> cells;
};

ScenarioWorld make_scenario(const ScenarioConfig& cfg);

/// Synthetic predictor: anchors every mode at the current TV position
/// (projected onto the mode's lane), rolls the mode speed profile forward,
/// and grows the position std linearly (0.05 + 0.1 k meters at step k).
/// only_mode restricts the output to a single mode with probability one.
GmmPrediction scenario_gmm(const ScenarioWorld& world,
                           const ScenarioConfig& cfg,
                           const Eigen::Vector2d& tv_pos, double tv_speed,
                           std::optional<int> only_mode = std::nullopt);

ClosedLoopTrace run_closed_loop(const ScenarioConfig& cfg);

MetricsReport compute_metrics(const ClosedLoopTrace& trace,
                              const ReferenceTrajectory& reference);

/// Runs every grid entry repetitions times (seeds cfg.seed + rep) across a
/// worker pool and averages the per-episode metrics cell by cell. Results do
/// not depend on the worker count.
BatchReport batch_run(const std::vector<ScenarioConfig>& grid,
                      int repetitions, int workers);

const char* to_string(SmpcStatus status);

/// CSV, one row per step; wall-clock columns are deliberately omitted so the
/// file is byte-reproducible for a fixed seed.
void save_trace_csv(const ClosedLoopTrace& trace, const std::string& path);

/// include_timing = false leaves the wall-clock field out, keeping the
/// document deterministic.
std::string metrics_to_json(const MetricsReport& report, bool include_timing);
std::string batch_to_json(const BatchReport& report, bool include_timing);
/// Table with one row per cell and one column per metric.
std::string batch_to_table_csv(const BatchReport& report);

/// Scenario + SMPC scalar settings as JSON. The weight and covariance
/// matrices keep their defaults and are not serialized.
std::string scenario_config_to_json(const ScenarioConfig& cfg);
/// Parses the document produced by scenario_config_to_json; missing keys keep
/// their defaults, unknown keys throw std::invalid_argument.
ScenarioConfig scenario_config_from_json(const std::string& text);

}  // namespace mmpc

#endif
