#include "mmpc/sim.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "mmpc/stats.hpp"

namespace mmpc {

namespace {

Eigen::Vector2d pos_of(const EvState& s) { return {s.x_pos, s.y_pos}; }

Eigen::Vector2d dir_of(double heading) {
  return {std::cos(heading), std::sin(heading)};
}

Eigen::Matrix2d world_to_body(double heading) {
  Eigen::Matrix2d r;
  r << std::cos(heading), std::sin(heading), -std::sin(heading),
      std::cos(heading);
  return r;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double point_segment_distance(const Eigen::Vector2d& p,
                              const Eigen::Vector2d& a,
                              const Eigen::Vector2d& b) {
  const Eigen::Vector2d d = b - a;
  const double len2 = d.squaredNorm();
  if (len2 < 1e-16) return (p - a).norm();
  const double u = std::clamp((p - a).dot(d) / len2, 0.0, 1.0);
  return (p - (a + u * d)).norm();
}

double point_to_reference(const Eigen::Vector2d& p,
                          const ReferenceTrajectory& ref) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < ref.states.size(); ++i) {
    best = std::min(best, point_segment_distance(p, pos_of(ref.states[i]),
                                                 pos_of(ref.states[i + 1])));
  }
  return best;
}

}  // namespace

LanePath::LanePath(const Eigen::Vector2d& start, double heading)
    : end_point_(start), end_heading_(heading) {}

LanePath& LanePath::line(double length) {
  if (length <= 0.0) throw std::invalid_argument("LanePath: length <= 0");
  Segment seg;
  seg.is_arc = false;
  seg.start = end_point_;
  seg.heading = end_heading_;
  seg.length = length;
  segs_.push_back(seg);
  end_point_ += length * dir_of(end_heading_);
  total_ += length;
  return *this;
}

LanePath& LanePath::arc(double radius, double sweep) {
  if (radius <= 0.0) throw std::invalid_argument("LanePath: radius <= 0");
  if (sweep == 0.0 || std::abs(sweep) > M_PI) {
    throw std::invalid_argument("LanePath: sweep outside (0, pi]");
  }
  Segment seg;
  seg.is_arc = true;
  seg.start = end_point_;
  seg.heading = end_heading_;
  seg.radius = radius;
  seg.sweep = sweep;
  seg.length = radius * std::abs(sweep);
  const double side = sweep > 0.0 ? 1.0 : -1.0;
  const Eigen::Vector2d left(-std::sin(end_heading_), std::cos(end_heading_));
  seg.center = end_point_ + side * radius * left;
  segs_.push_back(seg);
  const double a0 = std::atan2(seg.start.y() - seg.center.y(),
                               seg.start.x() - seg.center.x());
  end_point_ =
      seg.center + radius * Eigen::Vector2d(std::cos(a0 + sweep),
                                            std::sin(a0 + sweep));
  end_heading_ = wrap_angle(end_heading_ + sweep);
  total_ += seg.length;
  return *this;
}

Eigen::Vector2d LanePath::point_at(double s) const {
  if (segs_.empty()) return end_point_;
  s = std::clamp(s, 0.0, total_);
  for (const Segment& seg : segs_) {
    if (s > seg.length + 1e-12) {
      s -= seg.length;
      continue;
    }
    if (!seg.is_arc) return seg.start + s * dir_of(seg.heading);
    const double a0 = std::atan2(seg.start.y() - seg.center.y(),
                                 seg.start.x() - seg.center.x());
    const double a = a0 + (seg.sweep > 0.0 ? 1.0 : -1.0) * s / seg.radius;
    return seg.center + seg.radius * Eigen::Vector2d(std::cos(a), std::sin(a));
  }
  return end_point_;
}

double LanePath::heading_at(double s) const {
  if (segs_.empty()) return end_heading_;
  s = std::clamp(s, 0.0, total_);
  for (const Segment& seg : segs_) {
    if (s > seg.length + 1e-12) {
      s -= seg.length;
      continue;
    }
    if (!seg.is_arc) return seg.heading;
    return wrap_angle(seg.heading +
                      (seg.sweep > 0.0 ? 1.0 : -1.0) * s / seg.radius);
  }
  return end_heading_;
}

double LanePath::project(const Eigen::Vector2d& p) const {
  double best_d2 = std::numeric_limits<double>::infinity();
  double best_s = 0.0;
  double offset = 0.0;
  for (const Segment& seg : segs_) {
    double u;
    Eigen::Vector2d q;
    if (!seg.is_arc) {
      const Eigen::Vector2d d = dir_of(seg.heading);
      u = std::clamp((p - seg.start).dot(d), 0.0, seg.length);
      q = seg.start + u * d;
    } else {
      const double a0 = std::atan2(seg.start.y() - seg.center.y(),
                                   seg.start.x() - seg.center.x());
      const double rel = wrap_angle(std::atan2(p.y() - seg.center.y(),
                                               p.x() - seg.center.x()) -
                                    a0);
      const double clamped = seg.sweep > 0.0
                                 ? std::clamp(rel, 0.0, seg.sweep)
                                 : std::clamp(rel, seg.sweep, 0.0);
      u = std::abs(clamped) * seg.radius;
      q = seg.center + seg.radius * Eigen::Vector2d(std::cos(a0 + clamped),
                                                    std::sin(a0 + clamped));
    }
    const double d2 = (p - q).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best_s = offset + u;
    }
    offset += seg.length;
  }
  return best_s;
}

void ScenarioConfig::validate() const {
  if (scenario < 1 || scenario > 3) {
    throw std::invalid_argument("ScenarioConfig: scenario must be 1, 2 or 3");
  }
  if (initial_distance <= 0.0 ||
      (scenario == 2 && initial_distance <= 2.0)) {
    throw std::invalid_argument("ScenarioConfig: initial_distance too small");
  }
  if (initial_speed <= 0.0 || initial_speed > smpc.vehicle.speed_max) {
    throw std::invalid_argument("ScenarioConfig: initial_speed out of range");
  }
  if (tv_distance < 0.0) {
    throw std::invalid_argument("ScenarioConfig: tv_distance < 0");
  }
  const int modes = tv_present ? 3 : 1;
  if (true_mode < 0 || true_mode >= modes) {
    throw std::invalid_argument("ScenarioConfig: true_mode out of range");
  }
  if (max_steps < 1) throw std::invalid_argument("ScenarioConfig: max_steps");
  if (dt <= 0.0) throw std::invalid_argument("ScenarioConfig: dt <= 0");
  smpc.validate();
}

ScenarioWorld make_scenario(const ScenarioConfig& cfg) {
  cfg.validate();
  constexpr double kBox = 6.0;   // intersection half-width
  constexpr double kLane = 2.0;  // lane-center offset from the road axis
  constexpr double kExit = 8.0;  // nominal exit run after the turn

  ScenarioWorld world;

  RouteSpec route;
  route.speed = cfg.initial_speed;
  route.start = EvState{kLane, -kBox - cfg.initial_distance, M_PI / 2.0,
                        cfg.initial_speed};
  double turn_len;
  if (cfg.scenario == 2) {
    // Right turn with radius 6 (radius 4 would need more steering authority
    // than the actuation box allows); the arc starts 2 m before the box.
    route.kind = RouteKind::right_turn;
    route.turn_radius = 6.0;
    route.approach_length = cfg.initial_distance - 2.0;
  } else {
    route.kind = RouteKind::left_turn;
    route.turn_radius = 8.0;
    route.approach_length = cfg.initial_distance;
  }
  turn_len = route.turn_radius * M_PI / 2.0;
  // Pad the reference one horizon past the goal so the last cycles before the
  // goal still see a full prediction window.
  const double pad =
      cfg.initial_speed * cfg.smpc.horizon * cfg.dt + 2.0 * cfg.initial_speed;
  route.exit_length = kExit + pad;
  world.reference = build_reference(route, cfg.smpc.vehicle, cfg.dt);

  const double goal_arc = route.approach_length + turn_len + kExit;
  const std::size_t goal_index = std::min(
      world.reference.states.size() - 1,
      static_cast<std::size_t>(
          std::lround(goal_arc / (cfg.initial_speed * cfg.dt))));
  world.goal_point = pos_of(world.reference.states[goal_index]);

  if (!cfg.tv_present) {
    TvMode still;
    still.path = LanePath({60.0, 60.0}, 0.0).line(1.0);
    still.cruise_speed = 0.0;
    still.yields = true;
    world.tv_modes = {still};
    world.mode_priors = Eigen::VectorXd::Ones(1);
    world.tv_start = {60.0, 60.0};
    world.tv_initial_speed = 0.0;
    return world;
  }

  // TV lanes start 10 m behind the TV so projections near the start stay on
  // the path, and run long enough that a full horizon never falls off the end.
  const double lead = 10.0;
  const double south = -M_PI / 2.0;
  auto straight_path = [&](double dist) {
    return LanePath({-kLane, kBox + dist + lead}, south)
        .line(dist + lead + 2.0 * kBox + 40.0);
  };
  auto left_path = [&](double dist) {
    return LanePath({-kLane, kBox + dist + lead}, south)
        .line(dist + lead)
        .arc(8.0, M_PI / 2.0)
        .line(40.0);
  };

  double dist = cfg.tv_distance;
  if (dist <= 0.0) {
    // Auto-spaced start: every non-yielding hypothesis reaches its conflict
    // point a headway after the EV reference has cleared it, mirroring how the
    // scenarios only stay solvable when the crossing order is decided.
    constexpr double kHeadway = 1.2;     // s
    constexpr double kClearance = 4.5;   // m of EV travel past the conflict
    const ObstacleGeometry& geom = cfg.smpc.geometry;
    auto required = [&](const LanePath& probe, double speed) {
      // closest approach between the EV reference and the mode's lane,
      // earliest reference index among near-ties
      double best = std::numeric_limits<double>::infinity();
      std::size_t best_idx = 0;
      double best_s = 0.0;
      for (std::size_t i = 0; i < world.reference.states.size(); ++i) {
        const Eigen::Vector2d p = pos_of(world.reference.states[i]);
        const double s = probe.project(p);
        const double d = (probe.point_at(s) - p).norm();
        if (d < best - 0.1) {
          best = d;
          best_idx = i;
          best_s = s;
        }
      }
      if (best > geom.a_ca() + 2.0) return 0.0;  // lanes never interact
      const double t_clear =
          best_idx * cfg.dt + kClearance / cfg.initial_speed;
      // best_s - lead is the TV's travel from the y = kBox entry line
      return speed * (t_clear + kHeadway) - (best_s - lead);
    };
    dist = std::max({8.0, required(straight_path(0.0), 8.0),
                     required(left_path(0.0), 5.0)});
  }

  TvMode straight;
  straight.path = straight_path(dist);
  straight.cruise_speed = 8.0;

  TvMode left;
  left.path = left_path(dist);
  left.cruise_speed = 5.0;

  TvMode yield = straight;
  yield.yields = true;

  if (cfg.scenario == 1) {
    world.tv_modes = {straight, yield, left};
  } else {
    world.tv_modes = {left, yield, straight};
  }
  world.mode_priors = Eigen::Vector3d(0.5, 0.3, 0.2);
  world.tv_start = {-kLane, kBox + dist};
  world.tv_initial_speed = world.tv_modes[0].cruise_speed;
  return world;
}

GmmPrediction scenario_gmm(const ScenarioWorld& world,
                           const ScenarioConfig& cfg,
                           const Eigen::Vector2d& tv_pos, double tv_speed,
                           std::optional<int> only_mode) {
  const int N = cfg.smpc.horizon;
  constexpr double kTvAccel = 3.0;   // m/s^2 bound on the speed profile
  constexpr double kBaseStd = 0.05;  // m at the anchor
  constexpr double kStdGrowth = 0.1; // m per prediction step

  std::vector<int> picks;
  if (only_mode) {
    if (*only_mode < 0 || *only_mode >= (int)world.tv_modes.size()) {
      throw std::out_of_range("scenario_gmm: only_mode");
    }
    picks = {*only_mode};
  } else {
    for (int j = 0; j < (int)world.tv_modes.size(); ++j) picks.push_back(j);
  }

  GmmPrediction gmm;
  gmm.mode_probs.resize((int)picks.size());
  for (std::size_t i = 0; i < picks.size(); ++i) {
    const TvMode& mode = world.tv_modes[picks[i]];
    gmm.mode_probs(i) = only_mode ? 1.0 : world.mode_priors(picks[i]);
    double s = mode.path.project(tv_pos);
    double v = std::clamp(tv_speed, 0.0, 12.0);
    std::vector<Eigen::Vector2d> means;
    std::vector<Eigen::Matrix2d> covs;
    for (int k = 1; k <= N; ++k) {
      const double target = mode.yields ? 0.0 : mode.cruise_speed;
      v += std::clamp(target - v, -kTvAccel * cfg.dt, kTvAccel * cfg.dt);
      v = std::max(v, 0.0);
      s += v * cfg.dt;
      means.push_back(mode.path.point_at(s));
      const double std_k = kBaseStd + kStdGrowth * k;
      covs.push_back(std_k * std_k * Eigen::Matrix2d::Identity());
    }
    gmm.means.push_back(std::move(means));
    gmm.covs.push_back(std::move(covs));
  }
  gmm.normalize();
  return gmm;
}

ClosedLoopTrace run_closed_loop(const ScenarioConfig& cfg) {
  cfg.validate();
  const ScenarioWorld world = make_scenario(cfg);
  const int N = cfg.smpc.horizon;
  const int world_modes = (int)world.tv_modes.size();
  const Eigen::Matrix4d w_sqrt = sqrt_psd(cfg.smpc.sigma_w);

  ClosedLoopTrace trace;
  trace.goal_point = world.goal_point;
  trace.dt = cfg.dt;

  EvState x = world.reference.states[0];
  Eigen::Vector2d o = world.tv_start;
  Eigen::Vector2d o_prev = o;
  double tv_speed = world.tv_initial_speed;
  std::optional<int> resolved_mode;
  struct Snapshot {
    GmmPrediction gmm;
    std::optional<std::size_t> k_bar;
  };
  std::vector<Snapshot> history;

  using clock = std::chrono::steady_clock;
  // The reference is indexed by the EV's progress along the path, not by wall
  // clock, so the tracking point waits while the EV yields to the TV.
  std::size_t ref_idx = 0;
  for (int t = 0; t < cfg.max_steps; ++t) {
    {
      const std::size_t hi = std::min(world.reference.states.size(),
                                      ref_idx + 2 * (std::size_t)N + 1);
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = ref_idx;
      for (std::size_t i = ref_idx; i < hi; ++i) {
        const double d = (pos_of(world.reference.states[i]) - pos_of(x)).norm();
        if (d < best) {
          best = d;
          arg = i;
        }
      }
      ref_idx = arg;
    }
    if (ref_idx + (std::size_t)N > world.reference.horizon()) break;

    GmmPrediction gmm = scenario_gmm(world, cfg, o, tv_speed, resolved_mode);
    SmpcConfig scfg = cfg.smpc;
    scfg.num_modes = (int)gmm.num_modes();

    const auto t0 = clock::now();
    SmpcProblem prob =
        build_socp(x, o, world.reference, ref_idx, gmm, scfg);
    const auto t1 = clock::now();
    SolverResult res = solve(prob.program, scfg.solver);
    const auto t2 = clock::now();
    SmpcSolution sol =
        extract_control(prob, res, world.reference, ref_idx, scfg);

    TraceStep step;
    step.step = t;
    step.time = t * cfg.dt;
    step.state = x;
    step.input = sol.control;
    step.tv_pos = o;
    step.status = sol.status;
    step.objective = sol.objective;
    step.build_ms =
        std::chrono::duration<double, std::milli>(t1 - t0).count();
    step.solve_ms =
        std::chrono::duration<double, std::milli>(t2 - t1).count();
    step.k_bar = prob.k_bar ? (int)*prob.k_bar : -1;
    if (resolved_mode) {
      step.belief = Eigen::VectorXd::Zero(world_modes);
      step.belief(*resolved_mode) = 1.0;
      step.resolved = true;
    } else {
      step.belief = world.mode_priors;
    }
    {
      const TvMode& truth = world.tv_modes[cfg.true_mode];
      const double hdg = truth.path.heading_at(truth.path.project(o));
      step.g_value =
          g_eval(pos_of(x), o, world_to_body(hdg), scfg.geometry);
    }
    trace.steps.push_back(step);

    // EV plant; the physical speed saturates at the band edges (a full brake
    // near standstill must not turn into reverse motion)
    x = bicycle_step(x, sol.control, scfg.vehicle, cfg.dt);
    if (cfg.ev_noise) {
      std::mt19937_64 rng(mix_seed(cfg.seed, 2 * (std::uint64_t)t));
      std::normal_distribution<double> nd;
      Eigen::Vector4d z(nd(rng), nd(rng), nd(rng), nd(rng));
      Eigen::Vector4d v = x.vec() + w_sqrt * z;
      v(2) = wrap_angle(v(2));
      x = EvState::from_vec(v);
    }
    x.speed = std::clamp(x.speed, scfg.vehicle.speed_min, scfg.vehicle.speed_max);

    // TV plant: one step of the true mode's conditional recursion
    GmmPrediction truth_gmm =
        scenario_gmm(world, cfg, o, tv_speed, cfg.true_mode);
    ConditionalTvDynamics truth_dyn =
        conditional_dynamics(truth_gmm, o, scfg.sigma_n);
    o_prev = o;
    if (cfg.tv_noise) {
      o = sample_tv_trajectory(truth_dyn, 0,
                               mix_seed(cfg.seed, 2 * (std::uint64_t)t + 1))[0];
    } else {
      o = truth_dyn.transition[0][0] * o + truth_dyn.offset[0][0];
    }
    tv_speed = (o - o_prev).norm() / cfg.dt;

    // Mode inference: compare the new observation against the prediction made
    // k_bar steps ago, the step whose ellipsoids first separate.
    if (!resolved_mode && world_modes > 1) {
      history.push_back({std::move(gmm), prob.k_bar});
      for (int s = t; s >= 0 && s > t - N; --s) {
        const Snapshot& snap = history[s];
        if (!snap.k_bar) continue;
        if (s + (int)*snap.k_bar != t + 1) continue;
        ModeBelief belief =
            belief_update(o, snap.gmm, *snap.k_bar, scfg.confidence);
        if (belief.resolved) {
          int best = 0;
          belief.probs.maxCoeff(&best);
          resolved_mode = best;
        }
        break;
      }
    }

    if ((pos_of(x) - world.goal_point).norm() < 1.0) {
      trace.goal_reached = true;
      trace.goal_step = t + 1;
      break;
    }
  }

  trace.final_state = x;
  trace.terminal_error = point_to_reference(pos_of(x), world.reference);
  return trace;
}

MetricsReport compute_metrics(const ClosedLoopTrace& trace,
                              const ReferenceTrajectory& reference) {
  if (trace.steps.empty()) {
    throw std::invalid_argument("compute_metrics: empty trace");
  }
  const std::size_t n = trace.steps.size();
  const double dt = trace.dt;
  MetricsReport rep;

  // reference step at which the goal radius is first entered
  std::size_t ref_goal = reference.states.size() - 1;
  for (std::size_t i = 0; i < reference.states.size(); ++i) {
    if ((pos_of(reference.states[i]) - trace.goal_point).norm() < 1.0) {
      ref_goal = i;
      break;
    }
  }
  const double episode_steps =
      trace.goal_reached ? (double)trace.goal_step : (double)n;
  rep.episode_time_ratio = episode_steps / std::max<std::size_t>(ref_goal, 1);

  // lateral acceleration v * psi_dot along the trace and the reference
  auto lat_accels = [dt](const std::vector<Eigen::Vector3d>& samples) {
    // samples: (psi, v) pairs packed as (psi, v, unused)
    std::vector<double> lat;
    for (std::size_t i = 0; i + 1 < samples.size(); ++i) {
      const double psi_dot =
          wrap_angle(samples[i + 1](0) - samples[i](0)) / dt;
      lat.push_back(samples[i](1) * psi_dot);
    }
    return lat;
  };
  std::vector<Eigen::Vector3d> tr;
  for (const TraceStep& s : trace.steps) {
    tr.push_back({s.state.heading, s.state.speed, 0.0});
  }
  tr.push_back({trace.final_state.heading, trace.final_state.speed, 0.0});
  std::vector<Eigen::Vector3d> rf;
  for (std::size_t i = 0; i <= ref_goal && i < reference.states.size(); ++i) {
    rf.push_back({reference.states[i].heading, reference.states[i].speed, 0.0});
  }
  const std::vector<double> lat_tr = lat_accels(tr);
  const std::vector<double> lat_rf = lat_accels(rf);
  auto peak = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
  };
  const double peak_tr = peak(lat_tr);
  const double peak_rf = peak(lat_rf);
  rep.lat_accel_ratio = (peak_tr < 1e-6 && peak_rf < 1e-6)
                            ? 1.0
                            : peak_tr / std::max(peak_rf, 1e-6);

  // jerks by finite differences
  if (n >= 2 && lat_tr.size() >= 2) {
    double lj = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      lj += std::abs(trace.steps[i + 1].input.accel -
                     trace.steps[i].input.accel);
    }
    rep.long_jerk = lj / ((n - 1) * dt);
    double tj = 0.0;
    for (std::size_t i = 0; i + 1 < lat_tr.size(); ++i) {
      tj += std::abs(lat_tr[i + 1] - lat_tr[i]);
    }
    rep.lat_jerk = tj / ((lat_tr.size() - 1) * dt);
  } else {
    rep.jerk_defined = false;
  }

  double dev = 0.0;
  double dmin = std::numeric_limits<double>::infinity();
  int optimal = 0;
  double solve_ms = 0.0;
  for (const TraceStep& s : trace.steps) {
    dev += point_to_reference(pos_of(s.state), reference);
    dmin = std::min(dmin, (pos_of(s.state) - s.tv_pos).norm());
    if (s.status == SmpcStatus::optimal) ++optimal;
    solve_ms += s.solve_ms;
  }
  rep.ref_deviation = dev / n;
  rep.min_distance = dmin;
  rep.feasibility_pct = 100.0 * optimal / n;
  rep.solve_time_ms = solve_ms / n;
  return rep;
}

BatchReport batch_run(const std::vector<ScenarioConfig>& grid,
                      int repetitions, int workers) {
  if (grid.empty()) throw std::invalid_argument("batch_run: empty grid");
  if (repetitions < 1) throw std::invalid_argument("batch_run: repetitions");
  workers = std::max(1, workers);

  struct Episode {
    MetricsReport metrics;
    bool collided = false;
    long feasible_steps = 0;
    long violation_steps = 0;
  };
  const std::size_t tasks = grid.size() * (std::size_t)repetitions;
  std::vector<Episode> episodes(tasks);
  std::atomic<std::size_t> next{0};
  std::vector<std::string> errors(tasks);

  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks) return;
      const ScenarioConfig& base = grid[i / repetitions];
      ScenarioConfig cfg = base;
      cfg.seed = base.seed + i % repetitions;
      try {
        const ScenarioWorld world = make_scenario(cfg);
        const ClosedLoopTrace trace = run_closed_loop(cfg);
        Episode ep;
        ep.metrics = compute_metrics(trace, world.reference);
        for (const TraceStep& s : trace.steps) {
          const bool hit = s.g_value < 1.0;
          ep.collided = ep.collided || hit;
          if (s.status == SmpcStatus::optimal) {
            ++ep.feasible_steps;
            if (hit) ++ep.violation_steps;
          }
        }
        episodes[i] = ep;
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (std::thread& th : pool) th.join();
  for (const std::string& err : errors) {
    if (!err.empty()) throw std::runtime_error("batch_run: " + err);
  }

  BatchReport report;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    BatchCell cell;
    cell.scenario = grid[g].scenario;
    cell.distance = grid[g].initial_distance;
    cell.speed = grid[g].initial_speed;
    cell.variant = grid[g].smpc.variant;
    cell.episodes = repetitions;
    long feasible = 0;
    long violations = 0;
    int collided = 0;
    MetricsReport& m = cell.mean;
    for (int r = 0; r < repetitions; ++r) {
      const Episode& ep = episodes[g * repetitions + r];
      m.episode_time_ratio += ep.metrics.episode_time_ratio;
      m.lat_accel_ratio += ep.metrics.lat_accel_ratio;
      m.long_jerk += ep.metrics.long_jerk;
      m.lat_jerk += ep.metrics.lat_jerk;
      m.ref_deviation += ep.metrics.ref_deviation;
      m.min_distance += ep.metrics.min_distance;
      m.feasibility_pct += ep.metrics.feasibility_pct;
      m.solve_time_ms += ep.metrics.solve_time_ms;
      m.jerk_defined = m.jerk_defined && ep.metrics.jerk_defined;
      feasible += ep.feasible_steps;
      violations += ep.violation_steps;
      if (ep.collided) ++collided;
    }
    const double inv = 1.0 / repetitions;
    m.episode_time_ratio *= inv;
    m.lat_accel_ratio *= inv;
    m.long_jerk *= inv;
    m.lat_jerk *= inv;
    m.ref_deviation *= inv;
    m.min_distance *= inv;
    m.feasibility_pct *= inv;
    m.solve_time_ms *= inv;
    cell.collision_rate = (double)collided / repetitions;
    cell.chance_violation_rate =
        feasible > 0 ? (double)violations / (double)feasible : 0.0;
    report.cells.push_back(cell);
  }
  return report;
}

const char* to_string(SmpcStatus status) {
  switch (status) {
    case SmpcStatus::optimal: return "optimal";
    case SmpcStatus::infeasible: return "infeasible";
    case SmpcStatus::fallback: return "fallback";
  }
  return "unknown";
}

void save_trace_csv(const ClosedLoopTrace& trace, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_trace_csv: cannot open " + path);
  out << "step,time,x,y,psi,v,a,delta,tv_x,tv_y,status,objective,k_bar,"
         "resolved,belief,g\n";
  char buf[512];
  for (const TraceStep& s : trace.steps) {
    std::string belief;
    for (int j = 0; j < s.belief.size(); ++j) {
      if (j) belief += '|';
      std::snprintf(buf, sizeof(buf), "%.6g", s.belief(j));
      belief += buf;
    }
    std::snprintf(buf, sizeof(buf),
                  "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%s,%.9g,"
                  "%d,%d,%s,%.9g\n",
                  s.step, s.time, s.state.x_pos, s.state.y_pos,
                  s.state.heading, s.state.speed, s.input.accel, s.input.steer,
                  s.tv_pos.x(), s.tv_pos.y(), to_string(s.status), s.objective,
                  s.k_bar, s.resolved ? 1 : 0, belief.c_str(), s.g_value);
    out << buf;
  }
  std::snprintf(buf, sizeof(buf),
                "# final,%.9g,%.9g,%.9g,%.9g goal_reached=%d goal_step=%d "
                "terminal_error=%.9g\n",
                trace.final_state.x_pos, trace.final_state.y_pos,
                trace.final_state.heading, trace.final_state.speed,
                trace.goal_reached ? 1 : 0, trace.goal_step,
                trace.terminal_error);
  out << buf;
}

namespace {

nlohmann::json metrics_json(const MetricsReport& m, bool include_timing) {
  nlohmann::json j{{"episode_time_ratio", m.episode_time_ratio},
                   {"lat_accel_ratio", m.lat_accel_ratio},
                   {"long_jerk", m.long_jerk},
                   {"lat_jerk", m.lat_jerk},
                   {"ref_deviation", m.ref_deviation},
                   {"min_distance", m.min_distance},
                   {"feasibility_pct", m.feasibility_pct},
                   {"jerk_defined", m.jerk_defined}};
  if (include_timing) j["solve_time_ms"] = m.solve_time_ms;
  return j;
}

}  // namespace

std::string metrics_to_json(const MetricsReport& report, bool include_timing) {
  return metrics_json(report, include_timing).dump(2) + "\n";
}

std::string batch_to_json(const BatchReport& report, bool include_timing) {
  nlohmann::json cells = nlohmann::json::array();
  for (const BatchCell& c : report.cells) {
    nlohmann::json j{
        {"scenario", c.scenario},
        {"distance", c.distance},
        {"speed", c.speed},
        {"variant", c.variant == SmpcVariant::policy ? "policy" : "open_loop"},
        {"episodes", c.episodes},
        {"collision_rate", c.collision_rate},
        {"chance_violation_rate", c.chance_violation_rate},
        {"metrics", metrics_json(c.mean, include_timing)}};
    cells.push_back(std::move(j));
  }
  return nlohmann::json{{"cells", cells}}.dump(2) + "\n";
}

std::string batch_to_table_csv(const BatchReport& report) {
  std::string out =
      "scenario,distance,speed,variant,episodes,time_ratio,lat_accel_ratio,"
      "long_jerk,lat_jerk,ref_deviation,min_distance,feasibility_pct,"
      "solve_time_ms,collision_rate,chance_violation_rate\n";
  char buf[512];
  for (const BatchCell& c : report.cells) {
    std::snprintf(
        buf, sizeof(buf),
        "%d,%.9g,%.9g,%s,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,"
        "%.9g\n",
        c.scenario, c.distance, c.speed,
        c.variant == SmpcVariant::policy ? "policy" : "open_loop", c.episodes,
        c.mean.episode_time_ratio, c.mean.lat_accel_ratio, c.mean.long_jerk,
        c.mean.lat_jerk, c.mean.ref_deviation, c.mean.min_distance,
        c.mean.feasibility_pct, c.mean.solve_time_ms, c.collision_rate,
        c.chance_violation_rate);
    out += buf;
  }
  return out;
}

std::string scenario_config_to_json(const ScenarioConfig& cfg) {
  nlohmann::json smpc{
      {"horizon", cfg.smpc.horizon},
      {"risk", cfg.smpc.risk},
      {"confidence", cfg.smpc.confidence},
      {"variant",
       cfg.smpc.variant == SmpcVariant::policy ? "policy" : "open_loop"},
      {"allocation", cfg.smpc.allocation == RiskAllocation::per_row
                         ? "per_row"
                         : "union_bound"}};
  nlohmann::json j{{"scenario", cfg.scenario},
                   {"initial_distance", cfg.initial_distance},
                   {"initial_speed", cfg.initial_speed},
                   {"tv_distance", cfg.tv_distance},
                   {"true_mode", cfg.true_mode},
                   {"max_steps", cfg.max_steps},
                   {"seed", cfg.seed},
                   {"dt", cfg.dt},
                   {"tv_present", cfg.tv_present},
                   {"ev_noise", cfg.ev_noise},
                   {"tv_noise", cfg.tv_noise},
                   {"smpc", smpc}};
  return j.dump(2) + "\n";
}

ScenarioConfig scenario_config_from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  ScenarioConfig cfg;
  auto get = [](const nlohmann::json& doc, const char* key, auto& field) {
    if (doc.contains(key)) doc.at(key).get_to(field);
  };
  for (const auto& [key, value] : j.items()) {
    static const std::set<std::string> known{
        "scenario",  "initial_distance", "initial_speed", "tv_distance",
        "true_mode", "max_steps",        "seed",          "dt",
        "tv_present", "ev_noise",        "tv_noise",      "smpc"};
    if (!known.count(key))
      throw std::invalid_argument("unknown config key: " + key);
  }
  get(j, "scenario", cfg.scenario);
  get(j, "initial_distance", cfg.initial_distance);
  get(j, "initial_speed", cfg.initial_speed);
  get(j, "tv_distance", cfg.tv_distance);
  get(j, "true_mode", cfg.true_mode);
  get(j, "max_steps", cfg.max_steps);
  get(j, "seed", cfg.seed);
  get(j, "dt", cfg.dt);
  get(j, "tv_present", cfg.tv_present);
  get(j, "ev_noise", cfg.ev_noise);
  get(j, "tv_noise", cfg.tv_noise);
  if (j.contains("smpc")) {
    const nlohmann::json& s = j.at("smpc");
    for (const auto& [key, value] : s.items()) {
      static const std::set<std::string> known{"horizon", "risk", "confidence",
                                               "variant", "allocation"};
      if (!known.count(key))
        throw std::invalid_argument("unknown smpc config key: " + key);
    }
    get(s, "horizon", cfg.smpc.horizon);
    get(s, "risk", cfg.smpc.risk);
    get(s, "confidence", cfg.smpc.confidence);
    if (s.contains("variant")) {
      const std::string v = s.at("variant").get<std::string>();
      if (v == "policy") {
        cfg.smpc.variant = SmpcVariant::policy;
      } else if (v == "open_loop") {
        cfg.smpc.variant = SmpcVariant::open_loop;
      } else {
        throw std::invalid_argument("unknown variant: " + v);
      }
    }
    if (s.contains("allocation")) {
      const std::string a = s.at("allocation").get<std::string>();
      if (a == "per_row") {
        cfg.smpc.allocation = RiskAllocation::per_row;
      } else if (a == "union_bound") {
        cfg.smpc.allocation = RiskAllocation::union_bound;
      } else {
        throw std::invalid_argument("unknown allocation: " + a);
      }
    }
  }
  return cfg;
}

}  // namespace mmpc
