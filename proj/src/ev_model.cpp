#include "mmpc/ev_model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "mmpc/stats.hpp"

namespace mmpc {

void VehicleParams::validate() const {
  if (wheelbase_front <= 0.0 || wheelbase_rear <= 0.0) {
    throw std::invalid_argument("VehicleParams: wheelbases must be positive");
  }
  if (accel_min >= accel_max || steer_min >= steer_max ||
      speed_min >= speed_max) {
    throw std::invalid_argument("VehicleParams: empty actuation box");
  }
}

namespace {

double slip_angle(double steer, const VehicleParams& p) {
  return std::atan(p.wheelbase_rear * std::tan(steer) /
                   (p.wheelbase_front + p.wheelbase_rear));
}

}  // namespace

EvState bicycle_step(const EvState& state, const EvInput& input,
                     const VehicleParams& params, double dt) {
  if (dt <= 0.0) throw std::invalid_argument("bicycle_step: dt must be > 0");
  if (!state.vec().allFinite() || !input.vec().allFinite()) {
    throw std::invalid_argument("bicycle_step: non-finite state or input");
  }
  const double beta = slip_angle(input.steer, params);
  EvState next;
  next.x_pos = state.x_pos + dt * state.speed * std::cos(state.heading + beta);
  next.y_pos = state.y_pos + dt * state.speed * std::sin(state.heading + beta);
  next.heading = wrap_angle(state.heading +
                            dt * state.speed / params.wheelbase_rear *
                                std::sin(beta));
  next.speed = state.speed + dt * input.accel;
  return next;
}

std::pair<Eigen::Matrix4d, Eigen::Matrix<double, 4, 2>> linearize(
    const EvState& ref_state, const EvInput& ref_input,
    const VehicleParams& params, double dt) {
  if (dt <= 0.0) throw std::invalid_argument("linearize: dt must be > 0");
  if (std::abs(ref_input.steer) >= M_PI / 2.0) {
    throw std::domain_error("linearize: |steer| >= pi/2 is singular");
  }
  const double lr = params.wheelbase_rear;
  const double L = params.wheelbase_front + params.wheelbase_rear;
  const double delta = ref_input.steer;
  const double beta = slip_angle(delta, params);
  const double v = ref_state.speed;
  const double c = std::cos(ref_state.heading + beta);
  const double s = std::sin(ref_state.heading + beta);
  // d beta / d delta
  const double t = std::tan(delta);
  const double sec2 = 1.0 + t * t;
  const double dbeta = (lr * sec2 / L) / (1.0 + (lr * t / L) * (lr * t / L));

  Eigen::Matrix4d A = Eigen::Matrix4d::Identity();
  A(0, 2) = -dt * v * s;
  A(0, 3) = dt * c;
  A(1, 2) = dt * v * c;
  A(1, 3) = dt * s;
  A(2, 3) = dt * std::sin(beta) / lr;

  Eigen::Matrix<double, 4, 2> B = Eigen::Matrix<double, 4, 2>::Zero();
  B(0, 1) = -dt * v * s * dbeta;
  B(1, 1) = dt * v * c * dbeta;
  B(2, 1) = dt * v / lr * std::cos(beta) * dbeta;
  B(3, 0) = dt;
  return {A, B};
}

LtvModel ltv_sequence(const ReferenceTrajectory& reference,
                      const VehicleParams& params, std::size_t start_index,
                      std::size_t horizon, const Eigen::Matrix4d& noise_cov) {
  if (start_index + horizon > reference.inputs.size()) {
    throw std::out_of_range("ltv_sequence: window exceeds reference");
  }
  LtvModel model;
  model.noise_cov = noise_cov;
  model.A_seq.reserve(horizon);
  model.B_seq.reserve(horizon);
  for (std::size_t k = 0; k < horizon; ++k) {
    auto [A, B] = linearize(reference.states[start_index + k],
                            reference.inputs[start_index + k], params,
                            reference.dt);
    model.A_seq.push_back(A);
    model.B_seq.push_back(B);
  }
  return model;
}

ReferenceTrajectory build_reference(const RouteSpec& route,
                                    const VehicleParams& params, double dt) {
  params.validate();
  if (dt <= 0.0) throw std::invalid_argument("build_reference: dt must be > 0");
  const double v = route.speed;
  if (v < params.speed_min || v > params.speed_max) {
    throw std::invalid_argument("build_reference: speed outside speed band");
  }

  double turn_steer = 0.0;
  std::size_t n_arc = 0;
  if (route.kind != RouteKind::straight) {
    const double lr = params.wheelbase_rear;
    const double L = params.wheelbase_front + params.wheelbase_rear;
    if (route.turn_radius <= lr) {
      throw std::invalid_argument("build_reference: infeasible turn radius");
    }
    const double yaw_rate = v / lr * std::sin(std::asin(lr / route.turn_radius));
    const double turn_time = (M_PI / 2.0) / yaw_rate;  // quarter turn
    n_arc = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(turn_time / dt)));
    // Re-fit the steering so the quantized arc sweeps exactly pi/2.
    const double step_yaw = (M_PI / 2.0) / static_cast<double>(n_arc);
    const double sin_beta = step_yaw * lr / (v * dt);
    if (sin_beta >= 1.0) {
      throw std::invalid_argument("build_reference: infeasible turn radius");
    }
    const double beta = std::asin(sin_beta);
    double steer = std::atan(L * std::tan(beta) / lr);
    if (route.kind == RouteKind::right_turn) steer = -steer;
    if (steer < params.steer_min || steer > params.steer_max) {
      throw std::invalid_argument(
          "build_reference: turn radius demands steering outside bounds");
    }
    turn_steer = steer;
  }

  ReferenceTrajectory ref;
  ref.dt = dt;
  ref.states.push_back(route.start);
  auto segment_steps = [dt](double duration) {
    return static_cast<std::size_t>(std::llround(duration / dt));
  };
  const std::size_t n_pre = segment_steps(route.approach_length / v);
  const std::size_t n_post = segment_steps(route.exit_length / v);

  auto push_steps = [&](std::size_t n, double steer) {
    for (std::size_t i = 0; i < n; ++i) {
      EvInput u{0.0, steer};
      ref.inputs.push_back(u);
      ref.states.push_back(bicycle_step(ref.states.back(), u, params, dt));
    }
  };
  push_steps(n_pre, 0.0);
  push_steps(n_arc, turn_steer);
  push_steps(n_post, 0.0);
  return ref;
}

EvConstraintSets ev_constraint_sets(const VehicleParams& params,
                                    const ReferenceTrajectory& reference,
                                    std::size_t start_index,
                                    std::size_t horizon) {
  if (horizon < 1) throw std::invalid_argument("ev_constraint_sets: horizon");
  if (start_index + horizon > reference.inputs.size()) {
    throw std::out_of_range("ev_constraint_sets: window exceeds reference");
  }
  EvConstraintSets sets;
  for (std::size_t k = 0; k < horizon; ++k) {
    const EvState& xr = reference.states[start_index + k + 1];
    const EvInput& ur = reference.inputs[start_index + k];
    if (ur.accel < params.accel_min || ur.accel > params.accel_max ||
        ur.steer < params.steer_min || ur.steer > params.steer_max) {
      throw std::invalid_argument(
          "ev_constraint_sets: reference input outside actuation box");
    }
    PolytopeConstraint st;
    st.F.resize(2, 4);
    st.F << 0, 0, 0, 1, 0, 0, 0, -1;
    st.f.resize(2);
    st.f << params.speed_max - xr.speed, xr.speed - params.speed_min;
    sets.state.push_back(std::move(st));

    PolytopeConstraint in;
    in.F.resize(4, 2);
    in.F << 1, 0, -1, 0, 0, 1, 0, -1;
    in.f.resize(4);
    in.f << params.accel_max - ur.accel, ur.accel - params.accel_min,
        params.steer_max - ur.steer, ur.steer - params.steer_min;
    sets.input.push_back(std::move(in));
  }
  return sets;
}

void save_reference_csv(const ReferenceTrajectory& ref,
                        const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << "t,x,y,psi,v,a,delta\n";
  out.precision(17);
  for (std::size_t i = 0; i < ref.states.size(); ++i) {
    const EvState& s = ref.states[i];
    out << i * ref.dt << ',' << s.x_pos << ',' << s.y_pos << ',' << s.heading
        << ',' << s.speed;
    if (i < ref.inputs.size()) {
      out << ',' << ref.inputs[i].accel << ',' << ref.inputs[i].steer;
    } else {
      out << ",,";
    }
    out << '\n';
  }
}

ReferenceTrajectory load_reference_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  std::getline(in, line);  // header
  ReferenceTrajectory ref;
  double prev_t = 0.0;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    std::vector<std::string> cols;
    while (std::getline(ss, tok, ',')) cols.push_back(tok);
    while (cols.size() < 7) cols.push_back("");
    EvState s{std::stod(cols[1]), std::stod(cols[2]), std::stod(cols[3]),
              std::stod(cols[4])};
    double t = std::stod(cols[0]);
    if (!first) ref.dt = t - prev_t;
    prev_t = t;
    first = false;
    ref.states.push_back(s);
    if (!cols[5].empty()) {
      ref.inputs.push_back({std::stod(cols[5]), std::stod(cols[6])});
    }
  }
  return ref;
}

}  // namespace mmpc
