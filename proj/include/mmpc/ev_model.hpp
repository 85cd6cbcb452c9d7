#ifndef MMPC_EV_MODEL_HPP
#define MMPC_EV_MODEL_HPP

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace mmpc {

/// Ego vehicle state: position (m), heading (rad, wrapped to (-pi, pi]),
/// speed (m/s).
struct EvState {
  double x_pos = 0.0;
  double y_pos = 0.0;
  double heading = 0.0;
  double speed = 0.0;

  Eigen::Vector4d vec() const { return {x_pos, y_pos, heading, speed}; }
  static EvState from_vec(const Eigen::Vector4d& v) {
    return {v(0), v(1), v(2), v(3)};
  }
};

/// Ego vehicle input: longitudinal acceleration (m/s^2) and front steering
/// angle (rad).
struct EvInput {
  double accel = 0.0;
  double steer = 0.0;

  Eigen::Vector2d vec() const { return {accel, steer}; }
};

struct VehicleParams {
  double wheelbase_front = 1.5;  // l_f, m
  double wheelbase_rear = 1.5;   // l_r, m
  double accel_min = -8.0;
  double accel_max = 4.0;
  double steer_min = -0.5;
  double steer_max = 0.5;
  double speed_min = 0.0;
  double speed_max = 14.0;

  void validate() const;
};

/// Kinematically consistent reference: states.size() == inputs.size() + 1 and
/// consecutive states satisfy the discrete bicycle dynamics.
struct ReferenceTrajectory {
  std::vector<EvState> states;
  std::vector<EvInput> inputs;
  double dt = 0.2;

  std::size_t horizon() const { return inputs.size(); }
};

/// Linear time-varying prediction model along a reference window.
struct LtvModel {
  std::vector<Eigen::Matrix4d> A_seq;
  std::vector<Eigen::Matrix<double, 4, 2>> B_seq;
  Eigen::Matrix4d noise_cov = Eigen::Matrix4d::Zero();

  std::size_t horizon() const { return A_seq.size(); }
};

/// Polytope { x : F x <= f }.
struct PolytopeConstraint {
  Eigen::MatrixXd F;
  Eigen::VectorXd f;
};

/// Per-step deviation constraints: state rows act on dx_{k+1}, input rows on
/// du_k.
struct EvConstraintSets {
  std::vector<PolytopeConstraint> state;  // size = horizon
  std::vector<PolytopeConstraint> input;  // size = horizon
};

enum class RouteKind { straight, left_turn, right_turn };

struct RouteSpec {
  RouteKind kind = RouteKind::straight;
  double approach_length = 10.0;  // straight segment before the turn, m
  double exit_length = 5.0;       // straight segment after the turn, m
  double turn_radius = 8.0;       // m, used by the turn routes
  double speed = 8.0;             // m/s, constant profile
  EvState start{};                // initial pose and speed source
};

/// One Euler step of the kinematic bicycle. Slip angle
/// beta = atan(l_r tan(delta) / (l_f + l_r)); the returned heading is wrapped
/// to (-pi, pi].
EvState bicycle_step(const EvState& state, const EvInput& input,
                     const VehicleParams& params, double dt);

/// Analytic Jacobians of bicycle_step at the reference point.
/// Throws std::domain_error when |steer| >= pi/2.
std::pair<Eigen::Matrix4d, Eigen::Matrix<double, 4, 2>> linearize(
    const EvState& ref_state, const EvInput& ref_input,
    const VehicleParams& params, double dt);

/// Per-step Jacobians along reference[start_index .. start_index+horizon).
LtvModel ltv_sequence(const ReferenceTrajectory& reference,
                      const VehicleParams& params, std::size_t start_index,
                      std::size_t horizon, const Eigen::Matrix4d& noise_cov);

/// Forward-integrates a scripted input profile for the requested route.
/// Throws std::invalid_argument when the turn radius demands a steering angle
/// outside the actuation box.
ReferenceTrajectory build_reference(const RouteSpec& route,
                                    const VehicleParams& params, double dt);

/// Box constraints on the speed band and the actuation limits, shifted into
/// deviation coordinates relative to the reference window starting at
/// start_index.
EvConstraintSets ev_constraint_sets(const VehicleParams& params,
                                    const ReferenceTrajectory& reference,
                                    std::size_t start_index,
                                    std::size_t horizon);

/// CSV with columns t,x,y,psi,v,a,delta (last row carries empty inputs).
void save_reference_csv(const ReferenceTrajectory& ref,
                        const std::string& path);
ReferenceTrajectory load_reference_csv(const std::string& path);

}  // namespace mmpc

#endif
