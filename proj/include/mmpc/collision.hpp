#ifndef MMPC_COLLISION_HPP
#define MMPC_COLLISION_HPP

#include <Eigen/Dense>
#include <vector>

#include "mmpc/tv_model.hpp"

namespace mmpc {

/// Elliptical TV footprint inflated by the EV disc radius.
struct ObstacleGeometry {
  double tv_semi_major = 2.5;  // a_TV, m
  double tv_semi_minor = 1.1;  // b_TV, m
  double ev_radius = 1.3;      // d_EV, m

  double a_ca() const { return tv_semi_major + ev_radius; }
  double b_ca() const { return tv_semi_minor + ev_radius; }
  void validate() const;
};

/// World-to-body rotations per mode and step.
struct RotationSchedule {
  std::vector<std::vector<Eigen::Matrix2d>> rotations;  // J x N
  bool degenerate = false;  // set when a mode had zero displacement throughout
};

/// Affine under-approximation of the collision function around the
/// linearization point: g^L(P, o) = grad_p (P - p_ca) + grad_o (o - mu), with
/// the threshold stored so that g^L >= 0 is grad_p . P + grad_o . o >= rhs.
struct AffineCaConstraint {
  Eigen::RowVector2d grad_p;
  Eigen::RowVector2d grad_o;
  double rhs = 0.0;
  Eigen::Vector2d p_ca;
};

/// g(p, o) = || diag(1/a_ca, 1/b_ca) R (p - o) ||^2. Values >= 1 mean the EV
/// disc clears the inflated TV ellipse.
double g_eval(const Eigen::Vector2d& p, const Eigen::Vector2d& o,
              const Eigen::Matrix2d& rot, const ObstacleGeometry& geom);

/// Projection of p_ref onto the g = 1 level set around mu. A degenerate
/// p_ref == mu is nudged 1e-6 m along hint_dir (or +x) first.
Eigen::Vector2d ca_linearization_point(const Eigen::Vector2d& p_ref,
                                       const Eigen::Vector2d& mu,
                                       const Eigen::Matrix2d& rot,
                                       const ObstacleGeometry& geom,
                                       const Eigen::Vector2d& hint_dir =
                                           Eigen::Vector2d::UnitX());

/// Gradients of g at (p_ca, mu) and the affine threshold.
AffineCaConstraint g_affine_coeffs(const Eigen::Vector2d& p_ca,
                                   const Eigen::Vector2d& mu,
                                   const Eigen::Matrix2d& rot,
                                   const ObstacleGeometry& geom);

/// Headings from the prediction-mean displacements; the rotation maps world
/// coordinates into the TV body frame.
RotationSchedule infer_rotations(const GmmPrediction& gmm);

}  // namespace mmpc

#endif
