#include "mmpc/collision.hpp"

#include <cmath>
#include <stdexcept>

namespace mmpc {

void ObstacleGeometry::validate() const {
  if (tv_semi_major <= 0.0 || tv_semi_minor <= 0.0 || ev_radius <= 0.0) {
    throw std::invalid_argument("ObstacleGeometry: all lengths must be > 0");
  }
}

double g_eval(const Eigen::Vector2d& p, const Eigen::Vector2d& o,
              const Eigen::Matrix2d& rot, const ObstacleGeometry& geom) {
  const Eigen::Vector2d d = rot * (p - o);
  const double ax = d.x() / geom.a_ca();
  const double ay = d.y() / geom.b_ca();
  return ax * ax + ay * ay;
}

Eigen::Vector2d ca_linearization_point(const Eigen::Vector2d& p_ref,
                                       const Eigen::Vector2d& mu,
                                       const Eigen::Matrix2d& rot,
                                       const ObstacleGeometry& geom,
                                       const Eigen::Vector2d& hint_dir) {
  Eigen::Vector2d p = p_ref;
  if ((p - mu).norm() < 1e-12) {
    Eigen::Vector2d dir = hint_dir;
    if (dir.norm() < 1e-12) dir = Eigen::Vector2d::UnitX();
    p = mu + 1e-6 * dir.normalized();
  }
  const double g = g_eval(p, mu, rot, geom);
  return mu + (p - mu) / std::sqrt(g);
}

AffineCaConstraint g_affine_coeffs(const Eigen::Vector2d& p_ca,
                                   const Eigen::Vector2d& mu,
                                   const Eigen::Matrix2d& rot,
                                   const ObstacleGeometry& geom) {
  if ((p_ca - mu).norm() < 1e-12) {
    throw std::invalid_argument("g_affine_coeffs: degenerate point");
  }
  Eigen::Matrix2d d2 = Eigen::Matrix2d::Zero();
  d2(0, 0) = 1.0 / (geom.a_ca() * geom.a_ca());
  d2(1, 1) = 1.0 / (geom.b_ca() * geom.b_ca());
  AffineCaConstraint c;
  c.grad_p = 2.0 * (p_ca - mu).transpose() * rot.transpose() * d2 * rot;
  c.grad_o = -c.grad_p;
  c.p_ca = p_ca;
  c.rhs = c.grad_p.dot(p_ca) + c.grad_o.dot(mu);
  return c;
}

RotationSchedule infer_rotations(const GmmPrediction& gmm) {
  gmm.validate();
  const std::size_t J = gmm.num_modes();
  const std::size_t N = gmm.horizon();
  RotationSchedule sched;
  sched.rotations.assign(J, std::vector<Eigen::Matrix2d>(N));
  for (std::size_t j = 0; j < J; ++j) {
    double heading = 0.0;
    bool any_motion = false;
    for (std::size_t k = 0; k < N; ++k) {
      Eigen::Vector2d disp;
      if (k + 1 < N) {
        disp = gmm.means[j][k + 1] - gmm.means[j][k];
      } else {
        disp = Eigen::Vector2d::Zero();  // last step reuses previous heading
      }
      if (disp.norm() > 1e-9) {
        heading = std::atan2(disp.y(), disp.x());
        any_motion = true;
      }
      const double ch = std::cos(heading);
      const double sh = std::sin(heading);
      Eigen::Matrix2d r;
      r << ch, sh, -sh, ch;  // world -> body
      sched.rotations[j][k] = r;
    }
    if (!any_motion) sched.degenerate = true;
  }
  return sched;
}

}  // namespace mmpc
