#include <random>

#include "doctest.h"
#include "mmpc/collision.hpp"

using namespace mmpc;

namespace {

Eigen::Matrix2d rot2(double a) {
  Eigen::Matrix2d r;
  r << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
  return r;
}

// a_ca = b_ca = 1: the inflated footprint is the unit circle.
ObstacleGeometry unit_geom() {
  ObstacleGeometry g;
  g.tv_semi_major = 0.6;
  g.tv_semi_minor = 0.6;
  g.ev_radius = 0.4;
  return g;
}

ObstacleGeometry random_geom(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  ObstacleGeometry g;
  g.tv_semi_major = 1.0 + 2.0 * ud(rng);
  g.tv_semi_minor = 0.5 + (g.tv_semi_major - 0.5) * ud(rng);
  g.ev_radius = 0.5 + 1.5 * ud(rng);
  return g;
}

}  // namespace

TEST_CASE("g_eval closed form") {
  const ObstacleGeometry geom;  // defaults: a_ca = 3.8, b_ca = 2.4
  const Eigen::Vector2d o(1.0, -2.0);
  const Eigen::Matrix2d r = rot2(0.7);
  CHECK(g_eval(o, o, r, geom) == 0.0);
  // A point one semi-axis ahead along the body x direction sits on g = 1.
  const Eigen::Vector2d on_boundary =
      o + r.transpose() * Eigen::Vector2d(geom.a_ca(), 0.0);
  CHECK(g_eval(on_boundary, o, r, geom) == doctest::Approx(1.0).epsilon(1e-12));
  const Eigen::Vector2d minor =
      o + r.transpose() * Eigen::Vector2d(0.0, geom.b_ca());
  CHECK(g_eval(minor, o, r, geom) == doctest::Approx(1.0).epsilon(1e-12));

  // Direct formula on random points.
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  for (int i = 0; i < 100; ++i) {
    const Eigen::Vector2d p(5 * nd(rng), 5 * nd(rng));
    const Eigen::Vector2d q(5 * nd(rng), 5 * nd(rng));
    const Eigen::Vector2d body = r * (p - q);
    const double expect = body(0) * body(0) / (geom.a_ca() * geom.a_ca()) +
                          body(1) * body(1) / (geom.b_ca() * geom.b_ca());
    CHECK(g_eval(p, q, r, geom) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("g_eval rotation invariance") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  const ObstacleGeometry geom;
  for (int i = 0; i < 100; ++i) {
    const Eigen::Vector2d p(4 * nd(rng), 4 * nd(rng));
    const Eigen::Vector2d o(4 * nd(rng), 4 * nd(rng));
    const Eigen::Matrix2d r = rot2(6.0 * nd(rng));
    CHECK(g_eval(p, o, r, geom) ==
          doctest::Approx(g_eval(r * (p - o), Eigen::Vector2d::Zero(),
                                 Eigen::Matrix2d::Identity(), geom))
              .epsilon(1e-12));
  }
}

TEST_CASE("ca_linearization_point projects onto the level set") {
  const ObstacleGeometry geom = unit_geom();
  const Eigen::Matrix2d eye = Eigen::Matrix2d::Identity();
  const Eigen::Vector2d mu(0.0, 0.0);

  const Eigen::Vector2d p = ca_linearization_point({2.0, 0.0}, mu, eye, geom);
  CHECK((p - Eigen::Vector2d(1.0, 0.0)).norm() < 1e-9);

  // A point already on the boundary is a fixed point.
  const Eigen::Vector2d b(std::cos(0.8), std::sin(0.8));
  CHECK((ca_linearization_point(b, mu, eye, geom) - b).norm() < 1e-9);

  // Interior points project outward onto the boundary too.
  const Eigen::Vector2d inner =
      ca_linearization_point({0.2, 0.1}, mu, eye, geom);
  CHECK(g_eval(inner, mu, eye, geom) == doctest::Approx(1.0).epsilon(1e-9));

  // The degenerate p_ref == mu case is nudged along the hint.
  const Eigen::Vector2d nudged = ca_linearization_point(
      mu, mu, eye, geom, Eigen::Vector2d(0.0, 1.0));
  CHECK(g_eval(nudged, mu, eye, geom) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(std::abs(nudged(1)) > std::abs(nudged(0)));

  // Random geometry and pose: the result always lands on g = 1.
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd;
  for (int i = 0; i < 200; ++i) {
    const ObstacleGeometry g = random_geom(rng);
    const Eigen::Matrix2d r = rot2(3.0 * nd(rng));
    const Eigen::Vector2d m(5 * nd(rng), 5 * nd(rng));
    const Eigen::Vector2d ref = m + Eigen::Vector2d(6 * nd(rng), 6 * nd(rng));
    const Eigen::Vector2d pc = ca_linearization_point(ref, m, r, g);
    CHECK(g_eval(pc, m, r, g) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("g_affine_coeffs hand case") {
  const ObstacleGeometry geom = unit_geom();
  const AffineCaConstraint c =
      g_affine_coeffs({1.0, 0.0}, {0.0, 0.0}, Eigen::Matrix2d::Identity(),
                      geom);
  CHECK(c.grad_p(0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(std::abs(c.grad_p(1)) < 1e-12);
  CHECK(c.grad_o(0) == doctest::Approx(-2.0).epsilon(1e-12));
  CHECK(c.rhs == doctest::Approx(2.0).epsilon(1e-12));
  // Tangency: the linearization point itself sits exactly on g^L = 0.
  CHECK(c.grad_p.dot(c.p_ca) + c.grad_o.dot(Eigen::Vector2d(0.0, 0.0)) ==
        doctest::Approx(c.rhs).epsilon(1e-12));
}

TEST_CASE("g_affine_coeffs invariants") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd;
  for (int i = 0; i < 200; ++i) {
    const ObstacleGeometry geom = random_geom(rng);
    const Eigen::Matrix2d r = rot2(3.0 * nd(rng));
    const Eigen::Vector2d mu(4 * nd(rng), 4 * nd(rng));
    const Eigen::Vector2d ref = mu + Eigen::Vector2d(6 * nd(rng), 6 * nd(rng));
    const Eigen::Vector2d pc = ca_linearization_point(ref, mu, r, geom);
    const AffineCaConstraint c = g_affine_coeffs(pc, mu, r, geom);

    // grad_o is the exact negative of grad_p.
    CHECK((c.grad_o + c.grad_p).norm() == 0.0);

    // Global under-approximation: 1 + g^L <= g everywhere.
    for (int s = 0; s < 20; ++s) {
      const Eigen::Vector2d p(8 * nd(rng), 8 * nd(rng));
      const Eigen::Vector2d o(8 * nd(rng), 8 * nd(rng));
      const double gl = c.grad_p.dot(p) + c.grad_o.dot(o) - c.rhs;
      CHECK(1.0 + gl <= g_eval(p, o, r, geom) + 1e-9);
    }
  }
}

TEST_CASE("infer_rotations") {
  // Means marching along +x give identity rotations.
  GmmPrediction straight;
  straight.mode_probs = Eigen::VectorXd::Ones(1);
  straight.means.resize(1);
  straight.covs.resize(1);
  for (int k = 1; k <= 5; ++k) {
    straight.means[0].push_back({1.0 * k, 2.0});
    straight.covs[0].push_back(Eigen::Matrix2d::Identity());
  }
  const RotationSchedule rs = infer_rotations(straight);
  CHECK(!rs.degenerate);
  REQUIRE(rs.rotations.size() == 1);
  REQUIRE(rs.rotations[0].size() == 5);
  for (const auto& r : rs.rotations[0])
    CHECK((r - Eigen::Matrix2d::Identity()).norm() < 1e-9);

  // Means marching along +y: world +y maps to body +x.
  GmmPrediction up = straight;
  for (int k = 0; k < 5; ++k) up.means[0][k] = {2.0, 1.0 * (k + 1)};
  const RotationSchedule ru = infer_rotations(up);
  for (const auto& r : ru.rotations[0])
    CHECK((r * Eigen::Vector2d(0.0, 1.0) - Eigen::Vector2d(1.0, 0.0)).norm() <
          1e-9);

  // Quarter circle: body x tracks the tangent direction.
  GmmPrediction arc = straight;
  arc.means[0].clear();
  arc.covs[0].clear();
  const int n = 60;
  for (int k = 1; k <= n; ++k) {
    const double ang = 0.5 * M_PI * k / n;
    arc.means[0].push_back({10.0 * std::sin(ang), 10.0 * (1 - std::cos(ang))});
    arc.covs[0].push_back(Eigen::Matrix2d::Identity());
  }
  const RotationSchedule ra = infer_rotations(arc);
  for (int k = 0; k < n; ++k) {
    const double ang = 0.5 * M_PI * (k + 1) / n;
    const Eigen::Vector2d tangent(std::cos(ang), std::sin(ang));
    const Eigen::Vector2d body_x =
        ra.rotations[0][k].transpose() * Eigen::Vector2d(1.0, 0.0);
    CHECK(std::abs(std::atan2(body_x(1), body_x(0)) -
                   std::atan2(tangent(1), tangent(0))) < 0.03);
  }

  // Zero displacement throughout flags the schedule degenerate.
  GmmPrediction frozen = straight;
  for (int k = 0; k < 5; ++k) frozen.means[0][k] = {3.0, 3.0};
  const RotationSchedule rf = infer_rotations(frozen);
  CHECK(rf.degenerate);
  for (const auto& r : rf.rotations[0])
    CHECK((r - Eigen::Matrix2d::Identity()).norm() < 1e-12);
}

TEST_CASE("obstacle geometry validation") {
  ObstacleGeometry bad;
  bad.tv_semi_major = 0.0;
  CHECK_THROWS(bad.validate());
  ObstacleGeometry neg;
  neg.ev_radius = -1.0;
  CHECK_THROWS(neg.validate());
  CHECK_NOTHROW(ObstacleGeometry{}.validate());
}
