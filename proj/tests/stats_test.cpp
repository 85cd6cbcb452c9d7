#include <random>

#include "doctest.h"
#include "mmpc/stats.hpp"

using namespace mmpc;

TEST_CASE("norm_cdf reference values") {
  CHECK(norm_cdf(0.0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(norm_cdf(1.959963984540054) == doctest::Approx(0.975).epsilon(1e-10));
  CHECK(norm_cdf(-1.2815515655446004) ==
        doctest::Approx(0.10).epsilon(1e-10));
  CHECK(norm_cdf(8.0) > 1.0 - 1e-14);
  CHECK(norm_cdf(-8.0) < 1e-14);
}

TEST_CASE("norm_inv inverts norm_cdf") {
  CHECK(norm_inv(0.5) == doctest::Approx(0.0).epsilon(1e-10));
  CHECK(norm_inv(0.975) == doctest::Approx(1.959963984540054).epsilon(1e-9));
  for (double x = -5.0; x <= 5.0; x += 0.25) {
    CHECK(norm_inv(norm_cdf(x)) == doctest::Approx(x).epsilon(1e-8));
  }
  CHECK_THROWS_AS(norm_inv(0.0), std::invalid_argument);
  CHECK_THROWS_AS(norm_inv(1.0), std::invalid_argument);
  CHECK_THROWS_AS(norm_inv(-0.3), std::invalid_argument);
}

TEST_CASE("sqrt_psd_2x2 squares back") {
  const Eigen::Matrix2d d = Eigen::Vector2d(4.0, 9.0).asDiagonal();
  const Eigen::Matrix2d r = sqrt_psd_2x2(d);
  CHECK(r(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(r(1, 1) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(std::abs(r(0, 1)) < 1e-12);

  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd;
  for (int i = 0; i < 50; ++i) {
    Eigen::Matrix2d m;
    m << nd(rng), nd(rng), nd(rng), nd(rng);
    const Eigen::Matrix2d spd =
        m * m.transpose() + 0.01 * Eigen::Matrix2d::Identity();
    const Eigen::Matrix2d s = sqrt_psd_2x2(spd);
    CHECK((s * s - spd).norm() < 1e-10);
    CHECK((s - s.transpose()).norm() < 1e-12);
  }
}

TEST_CASE("sqrt_psd_2x2 rejects bad input") {
  Eigen::Matrix2d asym;
  asym << 1.0, 0.5, -0.5, 1.0;
  CHECK_THROWS_AS(sqrt_psd_2x2(asym), std::invalid_argument);
  Eigen::Matrix2d indef;
  indef << 1.0, 0.0, 0.0, -1.0;
  CHECK_THROWS_AS(sqrt_psd_2x2(indef), std::invalid_argument);
}

TEST_CASE("sqrt_psd general size") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd;
  Eigen::MatrixXd m(5, 5);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) m(i, j) = nd(rng);
  const Eigen::MatrixXd spd =
      m * m.transpose() + 0.1 * Eigen::MatrixXd::Identity(5, 5);
  const Eigen::MatrixXd s = sqrt_psd(spd);
  CHECK((s * s - spd).norm() < 1e-9);
  CHECK(sqrt_psd(Eigen::MatrixXd::Zero(3, 3)).norm() < 1e-12);
}

TEST_CASE("wrap_angle lands in (-pi, pi]") {
  const double pi = 3.14159265358979323846;
  CHECK(wrap_angle(0.0) == 0.0);
  CHECK(wrap_angle(pi) == doctest::Approx(pi).epsilon(1e-12));
  CHECK(wrap_angle(-pi) == doctest::Approx(pi).epsilon(1e-12));
  CHECK(wrap_angle(2 * pi) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(wrap_angle(7 * pi + 0.1) == doctest::Approx(pi + 0.1 - 2 * pi));
  for (double a = -20.0; a <= 20.0; a += 0.37) {
    const double w = wrap_angle(a);
    CHECK(w > -pi - 1e-12);
    CHECK(w <= pi + 1e-12);
    CHECK(std::abs(std::sin(w - a)) < 1e-9);
  }
}
