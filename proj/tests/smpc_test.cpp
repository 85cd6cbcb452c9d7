#include <random>

#include "doctest.h"
#include "mmpc/smpc.hpp"

using namespace mmpc;

namespace {

LtvModel random_ltv(std::mt19937_64& rng, int horizon,
                    const Eigen::Matrix4d& noise_cov) {
  std::normal_distribution<double> nd;
  LtvModel ltv;
  ltv.noise_cov = noise_cov;
  for (int k = 0; k < horizon; ++k) {
    Eigen::Matrix4d A = Eigen::Matrix4d::Identity();
    Eigen::Matrix<double, 4, 2> B;
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 4; ++j) A(i, j) += 0.1 * nd(rng);
      for (int j = 0; j < 2; ++j) B(i, j) = 0.3 * nd(rng);
    }
    ltv.A_seq.push_back(A);
    ltv.B_seq.push_back(B);
  }
  return ltv;
}

struct ConflictSetup {
  ReferenceTrajectory reference;
  EvState x0;
  Eigen::Vector2d o_t;
  GmmPrediction gmm;
  SmpcConfig config;
};

// Straight 40 m reference with a crossing three-mode TV prediction; the
// instance is feasible for both variants and keeps at least one collision
// row active at the optimum.
ConflictSetup conflict_setup() {
  ConflictSetup s;
  RouteSpec route;
  route.kind = RouteKind::straight;
  route.approach_length = 30.0;
  route.exit_length = 10.0;
  route.speed = 8.0;
  route.start = EvState{0.0, 0.0, 0.0, 8.0};
  s.reference = build_reference(route, s.config.vehicle, 0.2);

  s.x0 = s.reference.states[0];
  s.x0.speed += 0.3;
  s.x0.y_pos += 0.1;
  s.o_t = Eigen::Vector2d(14.0, -8.0);

  s.config.horizon = 10;
  s.config.num_modes = 3;

  const std::vector<Eigen::Vector2d> dirs = {
      {0.0, 1.0}, {0.0, 1.0}, {1.0, 1.0}};
  const std::vector<double> speeds = {1.0, 8.0, 5.0};
  s.gmm.mode_probs = Eigen::Vector3d(0.5, 0.3, 0.2);
  for (int j = 0; j < 3; ++j) {
    std::vector<Eigen::Vector2d> mu;
    std::vector<Eigen::Matrix2d> cov;
    for (int k = 1; k <= s.config.horizon; ++k) {
      mu.push_back(s.o_t + dirs[j].normalized() * speeds[j] * 0.2 * k);
      const double sd = 0.05 + 0.12 * k;
      cov.push_back(sd * sd * Eigen::Matrix2d::Identity());
    }
    s.gmm.means.push_back(mu);
    s.gmm.covs.push_back(cov);
  }
  return s;
}

}  // namespace

TEST_CASE("stack_ev_matrices single step") {
  std::mt19937_64 rng(3);
  SmpcConfig cfg;
  cfg.horizon = 1;
  const LtvModel ltv = random_ltv(rng, 1, cfg.sigma_w);
  const StackedEvMatrices ev = stack_ev_matrices(ltv, cfg);
  REQUIRE(ev.A_stack.rows() == 8);
  CHECK((ev.A_stack.topRows<4>() - Eigen::Matrix4d::Identity()).norm() <
        1e-14);
  CHECK((ev.A_stack.bottomRows<4>() - ltv.A_seq[0]).norm() < 1e-14);
  CHECK(ev.B_stack.topRows<4>().norm() == 0.0);
  CHECK((ev.B_stack.bottomRows<4>() - ltv.B_seq[0]).norm() < 1e-14);
  CHECK(ev.E_stack.topRows<4>().norm() == 0.0);
  CHECK((ev.E_stack.bottomRows<4>() - Eigen::Matrix4d::Identity()).norm() <
        1e-14);
}

TEST_CASE("stack_ev_matrices reproduces the recursion") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  SmpcConfig cfg;
  cfg.horizon = 6;
  const LtvModel ltv = random_ltv(rng, 6, cfg.sigma_w);
  const StackedEvMatrices ev = stack_ev_matrices(ltv, cfg);

  Eigen::Vector4d dx0;
  Eigen::VectorXd du(12), w(24);
  for (int i = 0; i < 4; ++i) dx0(i) = nd(rng);
  for (int i = 0; i < 12; ++i) du(i) = nd(rng);
  for (int i = 0; i < 24; ++i) w(i) = nd(rng);

  const Eigen::VectorXd stacked =
      ev.A_stack * dx0 + ev.B_stack * du + ev.E_stack * w;
  Eigen::Vector4d dx = dx0;
  CHECK((stacked.segment<4>(0) - dx).norm() < 1e-12);
  for (int k = 0; k < 6; ++k) {
    dx = ltv.A_seq[k] * dx + ltv.B_seq[k] * du.segment<2>(2 * k) +
         w.segment<4>(4 * k);
    CHECK((stacked.segment<4>(StackedEvMatrices::x_row(k + 1)) - dx).norm() <
          1e-11);
  }

  // Weight and noise stacks are block diagonal with the config matrices.
  for (int k = 0; k <= 6; ++k)
    CHECK((ev.Q_stack.block<4, 4>(4 * k, 4 * k) - cfg.state_weight).norm() ==
          0.0);
  for (int k = 0; k < 6; ++k) {
    CHECK((ev.R_stack.block<2, 2>(2 * k, 2 * k) - cfg.input_weight).norm() ==
          0.0);
    CHECK((ev.sigma_w_stack.block<4, 4>(4 * k, 4 * k) - cfg.sigma_w).norm() ==
          0.0);
  }
  CHECK(ev.Q_stack.sum() == ev.Q_stack.diagonal().sum());
}

TEST_CASE("stack_tv_matrices reproduces the recursion") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd;
  GmmPrediction gmm;
  gmm.mode_probs = Eigen::Vector2d(0.5, 0.5);
  for (int j = 0; j < 2; ++j) {
    std::vector<Eigen::Vector2d> mu;
    std::vector<Eigen::Matrix2d> cov;
    for (int k = 1; k <= 5; ++k) {
      mu.push_back({1.0 * k + 0.3 * j, 0.5 * k});
      cov.push_back((0.5 + 0.1 * k) * Eigen::Matrix2d::Identity());
    }
    gmm.means.push_back(mu);
    gmm.covs.push_back(cov);
  }
  const Eigen::Vector2d o_t(0.4, -0.2);
  const auto dyn =
      conditional_dynamics(gmm, o_t, 1e-3 * Eigen::Matrix2d::Identity());
  const auto tv = stack_tv_matrices(dyn);
  REQUIRE(tv.size() == 2);
  for (int j = 0; j < 2; ++j) {
    REQUIRE(tv[j].T_stack.rows() == 12);
    Eigen::VectorXd n(10);
    for (int i = 0; i < 10; ++i) n(i) = nd(rng);
    const Eigen::VectorXd stacked =
        tv[j].T_stack * o_t + tv[j].C_stack + tv[j].L_stack * n;
    Eigen::Vector2d o = o_t;
    CHECK((stacked.segment<2>(0) - o).norm() < 1e-12);
    for (int k = 0; k < 5; ++k) {
      o = dyn.transition[j][k] * o + dyn.offset[j][k] + n.segment<2>(2 * k);
      CHECK((stacked.segment<2>(2 * (k + 1)) - o).norm() < 1e-11);
    }
    // Noise-free stack lands on the prediction means.
    const Eigen::VectorXd mean_stack = tv[j].T_stack * o_t + tv[j].C_stack;
    for (int k = 1; k <= 5; ++k)
      CHECK((mean_stack.segment<2>(2 * k) - gmm.means[j][k - 1]).norm() <
            1e-9);
    for (int k = 0; k < 5; ++k)
      CHECK((tv[j].sigma_n_stack.block<2, 2>(2 * k, 2 * k) -
             dyn.step_cov[j][k])
                .norm() < 1e-12);
  }
}

TEST_CASE("policy layout counts and round trip") {
  PolicyLayout lay;
  lay.variant = SmpcVariant::policy;
  lay.horizon = 3;
  lay.num_modes = 2;
  lay.k_bar_eff = 2;

  // Block sizes: k=0 holds h only (2), k>=1 holds h|M_{0..k-1}|K
  // (2 + 8k + 4). Shared prefix k < 2, mode-specific k = 2.
  const int shared = 2 + (2 + 8 + 4);
  const int per_mode = 2 + 16 + 4;
  CHECK(lay.num_vars() == 1 + 2 + shared + 2 * per_mode);
  CHECK(static_cast<int>(lay.var_names().size()) == lay.num_vars());
  CHECK(static_cast<int>(lay.var_groups().size()) == lay.num_vars());

  // Shared-prefix indices coincide across modes.
  CHECK(lay.h_index(0, 1) == lay.h_index(1, 1));
  CHECK(lay.m_index(0, 0, 1) == lay.m_index(1, 0, 1));
  CHECK(lay.h_index(0, 2) != lay.h_index(1, 2));

  Eigen::VectorXd z(lay.num_vars());
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd;
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = nd(rng);

  const PolicyParameters params = extract_parameters(lay, z);
  REQUIRE(params.h.size() == 2);
  for (int j = 0; j < 2; ++j) {
    REQUIRE(params.h[j].size() == 6);
    REQUIRE(params.M[j].rows() == 6);
    REQUIRE(params.M[j].cols() == 12);
    REQUIRE(params.K[j].rows() == 6);
    for (int k = 0; k < 3; ++k)
      for (int i = 0; i < 2; ++i)
        CHECK(params.h[j](2 * k + i) == z(lay.h_index(j, k) + i));
    for (int k = 1; k < 3; ++k)
      for (int l = 0; l < k; ++l)
        for (int r = 0; r < 2; ++r)
          for (int c = 0; c < 4; ++c)
            CHECK(params.M[j](2 * k + r, 4 * l + c) ==
                  z(lay.m_index(j, l, k) + 4 * r + c));
    for (int k = 1; k < 3; ++k)
      for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c)
          CHECK(params.K[j](2 * k + r, 2 * k + c) ==
                z(lay.k_index(j, k) + 2 * r + c));
    // K_0 is identically zero and M is strictly block lower.
    CHECK(params.K[j].block<2, 2>(0, 0).norm() == 0.0);
    for (int k = 0; k < 3; ++k)
      for (int l = k; l < 3; ++l)
        CHECK(params.M[j].block<2, 4>(2 * k, 4 * l).norm() == 0.0);
  }

  PolicyLayout ol;
  ol.variant = SmpcVariant::open_loop;
  ol.horizon = 10;
  ol.num_modes = 3;
  ol.k_bar_eff = 4;
  CHECK(ol.num_vars() == 21);
}

TEST_CASE("cost_terms structure") {
  std::mt19937_64 rng(13);
  SmpcConfig cfg;
  cfg.horizon = 4;
  cfg.num_modes = 1;
  const LtvModel ltv = random_ltv(rng, 4, cfg.sigma_w);
  const StackedEvMatrices ev = stack_ev_matrices(ltv, cfg);

  Eigen::Vector4d dx0(0.2, -0.1, 0.05, 0.3);
  const CostTerms ct = cost_terms(ev, dx0, cfg);
  const CostTerms again = cost_terms(ev, dx0, cfg);
  CHECK(ct.r_t == again.r_t);  // bit-identical rebuild

  // P = B'QB + R, and the stored factor reproduces it.
  const Eigen::MatrixXd p_ref =
      ev.B_stack.transpose() * ev.Q_stack * ev.B_stack + ev.R_stack;
  CHECK((ct.P - p_ref).norm() < 1e-10 * p_ref.norm());
  CHECK((ct.chol_lt.transpose() * ct.chol_lt - ct.P).norm() <
        1e-10 * ct.P.norm());
  CHECK((ct.a_lin - ev.B_stack.transpose() * ev.Q_stack * ev.A_stack * dx0)
            .norm() < 1e-10);
  CHECK(cost_terms(ev, Eigen::Vector4d::Zero(), cfg).a_lin.norm() == 0.0);
}

TEST_CASE("cost value is quadratic in the parameters") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> nd;
  SmpcConfig cfg;
  cfg.horizon = 4;
  cfg.num_modes = 1;
  const LtvModel ltv = random_ltv(rng, 4, cfg.sigma_w);
  const StackedEvMatrices ev = stack_ev_matrices(ltv, cfg);
  const CostTerms ct = cost_terms(ev, Eigen::Vector4d::Zero(), cfg);

  GmmPrediction gmm;
  gmm.mode_probs = Eigen::VectorXd::Ones(1);
  gmm.means.resize(1);
  gmm.covs.resize(1);
  for (int k = 1; k <= 4; ++k) {
    gmm.means[0].push_back({1.0 * k, 0.0});
    gmm.covs[0].push_back(Eigen::Matrix2d::Identity());
  }
  const auto dyn = conditional_dynamics(gmm, {0.0, 0.0}, cfg.sigma_n);
  const auto tv = stack_tv_matrices(dyn);
  std::vector<Eigen::VectorXd> q(1, Eigen::VectorXd::Zero(8));
  Eigen::Vector2d o = dyn.initial_pos;
  for (int k = 0; k < 4; ++k) {
    q[0].segment<2>(2 * k) = o;
    o = dyn.transition[0][k] * o + dyn.offset[0][k];
  }

  PolicyParameters zero;
  zero.h.assign(1, Eigen::VectorXd::Zero(8));
  zero.M.assign(1, Eigen::MatrixXd::Zero(8, 16));
  zero.K.assign(1, Eigen::MatrixXd::Zero(8, 8));
  PolicyParameters one = zero;
  for (int i = 0; i < 8; ++i) one.h[0](i) = nd(rng);
  PolicyParameters two = zero;
  two.h[0] = 2.0 * one.h[0];

  const Eigen::VectorXd probs = gmm.mode_probs;
  const double v0 =
      ct.value(zero, q, probs, ev, tv, SmpcVariant::policy);
  const double v1 = ct.value(one, q, probs, ev, tv, SmpcVariant::policy);
  const double v2 = ct.value(two, q, probs, ev, tv, SmpcVariant::policy);
  // With dx0 = 0 the linear term vanishes, leaving pure quadratic growth.
  CHECK(v2 - v0 == doctest::Approx(4.0 * (v1 - v0)).epsilon(1e-9));
  CHECK(v1 > v0);
}

TEST_CASE("build_socp conflict instance solves cleanly") {
  const ConflictSetup s = conflict_setup();
  SmpcConfig cfg = s.config;

  const SmpcProblem prob =
      build_socp(s.x0, s.o_t, s.reference, 0, s.gmm, cfg);
  CHECK_NOTHROW(prob.program.validate());
  CHECK(prob.k_bar == compute_k_bar(s.gmm, cfg.confidence));

  const SolverResult res = solve(prob.program, cfg.solver);
  REQUIRE(res.status == SolverStatus::optimal);
  const Residuals rr = residuals(prob.program, res);
  CHECK(rr.primal < 1e-5);
  CHECK(rr.dual < 1e-5);
  CHECK(rr.gap < 1e-5);

  const SmpcSolution sol = extract_control(prob, res, s.reference, 0, cfg);
  CHECK(sol.status == SmpcStatus::optimal);
  // The applied control is the reference input shifted by h_0.
  CHECK(sol.control.accel ==
        doctest::Approx(s.reference.inputs[0].accel + sol.params.h[0](0))
            .epsilon(1e-9));
  CHECK(sol.control.steer ==
        doctest::Approx(s.reference.inputs[0].steer + sol.params.h[0](1))
            .epsilon(1e-9));

  // The open-loop variant can only do worse.
  cfg.variant = SmpcVariant::open_loop;
  const SmpcProblem ol = build_socp(s.x0, s.o_t, s.reference, 0, s.gmm, cfg);
  const SolverResult ol_res = solve(ol.program, cfg.solver);
  REQUIRE(ol_res.status == SolverStatus::optimal);
  const SmpcSolution ol_sol = extract_control(ol, ol_res, s.reference, 0, cfg);
  CHECK(sol.objective <= ol_sol.objective + 1e-6);
}

TEST_CASE("build_socp with the obstacle out of reach tracks the reference") {
  ConflictSetup s = conflict_setup();
  s.x0 = s.reference.states[0];  // dx0 = 0
  s.o_t = Eigen::Vector2d(1e4, 1e4);
  for (auto& mode : s.gmm.means)
    for (auto& mu : mode) mu += Eigen::Vector2d(1e4, 1e4) - Eigen::Vector2d(14.0, -8.0);

  const SmpcProblem prob =
      build_socp(s.x0, s.o_t, s.reference, 0, s.gmm, s.config);
  const SolverResult res = solve(prob.program, s.config.solver);
  REQUIRE(res.status == SolverStatus::optimal);
  const SmpcSolution sol =
      extract_control(prob, res, s.reference, 0, s.config);
  CHECK(std::abs(sol.control.accel - s.reference.inputs[0].accel) < 1e-3);
  CHECK(std::abs(sol.control.steer - s.reference.inputs[0].steer) < 1e-3);
}

TEST_CASE("fallback_brake") {
  VehicleParams vp;
  const EvInput moving = fallback_brake({0, 0, 0, 10.0}, vp);
  CHECK(moving.accel == vp.accel_min);
  CHECK(moving.steer == 0.0);
  const EvInput stopped = fallback_brake({0, 0, 0, 0.0}, vp);
  CHECK(stopped.accel == 0.0);
  CHECK(stopped.steer == 0.0);
  const EvInput slow = fallback_brake({0, 0, 0, 0.5}, vp);
  CHECK(slow.accel == vp.accel_min);
}

TEST_CASE("smpc config validation") {
  SmpcConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.risk = 0.0;
  CHECK_THROWS(cfg.validate());
  cfg = SmpcConfig{};
  cfg.horizon = 0;
  CHECK_THROWS(cfg.validate());
  cfg = SmpcConfig{};
  cfg.num_modes = 0;
  CHECK_THROWS(cfg.validate());
}
