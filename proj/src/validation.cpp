#include "mmpc/validation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <limits>
#include <random>
#include <vector>

#include "mmpc/collision.hpp"
#include "mmpc/smpc.hpp"
#include "mmpc/socp.hpp"
#include "mmpc/stats.hpp"
#include "mmpc/tv_model.hpp"

namespace mmpc {

namespace {

std::string format(const char* fmt, ...) {
  char buf[256];
  va_list args;
  va_start(args, fmt);
  std::vsnprintf(buf, sizeof(buf), fmt, args);
  va_end(args);
  return buf;
}

Eigen::Matrix2d random_spd(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> ud(0.0, 2.0 * M_PI);
  std::uniform_real_distribution<double> ue(lo, hi);
  const double a = ud(rng);
  Eigen::Matrix2d r;
  r << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
  Eigen::Vector2d eig(ue(rng), ue(rng));
  return r * eig.asDiagonal() * r.transpose();
}

Eigen::Matrix2d rotation(double a) {
  Eigen::Matrix2d r;
  r << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
  return r;
}

/// Single-mode GMM with random SPD covariances and a random-walk mean chain.
GmmPrediction random_chain(std::mt19937_64& rng, int horizon) {
  std::normal_distribution<double> nd;
  GmmPrediction gmm;
  gmm.mode_probs = Eigen::VectorXd::Ones(1);
  std::vector<Eigen::Vector2d> means;
  std::vector<Eigen::Matrix2d> covs;
  Eigen::Vector2d mu(nd(rng), nd(rng));
  for (int k = 1; k <= horizon; ++k) {
    mu += Eigen::Vector2d(1.0 + 0.3 * nd(rng), 0.3 * nd(rng));
    means.push_back(mu);
    covs.push_back(random_spd(rng, 0.3, 1.5) * (1.0 + 0.2 * k));
  }
  gmm.means.push_back(means);
  gmm.covs.push_back(covs);
  return gmm;
}

}  // namespace

SuiteResult validate_ca_implication(std::uint64_t seed, int samples) {
  SuiteResult result{"ca-implication"};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  int violations = 0;
  int implied = 0;
  double worst_g = std::numeric_limits<double>::infinity();
  for (int i = 0; i < samples; ++i) {
    ObstacleGeometry geom;
    geom.tv_semi_major = 1.0 + 2.0 * ud(rng);
    geom.tv_semi_minor = 0.5 + (geom.tv_semi_major - 0.5) * ud(rng);
    geom.ev_radius = 0.5 + 1.5 * ud(rng);
    const Eigen::Matrix2d rot = rotation(2.0 * M_PI * ud(rng));
    const Eigen::Vector2d mu(4.0 * nd(rng), 4.0 * nd(rng));
    const Eigen::Vector2d p_ref =
        mu + 8.0 * Eigen::Vector2d(nd(rng), nd(rng));
    const Eigen::Vector2d p_ca =
        ca_linearization_point(p_ref, mu, rot, geom);
    const AffineCaConstraint aff = g_affine_coeffs(p_ca, mu, rot, geom);
    const Eigen::Vector2d p = p_ref + 4.0 * Eigen::Vector2d(nd(rng), nd(rng));
    const Eigen::Vector2d o = mu + 2.0 * Eigen::Vector2d(nd(rng), nd(rng));
    const double lin = aff.grad_p.dot(p) + aff.grad_o.dot(o) - aff.rhs;
    if (lin < 0.0) continue;
    ++implied;
    const double g = g_eval(p, o, rot, geom);
    worst_g = std::min(worst_g, g);
    if (g < 1.0 - 1e-9) ++violations;
  }
  result.pass = violations == 0 && implied > samples / 20;
  result.detail = format("%d/%d nonneg samples, %d violations, min g %.6f",
                         implied, samples, violations, worst_g);
  return result;
}

SuiteResult validate_conditional_level(std::uint64_t seed, int triples,
                                       int samples) {
  SuiteResult result{"conditional-level"};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  double worst_dev = 0.0;
  bool pass = true;
  for (int t = 0; t < triples; ++t) {
    GmmPrediction gmm;
    gmm.mode_probs = Eigen::VectorXd::Ones(1);
    const Eigen::Matrix2d sigma_k = random_spd(rng, 0.5, 2.0);
    const Eigen::Matrix2d sigma_k1 = random_spd(rng, 0.5, 2.0);
    const Eigen::Vector2d mu_k(nd(rng), nd(rng));
    const Eigen::Vector2d mu_k1 = mu_k + Eigen::Vector2d(1.0, 0.3 * nd(rng));
    gmm.means.push_back({mu_k, mu_k1});
    gmm.covs.push_back({sigma_k, sigma_k1});
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(sigma_k1);
    const Eigen::Matrix2d sigma_n =
        0.03 * es.eigenvalues().minCoeff() * Eigen::Matrix2d::Identity();
    const Eigen::Vector2d o_t = mu_k;  // anchor, only used by the k = 0 block
    const ConditionalTvDynamics dyn = conditional_dynamics(gmm, o_t, sigma_n);

    const double S = 0.5 + 2.5 * ud(rng);
    const double ang = 2.0 * M_PI * ud(rng);
    const Eigen::Vector2d o_k =
        mu_k + sqrt_psd_2x2(sigma_k) * (S * Eigen::Vector2d(std::cos(ang),
                                                            std::sin(ang)));
    // one conditional step k -> k+1 (index 1 of the recursion)
    const Eigen::Vector2d mean_next =
        dyn.transition[0][1] * o_k + dyn.offset[0][1];
    const Eigen::Matrix2d n_half = sqrt_psd_2x2(dyn.step_cov[0][1]);
    const Eigen::Matrix2d prec = sigma_k1.inverse();
    double acc = 0.0, acc2 = 0.0;
    for (int i = 0; i < samples; ++i) {
      const Eigen::Vector2d o_next =
          mean_next + n_half * Eigen::Vector2d(nd(rng), nd(rng));
      const Eigen::Vector2d d = o_next - mu_k1;
      const double level = d.dot(prec * d);
      acc += level;
      acc2 += level * level;
    }
    acc /= samples;
    const double se =
        std::sqrt(std::max(acc2 / samples - acc * acc, 0.0) / samples);
    const double analytic = S * S + (prec * sigma_n).trace();
    const double dev = std::abs(acc - analytic) / std::max(se, 1e-300);
    worst_dev = std::max(worst_dev, dev);
    if (dev > 3.0) pass = false;
  }
  result.pass = pass;
  result.detail = format("worst deviation %.2f standard errors over %d triples",
                         worst_dev, triples);
  return result;
}

SuiteResult validate_marginal_covariance(std::uint64_t seed, int chains,
                                         int samples) {
  SuiteResult result{"marginal-covariance"};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  double worst_ratio = 0.0;
  double worst_psd = std::numeric_limits<double>::infinity();
  bool pass = true;
  const int N = 6;
  for (int c = 0; c < chains; ++c) {
    const GmmPrediction gmm = random_chain(rng, N);
    const Eigen::Vector2d o_t = gmm.means[0][0] - Eigen::Vector2d(1.0, 0.0);
    const Eigen::Matrix2d sigma_n = 0.01 * Eigen::Matrix2d::Identity();
    const ConditionalTvDynamics dyn = conditional_dynamics(gmm, o_t, sigma_n);
    const auto marginal = propagate_marginal(dyn, 0);

    std::vector<Eigen::Matrix2d> n_half(N);
    for (int k = 0; k < N; ++k) n_half[k] = sqrt_psd_2x2(dyn.step_cov[0][k]);
    // sampled covariance of the terminal step
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    Eigen::Matrix2d second = Eigen::Matrix2d::Zero();
    for (int i = 0; i < samples; ++i) {
      Eigen::Vector2d o = o_t;
      for (int k = 0; k < N; ++k) {
        o = dyn.transition[0][k] * o + dyn.offset[0][k] +
            n_half[k] * Eigen::Vector2d(nd(rng), nd(rng));
      }
      mean += o;
      second += o * o.transpose();
    }
    mean /= samples;
    const Eigen::Matrix2d cov =
        second / samples - mean * mean.transpose();
    const Eigen::Matrix2d analytic = marginal[N - 1].second;
    // entrywise sampling error of a Gaussian covariance estimate
    double var_sum = 0.0;
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 2; ++j) {
        var_sum += (analytic(i, i) * analytic(j, j) +
                    analytic(i, j) * analytic(i, j)) /
                   samples;
      }
    }
    const double bound = 3.0 * std::sqrt(var_sum);
    const double err = (cov - analytic).norm();
    worst_ratio = std::max(worst_ratio, err / bound);
    if (err > bound) pass = false;

    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(
        analytic - gmm.covs[0][N - 1]);
    worst_psd = std::min(worst_psd, es.eigenvalues().minCoeff());
    if (es.eigenvalues().minCoeff() < -1e-10) pass = false;
  }
  result.pass = pass;
  result.detail =
      format("worst Frobenius error %.2f of the 3-sigma bound, containment "
             "margin %.2e",
             worst_ratio, worst_psd);
  return result;
}

namespace {

/// Closed-loop EV deviation rollout under the documented policy semantics
/// u_k = u_ref_k + h_k + sum_l M_{l,k} w_l + K_k o_k for frozen draws.
Eigen::VectorXd rollout(const std::vector<Eigen::Matrix4d>& A,
                        const std::vector<Eigen::Matrix<double, 4, 2>>& B,
                        const PolicyParameters& params, int mode,
                        const Eigen::Vector4d& dx0, const Eigen::VectorXd& w,
                        const Eigen::VectorXd& o_head) {
  const int N = (int)A.size();
  Eigen::VectorXd traj(4 * N);
  Eigen::Vector4d dx = dx0;
  for (int k = 0; k < N; ++k) {
    Eigen::Vector2d du = params.h[mode].segment<2>(2 * k);
    for (int l = 0; l < k; ++l) {
      du += params.M[mode].block<2, 4>(2 * k, 4 * l) * w.segment<4>(4 * l);
    }
    du += params.K[mode].block<2, 2>(2 * k, 2 * k) * o_head.segment<2>(2 * k);
    dx = A[k] * dx + B[k] * du + w.segment<4>(4 * k);
    traj.segment<4>(4 * k) = dx;
  }
  return traj;
}

PolicyParameters random_params(std::mt19937_64& rng, int N, int modes) {
  std::normal_distribution<double> nd;
  PolicyParameters params;
  for (int j = 0; j < modes; ++j) {
    Eigen::VectorXd h(2 * N);
    for (int i = 0; i < h.size(); ++i) h(i) = 0.3 * nd(rng);
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(2 * N, 4 * N);
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(2 * N, 2 * N);
    for (int k = 0; k < N; ++k) {
      for (int l = 0; l < k; ++l) {
        M.block<2, 4>(2 * k, 4 * l).setRandom();
        M.block<2, 4>(2 * k, 4 * l) *= 0.2;
      }
      if (k > 0) {
        K.block<2, 2>(2 * k, 2 * k).setRandom();
        K.block<2, 2>(2 * k, 2 * k) *= 0.1;
      }
    }
    params.h.push_back(h);
    params.M.push_back(M);
    params.K.push_back(K);
  }
  return params;
}

}  // namespace

SuiteResult validate_policy_affinity(std::uint64_t seed, int pairs) {
  SuiteResult result{"policy-affinity"};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud(-1.0, 2.0);
  const int N = 8;
  double worst = 0.0;
  for (int p = 0; p < pairs; ++p) {
    std::vector<Eigen::Matrix4d> A(N);
    std::vector<Eigen::Matrix<double, 4, 2>> B(N);
    for (int k = 0; k < N; ++k) {
      A[k] = Eigen::Matrix4d::Identity() + 0.1 * Eigen::Matrix4d::Random();
      B[k].setRandom();
    }
    Eigen::Vector4d dx0 = Eigen::Vector4d::Random();
    Eigen::VectorXd w(4 * N), o_head(2 * N);
    for (int i = 0; i < w.size(); ++i) w(i) = nd(rng);
    for (int i = 0; i < o_head.size(); ++i) o_head(i) = nd(rng);

    const PolicyParameters pa = random_params(rng, N, 1);
    const PolicyParameters pb = random_params(rng, N, 1);
    const double alpha = ud(rng);
    PolicyParameters mix;
    mix.h = {alpha * pa.h[0] + (1.0 - alpha) * pb.h[0]};
    mix.M = {alpha * pa.M[0] + (1.0 - alpha) * pb.M[0]};
    mix.K = {alpha * pa.K[0] + (1.0 - alpha) * pb.K[0]};

    const Eigen::VectorXd xa = rollout(A, B, pa, 0, dx0, w, o_head);
    const Eigen::VectorXd xb = rollout(A, B, pb, 0, dx0, w, o_head);
    const Eigen::VectorXd xm = rollout(A, B, mix, 0, dx0, w, o_head);
    worst = std::max(
        worst, (xm - (alpha * xa + (1.0 - alpha) * xb)).lpNorm<Eigen::Infinity>());
  }
  result.pass = worst < 1e-9;
  result.detail = format("max superposition deviation %.2e over %d pairs",
                         worst, pairs);
  return result;
}

namespace {

/// Synthetic conflict instance shared by the cost and calibration suites:
/// straight reference with a three-mode TV crossing ahead of the EV.
struct ConflictInstance {
  ReferenceTrajectory reference;
  SmpcConfig config;
  EvState x0;
  Eigen::Vector2d o_t;
  GmmPrediction gmm;
};

ConflictInstance conflict_instance() {
  ConflictInstance inst;
  RouteSpec route;
  route.kind = RouteKind::straight;
  route.approach_length = 40.0;
  route.exit_length = 10.0;
  route.speed = 8.0;
  route.start = EvState{0.0, 0.0, 0.0, 8.0};
  inst.config.horizon = 10;
  inst.config.num_modes = 3;
  inst.reference = build_reference(route, inst.config.vehicle, 0.2);
  inst.x0 = inst.reference.states[0];
  inst.x0.speed += 0.3;
  inst.x0.y_pos += 0.1;
  inst.o_t = Eigen::Vector2d(14.0, -8.0);

  GmmPrediction& gmm = inst.gmm;
  gmm.mode_probs = Eigen::Vector3d(0.5, 0.3, 0.2);
  const Eigen::Vector2d dirs[3] = {{0.0, 1.0}, {0.0, 1.0}, {1.0, 1.0}};
  const double speeds[3] = {1.0, 8.0, 5.0};
  for (int j = 0; j < 3; ++j) {
    Eigen::Vector2d p = inst.o_t;
    const Eigen::Vector2d d = dirs[j].normalized();
    std::vector<Eigen::Vector2d> means;
    std::vector<Eigen::Matrix2d> covs;
    for (int k = 1; k <= inst.config.horizon; ++k) {
      p += d * speeds[j] * 0.2;
      means.push_back(p);
      const double s = 0.05 + 0.12 * k;
      covs.push_back(s * s * Eigen::Matrix2d::Identity());
    }
    gmm.means.push_back(means);
    gmm.covs.push_back(covs);
  }
  gmm.normalize();
  return inst;
}

}  // namespace

SuiteResult validate_cost_certificate(std::uint64_t seed, int settings,
                                      int samples) {
  SuiteResult result{"cost-certificate"};
  const ConflictInstance inst = conflict_instance();
  const SmpcConfig& cfg = inst.config;
  const int N = cfg.horizon;
  const SmpcProblem prob =
      build_socp(inst.x0, inst.o_t, inst.reference, 0, inst.gmm, cfg);
  const LtvModel ltv =
      ltv_sequence(inst.reference, cfg.vehicle, 0, N, cfg.sigma_w);
  const StackedEvMatrices ev = stack_ev_matrices(ltv, cfg);
  const ConditionalTvDynamics dyn =
      conditional_dynamics(inst.gmm, inst.o_t, cfg.sigma_n);
  const auto tv = stack_tv_matrices(dyn);
  const CostTerms ct = cost_terms(ev, prob.dx0, cfg);
  const Eigen::Matrix4d w_half = sqrt_psd(cfg.sigma_w);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::discrete_distribution<int> mode_pick({inst.gmm.mode_probs(0),
                                             inst.gmm.mode_probs(1),
                                             inst.gmm.mode_probs(2)});
  double worst_dev = 0.0;
  bool pass = true;
  for (int s = 0; s < settings; ++s) {
    const PolicyParameters params = random_params(rng, N, 3);
    const double nt = ct.value(params, prob.q, inst.gmm.mode_probs, ev, tv,
                               SmpcVariant::policy);
    double acc = 0.0, acc2 = 0.0;
    for (int r = 0; r < samples; ++r) {
      const int j = mode_pick(rng);
      Eigen::VectorXd w(4 * N);
      for (int i = 0; i < w.size(); ++i) w(i) = nd(rng);
      for (int k = 0; k < N; ++k) {
        w.segment<4>(4 * k) = (w_half * w.segment<4>(4 * k)).eval();
      }
      Eigen::VectorXd o_head(2 * N);
      Eigen::Vector2d o = inst.o_t;
      for (int k = 0; k < N; ++k) {
        o_head.segment<2>(2 * k) = o;
        o = dyn.transition[j][k] * o + dyn.offset[j][k] +
            sqrt_psd_2x2(dyn.step_cov[j][k]) *
                Eigen::Vector2d(nd(rng), nd(rng));
      }
      Eigen::Vector4d dx = prob.dx0;
      double cost = 0.0;
      for (int k = 0; k < N; ++k) {
        Eigen::Vector2d du = params.h[j].segment<2>(2 * k);
        for (int l = 0; l < k; ++l) {
          du += params.M[j].block<2, 4>(2 * k, 4 * l) * w.segment<4>(4 * l);
        }
        du += params.K[j].block<2, 2>(2 * k, 2 * k) * o_head.segment<2>(2 * k);
        cost += du.dot(cfg.input_weight * du);
        dx = ltv.A_seq[k] * dx + ltv.B_seq[k] * du + w.segment<4>(4 * k);
        cost += dx.dot(cfg.state_weight * dx);
      }
      acc += cost;
      acc2 += cost * cost;
    }
    acc /= samples;
    const double se =
        std::sqrt(std::max(acc2 / samples - acc * acc, 0.0) / samples);
    const double dev = std::abs(acc - (nt - ct.r_t)) / std::max(se, 1e-300);
    worst_dev = std::max(worst_dev, dev);
    if (dev > 3.0) pass = false;
  }
  result.pass = pass;
  result.detail = format("worst deviation %.2f standard errors over %d settings",
                         worst_dev, settings);
  return result;
}

SuiteResult validate_chance_calibration(std::uint64_t seed, int samples) {
  SuiteResult result{"chance-calibration"};
  const ConflictInstance inst = conflict_instance();
  const SmpcConfig& cfg = inst.config;
  const int N = cfg.horizon;
  const SmpcProblem prob =
      build_socp(inst.x0, inst.o_t, inst.reference, 0, inst.gmm, cfg);
  const SolverResult sol = solve(prob.program, cfg.solver);
  if (sol.status != SolverStatus::optimal) {
    result.detail = "conflict instance did not solve to optimality";
    return result;
  }
  const PolicyParameters params = extract_parameters(prob.layout, sol.primal);

  const LtvModel ltv =
      ltv_sequence(inst.reference, cfg.vehicle, 0, N, cfg.sigma_w);
  const StackedEvMatrices ev = stack_ev_matrices(ltv, cfg);
  const ConditionalTvDynamics dyn =
      conditional_dynamics(inst.gmm, inst.o_t, cfg.sigma_n);
  const auto tv = stack_tv_matrices(dyn);
  const RotationSchedule rot = infer_rotations(inst.gmm);
  const double kappa = norm_inv(1.0 - cfg.risk);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  int active = 0;
  double worst_rate = 1.0;
  bool pass = true;
  for (int j = 0; j < (int)inst.gmm.num_modes(); ++j) {
    // affine maps from (w, n) to the input stack and the state stack
    const Eigen::MatrixXd l_head = tv[j].L_stack.topRows(2 * N);
    const Eigen::VectorXd q = prob.q[j];
    const Eigen::MatrixXd du_w = params.M[j];
    const Eigen::MatrixXd du_n = params.K[j] * l_head;
    const Eigen::VectorXd du_0 = params.h[j] + params.K[j] * q;
    const Eigen::MatrixXd dx_w =
        ev.B_stack * du_w + ev.E_stack;
    const Eigen::MatrixXd dx_n = ev.B_stack * du_n;
    const Eigen::VectorXd dx_0 =
        ev.A_stack * prob.dx0 + ev.B_stack * du_0;
    const Eigen::VectorXd o_0 = tv[j].T_stack * inst.o_t + tv[j].C_stack;

    std::vector<Eigen::Matrix2d> n_half(N);
    for (int k = 0; k < N; ++k) n_half[k] = sqrt_psd_2x2(dyn.step_cov[j][k]);
    const Eigen::Matrix4d w_half = sqrt_psd(cfg.sigma_w);

    for (int k = 1; k <= N; ++k) {
      const EvState& s_ref = inst.reference.states[k];
      const Eigen::Vector2d p_ref(s_ref.x_pos, s_ref.y_pos);
      const Eigen::Vector2d hint(std::cos(s_ref.heading),
                                 std::sin(s_ref.heading));
      const Eigen::Vector2d p_ca = ca_linearization_point(
          p_ref, inst.gmm.means[j][k - 1], rot.rotations[j][k - 1],
          cfg.geometry, hint);
      const AffineCaConstraint aff = g_affine_coeffs(
          p_ca, inst.gmm.means[j][k - 1], rot.rotations[j][k - 1],
          cfg.geometry);

      Eigen::RowVectorXd coeff_w =
          aff.grad_p * dx_w.middleRows<2>(4 * k);
      Eigen::RowVectorXd coeff_n = aff.grad_p * dx_n.middleRows<2>(4 * k) +
                                   aff.grad_o * tv[j].L_stack.middleRows<2>(2 * k);
      const double mean_e =
          aff.grad_p.dot(p_ref + dx_0.segment<2>(4 * k)) +
          aff.grad_o.dot(o_0.segment<2>(2 * k)) - aff.rhs;
      double var = 0.0;
      for (int l = 0; l < N; ++l) {
        const Eigen::Vector4d cw = coeff_w.segment<4>(4 * l).transpose();
        const Eigen::Vector2d cn = coeff_n.segment<2>(2 * l).transpose();
        var += cw.dot(cfg.sigma_w * cw) + cn.dot(dyn.step_cov[j][l] * cn);
      }
      const double margin = mean_e - kappa * std::sqrt(var);
      if (std::abs(margin) > 1e-4 * (1.0 + std::abs(aff.rhs))) continue;
      ++active;

      int satisfied = 0;
      for (int r = 0; r < samples; ++r) {
        double e = mean_e;
        for (int l = 0; l < N; ++l) {
          const Eigen::Vector4d w =
              w_half * Eigen::Vector4d(nd(rng), nd(rng), nd(rng), nd(rng));
          const Eigen::Vector2d n =
              n_half[l] * Eigen::Vector2d(nd(rng), nd(rng));
          e += coeff_w.segment<4>(4 * l).dot(w) +
               coeff_n.segment<2>(2 * l).dot(n);
        }
        if (e >= 0.0) ++satisfied;
      }
      const double rate = (double)satisfied / samples;
      worst_rate = std::min(worst_rate, rate);
      if (rate < 1.0 - cfg.risk - 0.01) pass = false;
    }
  }
  if (active == 0) {
    result.pass = false;
    result.detail = "no collision rows active at equality";
    return result;
  }
  result.pass = pass;
  result.detail = format("%d active rows, worst satisfaction %.4f "
                         "(required >= %.4f)",
                         active, worst_rate, 1.0 - cfg.risk - 0.01);
  return result;
}

namespace {

/// Boundary-complementary slack/multiplier pair for one cone.
void complementary_pair(std::mt19937_64& rng, int dim, Eigen::VectorXd& s,
                        Eigen::VectorXd& z) {
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  s = Eigen::VectorXd::Zero(dim);
  z = Eigen::VectorXd::Zero(dim);
  const double kind = ud(rng);
  if (dim == 1) {
    if (kind < 0.5) {
      s(0) = 0.2 + ud(rng);  // inactive
    } else {
      z(0) = 0.2 + ud(rng);  // active
    }
    return;
  }
  if (kind < 0.4) {  // inactive: s interior, z = 0
    for (int i = 1; i < dim; ++i) s(i) = nd(rng);
    s(0) = s.tail(dim - 1).norm() + 0.2 + ud(rng);
  } else {  // active: z on the boundary, s nonzero on the reflected ray
    // (gamma > 0 keeps complementarity strict; an optimum at the cone apex
    // stalls any interior-point method short of the residual target)
    for (int i = 1; i < dim; ++i) z(i) = nd(rng);
    z(0) = z.tail(dim - 1).norm() + 1e-12;
    const double gamma = 0.3 + ud(rng);
    s(0) = gamma * z(0);
    s.tail(dim - 1) = -gamma * z.tail(dim - 1);
  }
}

}  // namespace

SuiteResult validate_solver_battery(std::uint64_t seed, int instances) {
  SuiteResult result{"solver-battery"};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::uniform_int_distribution<int> un(5, 25);
  std::uniform_int_distribution<int> uc(1, 5);
  std::uniform_int_distribution<int> udim(1, 6);
  std::uniform_int_distribution<int> ueq(0, 3);

  int solved = 0;
  double worst_obj = 0.0, worst_res = 0.0;
  int infeasible_found = 0;
  for (int i = 0; i < instances; ++i) {
    const int n = un(rng);
    const int num_cones = uc(rng);
    const int m_eq = std::min(ueq(rng), n - 2);
    Eigen::VectorXd x_star(n);
    for (int v = 0; v < n; ++v) x_star(v) = nd(rng);

    ConicProgram prog;
    prog.G_eq.resize(m_eq, n);
    prog.h_eq.resize(m_eq);
    Eigen::MatrixXd a_eq = Eigen::MatrixXd::Zero(m_eq, n);
    for (int r = 0; r < m_eq; ++r) {
      for (int v = 0; v < n; ++v) a_eq(r, v) = nd(rng);
    }
    prog.G_eq = a_eq.sparseView();
    prog.h_eq = a_eq * x_star;
    Eigen::VectorXd y(m_eq);
    for (int r = 0; r < m_eq; ++r) y(r) = nd(rng);

    Eigen::VectorXd cost = a_eq.transpose() * y;
    for (int c = 0; c < num_cones; ++c) {
      const int dim = udim(rng);
      Eigen::VectorXd s, z;
      complementary_pair(rng, dim, s, z);
      SocConstraint cone;
      Eigen::MatrixXd ac = Eigen::MatrixXd::Zero(dim - 1, n);
      for (int r = 0; r + 1 < dim; ++r) {
        for (int v = 0; v < n; ++v) ac(r, v) = nd(rng);
      }
      Eigen::VectorXd cc(n);
      for (int v = 0; v < n; ++v) cc(v) = nd(rng);
      cone.A = ac.sparseView();
      cone.b = s.tail(dim - 1) - ac * x_star;
      cone.c = cc.sparseView();
      cone.d = s(0) - cc.dot(x_star);
      prog.cones.push_back(cone);
      cost += cc * z(0) + ac.transpose() * z.tail(dim - 1);
    }
    prog.cost = cost;
    const double obj_star = cost.dot(x_star);

    // tightest tolerance that converges: 1e-10 stalls on a handful of
    // instances; the looser rungs always converge and usually still land
    // below the residual target
    double res_max = std::numeric_limits<double>::infinity();
    double obj_err = std::numeric_limits<double>::infinity();
    for (double tol : {1e-10, 1e-9, 1e-8}) {
      SolverSettings tight;
      tight.feas_tol = tol;
      tight.gap_tol = tol;
      const SolverResult res = solve(prog, tight);
      if (res.status != SolverStatus::optimal) continue;
      const Residuals rr = residuals(prog, res);
      const double rm = std::max({rr.primal, rr.dual, rr.gap});
      if (rm < res_max) {
        res_max = rm;
        obj_err =
            std::abs(res.objective - obj_star) / (1.0 + std::abs(obj_star));
      }
      if (res_max < 1e-9) break;
    }
    if (obj_err < 1e-6 && res_max < 1e-8) ++solved;
    worst_obj = std::max(worst_obj, obj_err);
    worst_res = std::max(worst_res, res_max);

    // companion infeasible instance: contradictory halfspaces u'x >= 1,
    // u'x <= 0 hidden among random cones
    ConicProgram bad = prog;
    Eigen::VectorXd u(n);
    for (int v = 0; v < n; ++v) u(v) = nd(rng);
    SocConstraint row1;
    row1.A.resize(0, n);
    row1.b.resize(0);
    row1.c = u.sparseView();
    row1.d = -1.0;
    SocConstraint row2;
    row2.A.resize(0, n);
    row2.b.resize(0);
    row2.c = (-u).eval().sparseView();
    row2.d = 0.0;
    bad.cones.push_back(row1);
    bad.cones.push_back(row2);
    if (solve(bad).status == SolverStatus::infeasible) ++infeasible_found;
  }
  result.pass = solved == instances && infeasible_found >= instances - 1;
  result.detail = format(
      "%d/%d optimal (worst obj err %.2e, worst residual %.2e), "
      "%d/%d infeasible flagged",
      solved, instances, worst_obj, worst_res, infeasible_found, instances);
  return result;
}

}  // namespace mmpc
