#include "mmpc/tv_model.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include <json.hpp>

#include "mmpc/stats.hpp"

namespace mmpc {

void GmmPrediction::validate() const {
  const std::size_t J = means.size();
  if (J == 0 || covs.size() != J ||
      mode_probs.size() != static_cast<Eigen::Index>(J)) {
    throw std::invalid_argument("GmmPrediction: inconsistent mode count");
  }
  const std::size_t N = means[0].size();
  if (N == 0) throw std::invalid_argument("GmmPrediction: empty horizon");
  for (std::size_t j = 0; j < J; ++j) {
    if (means[j].size() != N || covs[j].size() != N) {
      throw std::invalid_argument("GmmPrediction: ragged horizon");
    }
  }
  if (std::abs(mode_probs.sum() - 1.0) > 1e-9 || mode_probs.minCoeff() < 0.0) {
    throw std::invalid_argument("GmmPrediction: probabilities must sum to 1");
  }
}

void GmmPrediction::normalize(double min_cov_eig) {
  const double total = mode_probs.sum();
  if (!(total > 0.0)) {
    throw std::invalid_argument("GmmPrediction: non-positive total mass");
  }
  mode_probs /= total;
  for (auto& mode : covs) {
    for (auto& c : mode) {
      c = 0.5 * (c + c.transpose().eval());
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(c);
      Eigen::Vector2d ev = es.eigenvalues().cwiseMax(min_cov_eig);
      c = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    }
  }
  validate();
}

ConditionalTvDynamics conditional_dynamics(const GmmPrediction& gmm,
                                           const Eigen::Vector2d& current_pos,
                                           const Eigen::Matrix2d& sigma_n) {
  gmm.validate();
  const std::size_t J = gmm.num_modes();
  const std::size_t N = gmm.horizon();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es_n(sigma_n);
  const double n_max = es_n.eigenvalues().maxCoeff();
  if (es_n.eigenvalues().minCoeff() <= 0.0) {
    throw std::invalid_argument("conditional_dynamics: sigma_n must be PD");
  }
  for (std::size_t j = 0; j < J; ++j) {
    for (std::size_t k = 1; k < N; ++k) {
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(gmm.covs[j][k]);
      if (n_max > 0.05 * es.eigenvalues().maxCoeff()) {
        throw std::invalid_argument(
            "conditional_dynamics: sigma_n not dominated by Sigma_{k+1}");
      }
    }
  }

  ConditionalTvDynamics dyn;
  dyn.base_noise = sigma_n;
  dyn.initial_pos = current_pos;
  dyn.source = &gmm;
  dyn.transition.assign(J, {});
  dyn.offset.assign(J, {});
  dyn.step_cov.assign(J, {});
  for (std::size_t j = 0; j < J; ++j) {
    dyn.transition[j].resize(N);
    dyn.offset[j].resize(N);
    dyn.step_cov[j].resize(N);
    // k = 0: deterministic anchor at the current position.
    dyn.transition[j][0] = Eigen::Matrix2d::Identity();
    dyn.offset[j][0] = gmm.means[j][0] - current_pos;
    dyn.step_cov[j][0] = gmm.covs[j][0];
    for (std::size_t k = 1; k < N; ++k) {
      const Eigen::Matrix2d sqrt_next = sqrt_psd_2x2(gmm.covs[j][k]);
      const Eigen::Matrix2d sqrt_prev_inv =
          sqrt_psd_2x2(gmm.covs[j][k - 1]).inverse();
      dyn.transition[j][k] = sqrt_next * sqrt_prev_inv;
      dyn.offset[j][k] =
          gmm.means[j][k] - dyn.transition[j][k] * gmm.means[j][k - 1];
      dyn.step_cov[j][k] = sigma_n;
    }
  }
  return dyn;
}

std::vector<std::pair<Eigen::Vector2d, Eigen::Matrix2d>> propagate_marginal(
    const ConditionalTvDynamics& dyn, std::size_t mode) {
  if (mode >= dyn.num_modes()) {
    throw std::out_of_range("propagate_marginal: mode index");
  }
  const std::size_t N = dyn.horizon();
  std::vector<std::pair<Eigen::Vector2d, Eigen::Matrix2d>> out;
  out.reserve(N);
  Eigen::Vector2d mean = dyn.initial_pos;
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  for (std::size_t k = 0; k < N; ++k) {
    const Eigen::Matrix2d& T = dyn.transition[mode][k];
    mean = T * mean + dyn.offset[mode][k];
    cov = T * cov * T.transpose() + dyn.step_cov[mode][k];
    out.emplace_back(mean, cov);
  }
  return out;
}

namespace {

// Minimum of (x-c2)' S2^{-1} (x-c2) over the ellipsoid
// (x-c1)' S1^{-1} (x-c1) <= l1, by bisection on the dual multiplier.
double min_quadratic_over_ellipsoid(const Eigen::Vector2d& c1,
                                    const Eigen::Matrix2d& s1_inv, double l1,
                                    const Eigen::Vector2d& c2,
                                    const Eigen::Matrix2d& s2_inv) {
  auto level1 = [&](const Eigen::Vector2d& x) {
    return ((x - c1).transpose() * s1_inv * (x - c1)).value();
  };
  if (level1(c2) <= l1) return 0.0;  // unconstrained minimizer feasible
  // x(lam) = (S2^{-1} + lam S1^{-1})^{-1} (S2^{-1} c2 + lam S1^{-1} c1);
  // level1(x(lam)) decreases monotonically in lam; find the active point.
  auto x_of = [&](double lam) -> Eigen::Vector2d {
    Eigen::Matrix2d M = s2_inv + lam * s1_inv;
    return M.ldlt().solve(s2_inv * c2 + lam * s1_inv * c1);
  };
  double lo = 0.0, hi = 1.0;
  while (level1(x_of(hi)) > l1) {
    hi *= 2.0;
    if (hi > 1e16) break;
  }
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    if (level1(x_of(mid)) > l1) {
      lo = mid;
    } else {
      hi = mid;
    }
    if (hi - lo < 1e-9 * std::max(1.0, hi)) break;
  }
  const Eigen::Vector2d x = x_of(hi);
  return ((x - c2).transpose() * s2_inv * (x - c2)).value();
}

}  // namespace

bool ellipsoids_disjoint(const Ellipsoid& e1, const Ellipsoid& e2) {
  const Eigen::Matrix2d s1_inv = e1.shape.inverse();
  const Eigen::Matrix2d s2_inv = e2.shape.inverse();
  const double min_val = min_quadratic_over_ellipsoid(
      e1.center, s1_inv, e1.level, e2.center, s2_inv);
  return min_val > e2.level + 1e-9;
}

std::optional<std::size_t> compute_k_bar(const GmmPrediction& gmm,
                                         double beta) {
  if (beta <= 0.0) throw std::invalid_argument("compute_k_bar: beta <= 0");
  gmm.validate();
  const std::size_t J = gmm.num_modes();
  const std::size_t N = gmm.horizon();
  if (J == 1) return 1;
  // separable[l]: all mode pairs disjoint at step l (0-based).
  std::vector<bool> separable(N, true);
  for (std::size_t l = 0; l < N; ++l) {
    for (std::size_t j1 = 0; j1 + 1 < J && separable[l]; ++j1) {
      for (std::size_t j2 = j1 + 1; j2 < J; ++j2) {
        Ellipsoid e1{gmm.means[j1][l], gmm.covs[j1][l], beta};
        Ellipsoid e2{gmm.means[j2][l], gmm.covs[j2][l], beta};
        if (!ellipsoids_disjoint(e1, e2)) {
          separable[l] = false;
          break;
        }
      }
    }
  }
  std::size_t k = N;
  while (k >= 1 && separable[k - 1]) --k;
  if (k == N) return std::nullopt;
  return k + 1;  // 1-based
}

ModeBelief belief_update(const Eigen::Vector2d& obs, const GmmPrediction& gmm,
                         std::size_t k_bar, double beta) {
  gmm.validate();
  if (k_bar < 1 || k_bar > gmm.horizon()) {
    throw std::out_of_range("belief_update: k_bar outside horizon");
  }
  const std::size_t J = gmm.num_modes();
  ModeBelief belief;
  belief.k_bar = k_bar;
  belief.probs = gmm.mode_probs;
  double best_level = std::numeric_limits<double>::infinity();
  std::size_t best_mode = J;
  for (std::size_t j = 0; j < J; ++j) {
    const Eigen::Vector2d d = obs - gmm.means[j][k_bar - 1];
    const double level =
        (d.transpose() * gmm.covs[j][k_bar - 1].inverse() * d).value();
    if (level <= beta && level < best_level) {
      best_level = level;
      best_mode = j;
    }
  }
  if (best_mode < J) {
    belief.probs = Eigen::VectorXd::Zero(J);
    belief.probs(best_mode) = 1.0;
    belief.resolved = true;
  }
  return belief;
}

std::vector<Eigen::Vector2d> sample_tv_trajectory(
    const ConditionalTvDynamics& dyn, std::size_t mode, std::uint64_t seed) {
  if (mode >= dyn.num_modes()) {
    throw std::out_of_range("sample_tv_trajectory: mode index");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t N = dyn.horizon();
  std::vector<Eigen::Vector2d> out;
  out.reserve(N);
  Eigen::Vector2d o = dyn.initial_pos;
  for (std::size_t k = 0; k < N; ++k) {
    Eigen::Vector2d n(gauss(rng), gauss(rng));
    const Eigen::Matrix2d root = sqrt_psd_2x2(dyn.step_cov[mode][k]);
    o = dyn.transition[mode][k] * o + dyn.offset[mode][k] + root * n;
    out.push_back(o);
  }
  return out;
}

std::string gmm_to_json(const GmmPrediction& gmm) {
  nlohmann::json root;
  root["horizon"] = gmm.horizon();
  auto& modes = root["modes"];
  modes = nlohmann::json::array();
  for (std::size_t j = 0; j < gmm.num_modes(); ++j) {
    nlohmann::json m;
    m["p"] = gmm.mode_probs(static_cast<Eigen::Index>(j));
    for (const auto& mu : gmm.means[j]) {
      m["means"].push_back({mu.x(), mu.y()});
    }
    for (const auto& c : gmm.covs[j]) {
      m["covs"].push_back({{c(0, 0), c(0, 1)}, {c(1, 0), c(1, 1)}});
    }
    modes.push_back(std::move(m));
  }
  return root.dump(2);
}

GmmPrediction gmm_from_json(const std::string& text) {
  nlohmann::json root = nlohmann::json::parse(text);
  GmmPrediction gmm;
  const auto& modes = root.at("modes");
  const std::size_t J = modes.size();
  gmm.mode_probs.resize(static_cast<Eigen::Index>(J));
  gmm.means.resize(J);
  gmm.covs.resize(J);
  for (std::size_t j = 0; j < J; ++j) {
    const auto& m = modes[j];
    gmm.mode_probs(static_cast<Eigen::Index>(j)) = m.at("p").get<double>();
    for (const auto& mu : m.at("means")) {
      gmm.means[j].emplace_back(mu[0].get<double>(), mu[1].get<double>());
    }
    for (const auto& c : m.at("covs")) {
      Eigen::Matrix2d cov;
      cov << c[0][0].get<double>(), c[0][1].get<double>(),
          c[1][0].get<double>(), c[1][1].get<double>();
      gmm.covs[j].push_back(cov);
    }
  }
  gmm.normalize();
  return gmm;
}

void save_gmm(const GmmPrediction& gmm, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << gmm_to_json(gmm);
}

GmmPrediction load_gmm(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return gmm_from_json(text);
}

}  // namespace mmpc
