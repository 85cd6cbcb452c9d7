#ifndef MMPC_TV_MODEL_HPP
#define MMPC_TV_MODEL_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mmpc {

/// Multimodal position predictions: per-mode probabilities and per-step
/// Gaussians over the next N steps.
struct GmmPrediction {
  Eigen::VectorXd mode_probs;                        // J
  std::vector<std::vector<Eigen::Vector2d>> means;   // J x N
  std::vector<std::vector<Eigen::Matrix2d>> covs;    // J x N

  std::size_t num_modes() const { return means.size(); }
  std::size_t horizon() const { return means.empty() ? 0 : means[0].size(); }

  /// Renormalizes probabilities and clamps covariance eigenvalues from below
  /// at min_cov_eig. Throws if shapes are inconsistent or probabilities are
  /// degenerate.
  void normalize(double min_cov_eig = 1e-8);
  void validate() const;
};

/// Mode-conditioned affine-Gaussian recursion
/// o_{k+1} = T_k o_k + c_k + n_k, n_k ~ N(0, step_cov_k).
struct ConditionalTvDynamics {
  // per mode j, per step k = 0..N-1
  std::vector<std::vector<Eigen::Matrix2d>> transition;
  std::vector<std::vector<Eigen::Vector2d>> offset;
  std::vector<std::vector<Eigen::Matrix2d>> step_cov;
  Eigen::Matrix2d base_noise = Eigen::Matrix2d::Zero();  // Sigma_n
  Eigen::Vector2d initial_pos = Eigen::Vector2d::Zero(); // o_t
  const GmmPrediction* source = nullptr;

  std::size_t num_modes() const { return transition.size(); }
  std::size_t horizon() const {
    return transition.empty() ? 0 : transition[0].size();
  }
};

struct ModeBelief {
  Eigen::VectorXd probs;
  std::size_t k_bar = 0;
  bool resolved = false;
};

/// { x : (x-center)' shape^{-1} (x-center) <= level }.
struct Ellipsoid {
  Eigen::Vector2d center;
  Eigen::Matrix2d shape;
  double level = 1.0;
};

/// Builds the conditional dynamics from the GMM:
/// T_k = sqrt(Sigma_{k+1}) sqrt(Sigma_k^{-1}), c_k = mu_{k+1} - T_k mu_k for
/// k >= 1; the k = 0 blocks are T = I, c = mu_1 - o_t, step_cov = Sigma_1.
/// Throws when sigma_n is not dominated by every Sigma_{k+1} (max eigenvalue
/// ratio above 0.05).
ConditionalTvDynamics conditional_dynamics(const GmmPrediction& gmm,
                                           const Eigen::Vector2d& current_pos,
                                           const Eigen::Matrix2d& sigma_n);

/// Marginal distribution of o_k (k = 1..N) for the given mode, accounting for
/// the noise accumulated by the recursion.
std::vector<std::pair<Eigen::Vector2d, Eigen::Matrix2d>> propagate_marginal(
    const ConditionalTvDynamics& dyn, std::size_t mode);

/// Exact disjointness test via a scalar dual bisection.
bool ellipsoids_disjoint(const Ellipsoid& e1, const Ellipsoid& e2);

/// Earliest step k (1-based) such that the beta-confidence ellipsoids of all
/// mode pairs are disjoint at every step l >= k; nullopt when no such step
/// exists within the horizon.
std::optional<std::size_t> compute_k_bar(const GmmPrediction& gmm,
                                         double beta);

/// One-hot belief on the mode whose beta-ellipsoid at step k_bar contains
/// obs; retains the prior (resolved = false) when obs lies in no ellipsoid.
ModeBelief belief_update(const Eigen::Vector2d& obs, const GmmPrediction& gmm,
                         std::size_t k_bar, double beta);

/// Seeded rollout of the conditional recursion for one mode.
std::vector<Eigen::Vector2d> sample_tv_trajectory(
    const ConditionalTvDynamics& dyn, std::size_t mode, std::uint64_t seed);

/// JSON {modes:[{p, means:[[x,y],...], covs:[[[a,b],[b,c]],...]}], horizon:N}.
std::string gmm_to_json(const GmmPrediction& gmm);
GmmPrediction gmm_from_json(const std::string& text);
void save_gmm(const GmmPrediction& gmm, const std::string& path);
GmmPrediction load_gmm(const std::string& path);

}  // namespace mmpc

#endif
