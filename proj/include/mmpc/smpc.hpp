#ifndef MMPC_SMPC_HPP
#define MMPC_SMPC_HPP

#include <optional>
#include <vector>

#include "mmpc/collision.hpp"
#include "mmpc/ev_model.hpp"
#include "mmpc/socp.hpp"
#include "mmpc/tv_model.hpp"

namespace mmpc {

enum class SmpcVariant { policy, open_loop };
enum class RiskAllocation { per_row, union_bound };

struct SmpcConfig {
  int horizon = 10;
  double risk = 0.05;        // per-constraint risk level
  double confidence = 5.991; // chi-square 2-dof 95% level for mode inference
  int num_modes = 1;
  Eigen::Matrix4d state_weight = Eigen::Vector4d(1.0, 1.0, 10.0, 10.0).asDiagonal();
  Eigen::Matrix2d input_weight = Eigen::Vector2d(10.0, 100.0).asDiagonal();
  Eigen::Matrix4d sigma_w = 1e-4 * Eigen::Matrix4d::Identity();
  Eigen::Matrix2d sigma_n = 1e-3 * Eigen::Matrix2d::Identity();
  SmpcVariant variant = SmpcVariant::policy;
  RiskAllocation allocation = RiskAllocation::per_row;
  VehicleParams vehicle{};
  ObstacleGeometry geometry{};
  // The assembled programs are close to degenerate at the optimum, which
  // caps the accuracy a dense normal-equations solver can reach; 1e-6 is
  // reliable there and far below anything the controller can act on.
  SolverSettings solver{.feas_tol = 1e-6, .gap_tol = 1e-7};

  void validate() const;
};

/// Stacked prediction matrices over the horizon. Block row k of the stacks
/// addresses x_k (state rows) resp. u_k (input columns).
struct StackedEvMatrices {
  Eigen::MatrixXd A_stack;        // 4(N+1) x 4
  Eigen::MatrixXd B_stack;        // 4(N+1) x 2N
  Eigen::MatrixXd E_stack;        // 4(N+1) x 4N
  Eigen::MatrixXd sigma_w_stack;  // 4N x 4N, block diagonal
  Eigen::MatrixXd Q_stack;        // 4(N+1) x 4(N+1)
  Eigen::MatrixXd R_stack;        // 2N x 2N

  static int x_row(int k) { return 4 * k; }  // selector S^x_k
  static int u_row(int k) { return 2 * k; }  // selector S^u_k
  static int o_row(int k) { return 2 * k; }  // selector S^o_k
};

/// Per-mode stacked TV chain: o-stack = T_stack o_t + C_stack + L_stack n.
struct StackedTvMatrices {
  Eigen::MatrixXd T_stack;        // 2(N+1) x 2
  Eigen::VectorXd C_stack;        // 2(N+1)
  Eigen::MatrixXd L_stack;        // 2(N+1) x 2N
  Eigen::MatrixXd sigma_n_stack;  // 2N x 2N, block diagonal
};

/// Decision-vector layout of the assembled SOCP.
///
/// policy variant:
///   [0]                    epigraph variable s
///   [1 .. J]               per-mode cost epigraph slack s_j
///   then per input step k = 0..N-1 a parameter block
///     h_k (2) | M_{0,k} .. M_{k-1,k} (8 each, row-major 2x4) | K_k (4,
///     row-major 2x2);
///   the k = 0 block is h_0 only: o_0 = o_t is known, so K_0 would be
///   redundant with h_0;
///   blocks with k < k_bar_eff are stored once (shared prefix), blocks with
///   k >= k_bar_eff repeat per mode in mode-major order.
/// open_loop variant:
///   [0] s, [1 .. 2N] h.
struct PolicyLayout {
  SmpcVariant variant = SmpcVariant::policy;
  int horizon = 0;
  int num_modes = 0;
  int k_bar_eff = 0;  // shared-prefix length; N when the mode never resolves

  int s_index() const { return 0; }
  int aux_index(int j) const;
  int block_offset(int j, int k) const;  // start of step-k block for mode j
  int h_index(int j, int k) const;       // first of the 2 h entries
  int m_index(int j, int l, int k) const;  // first of the 8 M_{l,k} entries
  int k_index(int j, int k) const;       // first of the 4 K_k entries
  int num_vars() const;
  int group_of_step(int j, int k) const;  // factorization group hint
  std::vector<int> var_groups() const;
  std::vector<std::string> var_names() const;
};

/// Affine feedback policy: u_k = u_ref_k + h_k + sum_l M_{l,k} w_l + K_k o_k.
/// Shared-prefix blocks are duplicated across modes on extraction.
struct PolicyParameters {
  std::vector<Eigen::VectorXd> h;  // per mode, 2N
  std::vector<Eigen::MatrixXd> M;  // per mode, 2N x 4N strictly blk-lower
  std::vector<Eigen::MatrixXd> K;  // per mode, 2N x 2N block diagonal
};

/// Quadratic cost pieces shared by the builder and the tests. The policy cost
/// is value(...) and the SOCP bounds it through the per-mode epigraph rows.
struct CostTerms {
  Eigen::MatrixXd P;        // B'QB + R
  Eigen::MatrixXd chol_lt;  // upper-triangular U with P = U'U
  Eigen::VectorXd a_lin;    // B'QA dx0
  double r_t = 0.0;
  double c0 = 0.0;  // completion constant folded into the epigraph bound

  /// N_t for the given parameters; q[j] is the stacked noise-free o-chain
  /// head (o_0 .. o_{N-1}) of mode j.
  double value(const PolicyParameters& params,
               const std::vector<Eigen::VectorXd>& q,
               const Eigen::VectorXd& probs, const StackedEvMatrices& ev,
               const std::vector<StackedTvMatrices>& tv,
               SmpcVariant variant) const;
};

enum class SmpcStatus { optimal, infeasible, fallback };

struct SmpcSolution {
  EvInput control{};
  PolicyParameters params;
  double objective = 0.0;
  SmpcStatus status = SmpcStatus::fallback;
};

/// Assembled program plus everything needed to interpret its solution.
struct SmpcProblem {
  ConicProgram program;
  PolicyLayout layout;
  double r_t = 0.0;
  double c0 = 0.0;
  std::optional<std::size_t> k_bar;
  std::vector<Eigen::VectorXd> q;  // per-mode o-chain heads, 2N
  Eigen::Vector4d dx0 = Eigen::Vector4d::Zero();
};

StackedEvMatrices stack_ev_matrices(const LtvModel& ltv,
                                    const SmpcConfig& config);

std::vector<StackedTvMatrices> stack_tv_matrices(
    const ConditionalTvDynamics& dyn);

std::vector<SocConstraint> soc_state_input_constraints(
    const StackedEvMatrices& ev, const std::vector<StackedTvMatrices>& tv,
    const PolicyLayout& layout, const EvConstraintSets& sets,
    const Eigen::Vector4d& dx0, const Eigen::Vector2d& o_t,
    const SmpcConfig& config);

/// ca[j][k-1] holds the affine coefficients for step k of mode j; p_ref are
/// the reference positions at steps 1..N used for the threshold shift. For
/// the open_loop variant marginal_covs[j][k-1] supplies the step-k TV
/// covariance.
std::vector<SocConstraint> soc_collision_constraints(
    const std::vector<std::vector<AffineCaConstraint>>& ca,
    const std::vector<Eigen::Vector2d>& p_ref, const StackedEvMatrices& ev,
    const std::vector<StackedTvMatrices>& tv, const PolicyLayout& layout,
    const Eigen::Vector4d& dx0, const Eigen::Vector2d& o_t,
    const std::vector<std::vector<Eigen::Matrix2d>>& marginal_covs,
    const SmpcConfig& config);

CostTerms cost_terms(const StackedEvMatrices& ev, const Eigen::Vector4d& dx0,
                     const SmpcConfig& config);

SmpcProblem build_socp(const EvState& x_t, const Eigen::Vector2d& o_t,
                       const ReferenceTrajectory& reference,
                       std::size_t start_index, const GmmPrediction& gmm,
                       const SmpcConfig& config);

/// Unpacks a decision vector into the per-mode policy parameters.
PolicyParameters extract_parameters(const PolicyLayout& layout,
                                    const Eigen::VectorXd& z);

SmpcSolution extract_control(const SmpcProblem& problem,
                             const SolverResult& result,
                             const ReferenceTrajectory& reference,
                             std::size_t start_index,
                             const SmpcConfig& config);

/// Full brake with zero steering; no reverse from standstill.
EvInput fallback_brake(const EvState& state, const VehicleParams& params);

}  // namespace mmpc

#endif
