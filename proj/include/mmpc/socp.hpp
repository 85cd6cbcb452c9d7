#ifndef MMPC_SOCP_HPP
#define MMPC_SOCP_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <string>
#include <vector>

namespace mmpc {

/// One second-order cone row ||A z + b|| <= c'z + d. A may have zero rows, in
/// which case the row degenerates to the linear constraint c'z + d >= ||b||.
struct SocConstraint {
  Eigen::SparseMatrix<double, Eigen::RowMajor> A;
  Eigen::VectorXd b;
  Eigen::SparseVector<double> c;
  double d = 0.0;
  /// Variable-group hint: 0 when the row touches only shared variables,
  /// g >= 1 when it additionally touches group g. Purely a factorization
  /// hint; -1 disables it for this row.
  int group = -1;
};

/// min cost'z  s.t.  G_eq z = h_eq  and every cone holds.
struct ConicProgram {
  Eigen::VectorXd cost;
  Eigen::SparseMatrix<double, Eigen::RowMajor> G_eq;  // may be 0 x n
  Eigen::VectorXd h_eq;
  std::vector<SocConstraint> cones;
  std::vector<std::string> var_names;  // optional, size n or empty
  /// Optional block-arrow hint: group id per variable (0 = shared). Groups
  /// must be consistent with the per-cone hints; empty disables it.
  std::vector<int> var_groups;

  Eigen::Index num_vars() const { return cost.size(); }
  void validate() const;
};

struct SolverSettings {
  double feas_tol = 1e-8;
  double gap_tol = 1e-8;
  int max_iter = 200;
  double static_reg = 1e-11;
};

enum class SolverStatus { optimal, infeasible, unbounded, max_iter };

struct SolverResult {
  SolverStatus status = SolverStatus::max_iter;
  Eigen::VectorXd primal;          // z
  Eigen::VectorXd dual_eq;         // multipliers for G_eq z = h_eq
  std::vector<Eigen::VectorXd> dual_cones;
  double objective = 0.0;
  double dual_objective = 0.0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  double gap = 0.0;
  int iterations = 0;
};

const char* to_string(SolverStatus s);

/// Homogeneous self-dual interior-point solve with Nesterov-Todd scaling.
/// Deterministic for identical inputs and settings.
SolverResult solve(const ConicProgram& program,
                   const SolverSettings& settings = {});

/// KKT residual norms (primal, dual, complementarity gap) of a candidate
/// primal/dual pair.
struct Residuals {
  double primal = 0.0;
  double dual = 0.0;
  double gap = 0.0;
};
Residuals residuals(const ConicProgram& program, const SolverResult& result);

/// JSON problem-file round trip for cross-solver validation.
std::string program_to_json(const ConicProgram& program);
ConicProgram program_from_json(const std::string& text);
void save_program(const ConicProgram& program, const std::string& path);
ConicProgram load_program(const std::string& path);

}  // namespace mmpc

#endif
