#ifndef MMPC_VALIDATION_HPP
#define MMPC_VALIDATION_HPP

#include <cstdint>
#include <string>

namespace mmpc {

/// Outcome of one Monte-Carlo or constructed-certificate property suite.
struct SuiteResult {
  std::string name;
  bool pass = false;
  std::string detail;  // worst-case numbers, for the report line
};

/// Sampled implication check: whenever the affine under-approximation is
/// nonnegative, the exact clearance function must be >= 1 (tolerance 1e-9).
SuiteResult validate_ca_implication(std::uint64_t seed, int samples);

/// Conditional one-step expectation of the Mahalanobis level against the
/// analytic value S^2 + tr(Sigma_{k+1}^{-1} Sigma_n), within 3 standard
/// errors per triple.
SuiteResult validate_conditional_level(std::uint64_t seed, int triples,
                                       int samples);

/// Analytic marginal covariance of the conditional recursion against a
/// sampled rollout covariance (Frobenius error below a 3-standard-error
/// bound) plus PSD containment of the source covariance.
SuiteResult validate_marginal_covariance(std::uint64_t seed, int chains,
                                         int samples);

/// Superposition of closed-loop EV predictions in the policy parameters for
/// frozen noise draws; max deviation must stay below 1e-9.
SuiteResult validate_policy_affinity(std::uint64_t seed, int pairs);

/// Cost certificate: N_t - r_t against the Monte-Carlo expected closed-loop
/// cost for random policy parameters, within 3 standard errors.
SuiteResult validate_cost_certificate(std::uint64_t seed, int settings,
                                      int samples);

/// Empirical satisfaction of collision-avoidance chance rows that are active
/// at equality under the optimized policy: must lie in [1-eps-0.01, 1].
SuiteResult validate_chance_calibration(std::uint64_t seed, int samples);

/// Random SOCPs with constructed optimality certificates (objective error
/// < 1e-6, solver KKT residuals < 1e-8) and constructed infeasible
/// instances (at most one miss allowed).
SuiteResult validate_solver_battery(std::uint64_t seed, int instances);

}  // namespace mmpc

#endif
