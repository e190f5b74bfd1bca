#pragma once

#include "elcc/types.hpp"

namespace elcc {

// Inner problem: multipliers nu for the weighted moment constraints at a fixed
// theta. Convex in nu; solved by damped Newton on the log-extended dual, which
// is defined everywhere so line searches in the outer loop stay total.
// Rows of H are the per-observation estimating functions.
LagrangeState solve_dual(MatRef H, const SolverConfig& cfg = {},
                         const Eigen::VectorXd* nu_init = nullptr);

// Same, building H(x_i; theta) from the sample. nu_init defaults to mass
// n1/n on the first component, which keeps every 1 + nu'H_i positive.
LagrangeState solve_nu(const ThetaFull& theta, const CaseControlSample& sample,
                       const ConstraintSpec& spec, const SolverConfig& cfg = {},
                       const Eigen::VectorXd* nu_init = nullptr);

// Profiled objective at theta: retrospective log likelihood terms minus the
// log-extended inner sum, minus the quadratic penalty tying mu to the external
// summary (Given mode). PopulationLevel mode pins theta.mu = mu_tilde and
// carries no penalty.
struct ProfileValue {
  double value = 0.0;
  LagrangeState lagrange;
};

ProfileValue profile_objective(const ThetaFull& theta, const CaseControlSample& sample,
                               const ExternalSummary& external, const ConstraintSpec& spec,
                               const SolverConfig& cfg = {},
                               const Eigen::VectorXd* nu_warm = nullptr);

// Analytic gradient of the profiled objective in the fixed gamma|alpha_star|beta|mu
// layout, holding nu at the inner solution (envelope identity). Exposed for tests.
Eigen::VectorXd profile_gradient(const ThetaFull& theta, const CaseControlSample& sample,
                                 const ExternalSummary& external, const ConstraintSpec& spec,
                                 const LagrangeState& lagrange);

// Data-driven start: slope and retrospective intercept from the prospective MLE,
// gamma from matching the external summary to the case/control h-means, mu at
// the summary itself.
InitEstimates init_theta(const CaseControlSample& sample, VecRef mu_tilde,
                         const ConstraintSpec& spec, const SolverConfig& cfg = {});

// Maximum empirical likelihood fit with a concrete PD weight W (Given mode).
// Optimal-mode summaries must go through the weighted refit driver instead.
FitResult fit_mele(const CaseControlSample& sample, const ExternalSummary& external,
                   const ConstraintSpec& spec, const SolverConfig& cfg = {},
                   const ThetaFull* theta_init = nullptr,
                   const Eigen::VectorXd* nu_init = nullptr);

// Simplified fit treating the external summary as the exact population value:
// mu is pinned, only (gamma, alpha_star, beta) are free, no penalty term.
FitResult fit_known_mu(const CaseControlSample& sample, VecRef mu_tilde,
                       const ConstraintSpec& spec, const SolverConfig& cfg = {});

}  // namespace elcc
