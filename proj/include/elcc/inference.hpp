#pragma once

#include <utility>

#include "elcc/types.hpp"

namespace elcc {

// Estimated optimal penalty weight: the weighted second moment of h(x) - mu_tilde
// under the fitted mixture, which makes the penalized fit efficiency-optimal.
Eigen::MatrixXd estimate_vhat(const FitResult& fit, const CaseControlSample& sample,
                              const ConstraintSpec& spec, VecRef mu_tilde);

// Plug-in derivative and second-moment blocks behind the asymptotic covariance.
// All expectations are control-sample means evaluated at the fitted theta.
// `internal` marks the reduced (gamma, alpha_star, beta) form used when mu is
// treated as known; the full form adds the mu and penalty blocks.
struct AsymptoticBlocks {
  int p = 0, q = 0;
  double rho = 0.0;      // n_case / n_control
  long n = 0;
  double n_ratio = 0.0;  // N / n
  bool internal = false;
  double gamma_hat = 0.0;

  Eigen::RowVectorXd A15, A23, A25;  // gamma-nu, alpha*-beta, alpha*-nu couplings
  double A22 = 0.0;
  Eigen::MatrixXd A33, A35, A44, A45, A55;

  Eigen::MatrixXd U, M, J;  // score sensitivity, middle matrix, information sandwich
  Eigen::VectorXd c;        // scaled mean control score; annihilated by the sandwich
  Eigen::MatrixXd D;        // penalty mismatch block (full form only)
  Eigen::MatrixXd W, V;     // weight in use and V-hat at the fit (full form only)
};

// Full-form blocks at a fitted theta. Given mode uses external.W; Optimal mode
// uses V-hat estimated at the fit itself.
AsymptoticBlocks assemble_blocks(const FitResult& fit, const CaseControlSample& sample,
                                 const ConstraintSpec& spec, const ExternalSummary& external);

// Same, at an arbitrary theta with an explicit weight; lets tests compare the
// information across nested constraint sets at one parameter value. The
// penalty-mismatch block is left zero here because V-hat is tied to a fit.
AsymptoticBlocks assemble_blocks_at(const ThetaFull& theta, const CaseControlSample& sample,
                                    const ConstraintSpec& spec, MatRef W, double n_external);

// Reduced-form blocks for a known-mu fit.
AsymptoticBlocks assemble_blocks_internal(const FitResult& fit, const CaseControlSample& sample,
                                          const ConstraintSpec& spec, VecRef mu_tilde);

enum class SigmaForm {
  GeneralW,   // arbitrary PD weight: sandwich with the penalty-mismatch block
  OptimalV,   // weight equal to V-hat: the sandwich collapses to the inverse information
  InternalI,  // known mu: reduced inverse information
};

// Asymptotic covariance of the estimator; sigma is on the sqrt(n) scale, so
// standard errors are sqrt(diag(sigma) / n). se_alpha combines the gamma and
// alpha_star components; se_pi maps se(gamma) through the case proportion.
struct CovarianceEstimate {
  Eigen::MatrixXd sigma;
  Eigen::VectorXd se_theta;
  double se_alpha = 0.0;
  double se_pi = 0.0;
};

CovarianceEstimate sigma_hat(const AsymptoticBlocks& blocks, SigmaForm form);

// Iterated optimal-weight fit: start at W = I, alternate fitting and
// re-estimating V-hat until theta stabilizes.
struct OptimalFit {
  FitResult fit;
  Eigen::MatrixXd V;
  int rounds = 0;
  std::vector<double> step_norms;  // sup-norm theta movement per refit
};

OptimalFit fit_optimal_weight(const CaseControlSample& sample, const ExternalSummary& external,
                              const ConstraintSpec& spec, const SolverConfig& cfg = {});

// Two-sided normal interval.
std::pair<double, double> wald_ci(double est, double se, double level);

// Mode dispatcher: fit and matched covariance for any weight specification.
struct FitWithCovariance {
  FitResult fit;
  CovarianceEstimate cov;
  Eigen::MatrixXd V;  // V-hat at the fit; empty for population-level mode
  std::string estimator;
};

FitWithCovariance fit_auto(const CaseControlSample& sample, const ExternalSummary& external,
                           const ConstraintSpec& spec, const SolverConfig& cfg = {});

}  // namespace elcc
