#include "elcc/inference.hpp"

#include <boost/math/special_functions/erf.hpp>
#include <cmath>

#include "elcc/model.hpp"
#include "elcc/solver.hpp"

namespace elcc {
namespace {

std::string fmt_g(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", x);
  return buf;
}

// Symmetric inverse through an eigendecomposition so conditioning can be
// monitored; refuses blocks that are numerically singular.
Eigen::MatrixXd inv_spd_checked(MatRef A, const char* name) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (A + A.transpose()));
  if (es.info() != Eigen::Success)
    throw ElError(ErrorCategory::SingularBlock,
                  std::string("covariance assembly: eigendecomposition of ") + name + " failed");
  double lmin = es.eigenvalues().minCoeff(), lmax = es.eigenvalues().maxCoeff();
  if (!(lmin > 0.0) || lmax / lmin > 1e12)
    throw ElError(ErrorCategory::SingularBlock,
                  std::string("covariance assembly: ") + name +
                      " is singular or ill-conditioned (eigenvalue range [" + fmt_g(lmin) + ", " +
                      fmt_g(lmax) + "])");
  return es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() *
         es.eigenvectors().transpose();
}

// Control-sample plug-in means for every derivative and second-moment block.
struct RawBlocks {
  Eigen::RowVectorXd A15, A23, A25;
  Eigen::RowVectorXd HD;  // control mean of H over the mixture denominator
  double A22 = 0.0;
  Eigen::MatrixXd A33, A35, A55;
};

RawBlocks raw_blocks(const ThetaFull& theta, const CaseControlSample& sample,
                     const ConstraintSpec& spec) {
  const int p = theta.p(), q = theta.q();
  const double rho = sample.rho;
  const int n0 = sample.n_control;

  Eigen::MatrixXd X0(n0, p);
  int r = 0;
  for (int i = 0; i < sample.n; ++i)
    if (sample.y[i] == 0) X0.row(r++) = sample.X.row(i);

  Eigen::MatrixXd h0 = spec.apply_rows(X0);
  Eigen::ArrayXd delta = ((X0 * theta.beta).array() + theta.alpha_star).exp();
  Eigen::ArrayXd Dl = 1.0 + rho * delta;  // per-observation denominator 1 + rho*delta
  const double sg = sigmoid(theta.gamma), smg = sigmoid(-theta.gamma);
  Eigen::ArrayXd t = delta * smg + sg;

  Eigen::MatrixXd H0(n0, 1 + q);
  H0.col(0) = delta - 1.0;
  H0.rightCols(q) = (h0.array().colwise() * t).rowwise() - theta.mu.transpose().array();

  const double c1 = rho / (1.0 + rho);
  Eigen::ArrayXd dD = delta / Dl;

  RawBlocks B;
  B.A22 = c1 * dD.mean();
  B.A23 = (c1 / n0) * (X0.transpose() * dD.matrix()).transpose();
  B.A33 = (c1 / n0) * (X0.transpose() * dD.matrix().asDiagonal() * X0);

  B.A15.resize(1 + q);
  B.A15[0] = 0.0;
  B.A15.tail(q) = (sg * smg / n0) * (h0.transpose() * (1.0 - delta).matrix()).transpose();

  B.HD = (H0.array().colwise() / Dl).colwise().mean().matrix();

  B.A25.resize(1 + q);
  B.A25[0] = delta.mean();
  B.A25.tail(q) = (smg / n0) * (h0.transpose() * delta.matrix()).transpose();
  B.A25 += B.HD;

  B.A35.resize(p, 1 + q);
  B.A35.col(0) = (1.0 / n0) * (X0.transpose() * delta.matrix());
  B.A35.rightCols(q) = (smg / n0) * (X0.transpose() * delta.matrix().asDiagonal() * h0);
  B.A35 -= (rho / n0) * (X0.transpose() * dD.matrix().asDiagonal() * H0);

  B.A55 = ((1.0 + rho) / n0) * (H0.transpose() * Dl.inverse().matrix().asDiagonal() * H0);
  B.A33 = 0.5 * (B.A33 + B.A33.transpose()).eval();
  B.A55 = 0.5 * (B.A55 + B.A55.transpose()).eval();
  return B;
}

void check_fitted(const FitResult& fit) {
  if (!fit.converged)
    throw ElError(ErrorCategory::InvalidInput,
                  "covariance: fit did not converge; blocks would be meaningless");
}

Eigen::MatrixXd symmetrized_sandwich(MatRef J) {
  double scale = std::max(1.0, J.cwiseAbs().maxCoeff());
  double asym = (J - J.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-10 * scale)
    throw ElError(ErrorCategory::Diagnostics,
                  "covariance assembly: sandwich asymmetry " + fmt_g(asym) +
                      " exceeds tolerance; block inputs are inconsistent");
  return 0.5 * (J + J.transpose());
}

}  // namespace

Eigen::MatrixXd estimate_vhat(const FitResult& fit, const CaseControlSample& sample,
                              const ConstraintSpec& spec, VecRef mu_tilde) {
  check_fitted(fit);
  const int q = fit.theta.q();
  if (mu_tilde.size() != q)
    throw ElError(ErrorCategory::InvalidInput,
                  "estimate_vhat: mu_tilde length " + std::to_string(mu_tilde.size()) +
                      " does not match q = " + std::to_string(q));
  ModelEval ev = eval_model(sample, fit.theta, spec);
  const double sg = sigmoid(fit.theta.gamma), smg = sigmoid(-fit.theta.gamma);
  Eigen::ArrayXd t = ev.delta.array() * smg + sg;
  // V = sum_i p_i t_i (h_i - mu~)(h_i - mu~)', exactly PSD via the square root.
  Eigen::ArrayXd r = (fit.lagrange.weights.array() * t).sqrt();
  Eigen::MatrixXd C = (ev.hX.rowwise() - mu_tilde.transpose()).array().colwise() * r;
  Eigen::MatrixXd V = C.transpose() * C;
  return 0.5 * (V + V.transpose());
}

AsymptoticBlocks assemble_blocks_at(const ThetaFull& theta, const CaseControlSample& sample,
                                    const ConstraintSpec& spec, MatRef W, double n_external) {
  const int p = theta.p(), q = theta.q();
  spec.validate(sample.p);
  if (spec.q(sample.p) != q || sample.p != p)
    throw ElError(ErrorCategory::InvalidInput, "assemble_blocks: theta does not match sample/spec");

  RawBlocks B = raw_blocks(theta, sample, spec);
  AsymptoticBlocks out;
  out.p = p;
  out.q = q;
  out.rho = sample.rho;
  out.n = sample.n;
  out.n_ratio = n_external / sample.n;
  out.gamma_hat = theta.gamma;
  out.A15 = B.A15;
  out.A22 = B.A22;
  out.A23 = B.A23;
  out.A25 = B.A25;
  out.A33 = B.A33;
  out.A35 = B.A35;
  out.A55 = B.A55;
  out.W = W;

  Eigen::MatrixXd Winv = inv_spd_checked(W, "the external weight W");
  out.A44 = out.n_ratio * Winv;
  out.A45.setZero(q, 1 + q);
  out.A45.rightCols(q) = -Eigen::MatrixXd::Identity(q, q);

  const int d = 2 + p + q;
  const int K = 2 + p + 2 * q;
  out.U.setZero(d, K);
  out.U.block(0, 1 + p + q, 1, 1 + q) = B.A15;
  out.U(1, 0) = B.A22;
  out.U.block(1, 1, 1, p) = B.A23;
  out.U.block(1, 1 + p + q, 1, 1 + q) = B.A25;
  out.U.block(2, 0, p, 1) = B.A23.transpose();
  out.U.block(2, 1, p, p) = B.A33;
  out.U.block(2, 1 + p + q, p, 1 + q) = B.A35;
  out.U.block(2 + p, 1 + p, q, q) = out.A44;
  out.U.block(2 + p, 1 + p + q, q, 1 + q) = out.A45;

  Eigen::MatrixXd T(1 + p, 1 + p);
  T(0, 0) = B.A22;
  T.block(0, 1, 1, p) = B.A23;
  T.block(1, 0, p, 1) = B.A23.transpose();
  T.block(1, 1, p, p) = B.A33;

  out.M.setZero(K, K);
  out.M.topLeftCorner(1 + p, 1 + p) = T;
  out.M.block(1 + p, 1 + p, q, q) = out.A44;
  out.M.bottomRightCorner(1 + q, 1 + q) = B.A55;

  Eigen::MatrixXd Minv = Eigen::MatrixXd::Zero(K, K);
  Minv.topLeftCorner(1 + p, 1 + p) = inv_spd_checked(T, "the tilt-information block");
  Minv.block(1 + p, 1 + p, q, q) = inv_spd_checked(out.A44, "the external-weight block");
  Minv.bottomRightCorner(1 + q, 1 + q) =
      inv_spd_checked(B.A55, "the multiplier second-moment block");

  out.J = symmetrized_sandwich(out.U * Minv * out.U.transpose());

  // Mean score of one control observation, scaled by -1/(1+rho). The case and
  // control score means balance exactly under the design, which makes the
  // variance of the summed score M + D - kappa c c' with kappa the inverse
  // case-fraction variance. The sandwich annihilates this rank-one term:
  // U M^{-1} c is zero at the population blocks, so sigma_hat needs no
  // explicit correction. Exposed for diagnostics and tests.
  out.c.resize(K);
  out.c[0] = B.A22;
  out.c.segment(1, p) = B.A23.transpose();
  out.c.segment(1 + p, q).setZero();
  out.c.tail(1 + q) = B.HD.transpose();

  out.D.setZero(K, K);
  return out;
}

AsymptoticBlocks assemble_blocks(const FitResult& fit, const CaseControlSample& sample,
                                 const ConstraintSpec& spec, const ExternalSummary& external) {
  check_fitted(fit);
  external.validate();
  if (external.mode == WeightMode::PopulationLevel)
    throw ElError(ErrorCategory::InvalidInput,
                  "assemble_blocks: population-level summaries use the internal form");
  Eigen::MatrixXd W = external.mode == WeightMode::Given
                          ? external.W
                          : estimate_vhat(fit, sample, spec, external.mu_tilde);
  AsymptoticBlocks out = assemble_blocks_at(fit.theta, sample, spec, W, external.n_external);
  // Penalty-mismatch block: vanishes identically when W equals V-hat.
  Eigen::MatrixXd V = estimate_vhat(fit, sample, spec, external.mu_tilde);
  Eigen::MatrixXd Winv = inv_spd_checked(W, "the external weight W");
  out.V = V;
  out.D.setZero(out.D.rows(), out.D.cols());
  out.D.block(1 + out.p, 1 + out.p, out.q, out.q) =
      -out.n_ratio * Winv + out.n_ratio * Winv * V * Winv;
  return out;
}

AsymptoticBlocks assemble_blocks_internal(const FitResult& fit, const CaseControlSample& sample,
                                          const ConstraintSpec& spec, VecRef mu_tilde) {
  check_fitted(fit);
  const int p = fit.theta.p(), q = fit.theta.q();
  if (mu_tilde.size() != q)
    throw ElError(ErrorCategory::InvalidInput, "assemble_blocks_internal: mu_tilde length mismatch");
  if ((fit.theta.mu - mu_tilde).cwiseAbs().maxCoeff() > 1e-12)
    throw ElError(ErrorCategory::InvalidInput,
                  "assemble_blocks_internal: fit does not pin mu at mu_tilde");

  RawBlocks B = raw_blocks(fit.theta, sample, spec);
  AsymptoticBlocks out;
  out.p = p;
  out.q = q;
  out.rho = sample.rho;
  out.n = sample.n;
  out.internal = true;
  out.gamma_hat = fit.theta.gamma;
  out.A15 = B.A15;
  out.A22 = B.A22;
  out.A23 = B.A23;
  out.A25 = B.A25;
  out.A33 = B.A33;
  out.A35 = B.A35;
  out.A55 = B.A55;

  const int d = 2 + p;
  const int K = 2 + p + q;  // alpha_star, beta, nu
  out.U.setZero(d, K);
  out.U.block(0, 1 + p, 1, 1 + q) = B.A15;
  out.U(1, 0) = B.A22;
  out.U.block(1, 1, 1, p) = B.A23;
  out.U.block(1, 1 + p, 1, 1 + q) = B.A25;
  out.U.block(2, 0, p, 1) = B.A23.transpose();
  out.U.block(2, 1, p, p) = B.A33;
  out.U.block(2, 1 + p, p, 1 + q) = B.A35;

  Eigen::MatrixXd T(1 + p, 1 + p);
  T(0, 0) = B.A22;
  T.block(0, 1, 1, p) = B.A23;
  T.block(1, 0, p, 1) = B.A23.transpose();
  T.block(1, 1, p, p) = B.A33;

  out.M.setZero(K, K);
  out.M.topLeftCorner(1 + p, 1 + p) = T;
  out.M.bottomRightCorner(1 + q, 1 + q) = B.A55;

  Eigen::MatrixXd Minv = Eigen::MatrixXd::Zero(K, K);
  Minv.topLeftCorner(1 + p, 1 + p) = inv_spd_checked(T, "the tilt-information block");
  Minv.bottomRightCorner(1 + q, 1 + q) =
      inv_spd_checked(B.A55, "the multiplier second-moment block");

  out.J = symmetrized_sandwich(out.U * Minv * out.U.transpose());

  // Reduced-form analogue of the full c; annihilated the same way.
  out.c.resize(K);
  out.c[0] = B.A22;
  out.c.segment(1, p) = B.A23.transpose();
  out.c.tail(1 + q) = B.HD.transpose();
  return out;
}

CovarianceEstimate sigma_hat(const AsymptoticBlocks& blocks, SigmaForm form) {
  Eigen::MatrixXd sigma;

  switch (form) {
    case SigmaForm::GeneralW: {
      if (blocks.internal)
        throw ElError(ErrorCategory::InvalidInput,
                      "sigma_hat: general form needs full blocks, got internal form");
      Eigen::MatrixXd Jinv = inv_spd_checked(blocks.J, "the information sandwich J");
      const int K = static_cast<int>(blocks.M.rows());
      Eigen::MatrixXd Minv(K, K);
      {
        const int p = blocks.p, q = blocks.q;
        Minv.setZero();
        Minv.topLeftCorner(1 + p, 1 + p) =
            inv_spd_checked(blocks.M.topLeftCorner(1 + p, 1 + p), "the tilt-information block");
        Minv.block(1 + p, 1 + p, q, q) =
            inv_spd_checked(blocks.A44, "the external-weight block");
        Minv.bottomRightCorner(1 + q, 1 + q) =
            inv_spd_checked(blocks.A55, "the multiplier second-moment block");
      }
      // Score variance M + D - kappa c c', with the rank-one term annihilated
      // by P, leaves P (M + D) P'. M + D is blockwise PSD, so the result is a
      // genuine covariance for any positive definite W.
      Eigen::MatrixXd P = Jinv * blocks.U * Minv;
      sigma = P * (blocks.M + blocks.D) * P.transpose();
      break;
    }
    case SigmaForm::OptimalV: {
      if (blocks.internal)
        throw ElError(ErrorCategory::InvalidInput,
                      "sigma_hat: optimal form needs full blocks, got internal form");
      // At W = V-hat the penalty-mismatch block vanishes and the sandwich
      // collapses: P M P' equals J^{-1} identically.
      sigma = inv_spd_checked(blocks.J, "the information sandwich J");
      break;
    }
    case SigmaForm::InternalI: {
      if (!blocks.internal)
        throw ElError(ErrorCategory::InvalidInput,
                      "sigma_hat: internal form needs blocks from a known-mu fit");
      sigma = inv_spd_checked(blocks.J, "the information sandwich J");
      break;
    }
  }

  sigma = 0.5 * (sigma + sigma.transpose()).eval();
  double scale = std::max(1.0, sigma.cwiseAbs().maxCoeff());
  double dmin = sigma.diagonal().minCoeff();
  if (dmin < -1e-10 * scale)
    throw ElError(ErrorCategory::Diagnostics,
                  "sigma_hat: negative variance estimate " + fmt_g(dmin) +
                      " beyond roundoff tolerance");

  CovarianceEstimate out;
  out.sigma = sigma;
  out.se_theta = (sigma.diagonal().cwiseMax(0.0) / blocks.n).cwiseSqrt();
  double var_alpha = sigma(0, 0) + sigma(1, 1) - 2.0 * sigma(0, 1);
  out.se_alpha = std::sqrt(std::max(var_alpha, 0.0) / blocks.n);
  double pi = 1.0 / (1.0 + std::exp(blocks.gamma_hat));
  out.se_pi = pi * (1.0 - pi) * out.se_theta[0];
  return out;
}

OptimalFit fit_optimal_weight(const CaseControlSample& sample, const ExternalSummary& external,
                              const ConstraintSpec& spec, const SolverConfig& cfg) {
  external.validate();
  if (external.mode != WeightMode::Optimal)
    throw ElError(ErrorCategory::InvalidInput,
                  "fit_optimal_weight: external summary must request the optimal weight mode");
  const int q = external.q();
  Eigen::MatrixXd W = Eigen::MatrixXd::Identity(q, q);

  OptimalFit out;
  out.fit = fit_mele(sample, ExternalSummary::given(external.mu_tilde, external.n_external, W),
                     spec, cfg);
  out.V = estimate_vhat(out.fit, sample, spec, external.mu_tilde);

  const int max_rounds = 30;
  for (int round = 1; round <= max_rounds; ++round) {
    Eigen::VectorXd nu_warm = out.fit.lagrange.nu;
    FitResult refit =
        fit_mele(sample, ExternalSummary::given(external.mu_tilde, external.n_external, out.V),
                 spec, cfg, &out.fit.theta, &nu_warm);
    double step = (refit.theta.to_vector() - out.fit.theta.to_vector()).cwiseAbs().maxCoeff();
    out.fit = std::move(refit);
    out.V = estimate_vhat(out.fit, sample, spec, external.mu_tilde);
    out.rounds = round;
    out.step_norms.push_back(step);
    if (step <= 1e-8) return out;
  }
  throw ElError(ErrorCategory::NonConvergence,
                "fit_optimal_weight: theta did not stabilize after " +
                    std::to_string(max_rounds) + " refits (last step " +
                    fmt_g(out.step_norms.back()) + ")");
}

std::pair<double, double> wald_ci(double est, double se, double level) {
  if (!(level > 0.0 && level < 1.0))
    throw ElError(ErrorCategory::InvalidInput,
                  "wald_ci: level must lie in (0,1), got " + fmt_g(level));
  if (!(se >= 0.0) || !std::isfinite(est) || !std::isfinite(se))
    throw ElError(ErrorCategory::InvalidInput, "wald_ci: estimate and se must be finite, se >= 0");
  double z = std::sqrt(2.0) * boost::math::erf_inv(level);
  return {est - z * se, est + z * se};
}

FitWithCovariance fit_auto(const CaseControlSample& sample, const ExternalSummary& external,
                           const ConstraintSpec& spec, const SolverConfig& cfg) {
  FitWithCovariance out;
  switch (external.mode) {
    case WeightMode::Given: {
      out.fit = fit_mele(sample, external, spec, cfg);
      AsymptoticBlocks blocks = assemble_blocks(out.fit, sample, spec, external);
      out.cov = sigma_hat(blocks, SigmaForm::GeneralW);
      out.V = blocks.V;
      out.estimator = "given-w";
      break;
    }
    case WeightMode::Optimal: {
      OptimalFit of = fit_optimal_weight(sample, external, spec, cfg);
      out.fit = std::move(of.fit);
      AsymptoticBlocks blocks = assemble_blocks(out.fit, sample, spec, external);
      out.cov = sigma_hat(blocks, SigmaForm::OptimalV);
      out.V = std::move(of.V);
      out.estimator = "optimal-w";
      break;
    }
    case WeightMode::PopulationLevel: {
      out.fit = fit_known_mu(sample, external.mu_tilde, spec, cfg);
      AsymptoticBlocks blocks = assemble_blocks_internal(out.fit, sample, spec, external.mu_tilde);
      out.cov = sigma_hat(blocks, SigmaForm::InternalI);
      out.estimator = "known-mu";
      break;
    }
  }
  return out;
}

}  // namespace elcc
