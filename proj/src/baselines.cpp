#include "elcc/baselines.hpp"

#include <cmath>

#include "elcc/model.hpp"

namespace elcc {

MleResult fit_prospective_mle(const CaseControlSample& sample, const SolverConfig& cfg) {
  const int n = sample.n, p = sample.p;
  Eigen::MatrixXd Xt(n, p + 1);  // design with intercept column
  Xt.col(0).setOnes();
  Xt.rightCols(p) = sample.X;
  Eigen::VectorXd yd = sample.y.cast<double>();

  Eigen::VectorXd coef = Eigen::VectorXd::Zero(p + 1);
  // Moment start for the intercept: logit of the case fraction.
  coef[0] = std::log(static_cast<double>(sample.n_case) / sample.n_control);

  auto loglik = [&](const Eigen::VectorXd& c) {
    Eigen::ArrayXd eta = (Xt * c).array();
    // sum y*eta - log(1+e^eta), stable via log1p on the negative side.
    double ll = 0.0;
    for (int i = 0; i < n; ++i) {
      double e = eta[i];
      ll += yd[i] * e - (e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e)));
    }
    return ll;
  };

  MleResult out;
  double ll = loglik(coef);
  Eigen::VectorXd score(p + 1);
  Eigen::MatrixXd info(p + 1, p + 1);

  // A score that vanishes because every observation is classified perfectly is
  // the divergent-slope limit, not an interior optimum. A finite MLE balances
  // signed residuals, so it cannot drive them all to zero at once.
  auto reject_if_separated = [&](const Eigen::ArrayXd& prob) {
    double worst = (yd.array() - prob).abs().maxCoeff();
    if (worst < 1e-4 && coef.tail(p).norm() > 5.0)
      throw ElError(ErrorCategory::Separation,
                    "prospective mle: data are separated (largest residual " +
                        std::to_string(worst) + ", slope norm " +
                        std::to_string(coef.tail(p).norm()) + ")");
  };

  const int max_iter = cfg.max_inner_iterations;
  for (int it = 0; it < max_iter; ++it) {
    Eigen::ArrayXd eta = (Xt * coef).array();
    Eigen::ArrayXd prob = eta.unaryExpr([](double z) { return sigmoid(z); });
    score = Xt.transpose() * (yd.array() - prob).matrix();
    out.iterations = it;
    if (score.norm() <= cfg.outer_tol) {
      reject_if_separated(prob);
      out.converged = true;
      break;
    }
    Eigen::ArrayXd wt = prob * (1.0 - prob);
    info = Xt.transpose() * wt.matrix().asDiagonal() * Xt;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
      throw ElError(ErrorCategory::Separation,
                    "prospective mle: information matrix not positive definite (iteration " +
                        std::to_string(it) + ")");
    Eigen::VectorXd step = ldlt.solve(score);

    // Step-halve until the log likelihood does not decrease.
    double scale = 1.0;
    double ll_new = 0.0;
    bool accepted = false;
    for (int h = 0; h < 40; ++h) {
      ll_new = loglik(coef + scale * step);
      if (std::isfinite(ll_new) && ll_new >= ll - 1e-12 * (1.0 + std::abs(ll))) {
        accepted = true;
        break;
      }
      scale *= 0.5;
    }
    if (!accepted)
      throw ElError(ErrorCategory::NonConvergence,
                    "prospective mle: line search failed at iteration " + std::to_string(it) +
                        ", score norm " + std::to_string(score.norm()));
    coef += scale * step;
    ll = ll_new;

    // Complete or quasi-complete separation: fitted probabilities degenerate while
    // the slope norm diverges. Report rather than return a meaningless fit.
    double margin = std::min(prob.minCoeff(), 1.0 - prob.maxCoeff());
    if (coef.tail(p).norm() > 50.0 && margin < 1e-8)
      throw ElError(ErrorCategory::Separation,
                    "prospective mle: data are separated (slope norm " +
                        std::to_string(coef.tail(p).norm()) + ", degenerate fitted probabilities)");
  }
  if (!out.converged) {
    Eigen::ArrayXd eta = (Xt * coef).array();
    Eigen::ArrayXd prob = eta.unaryExpr([](double z) { return sigmoid(z); });
    score = Xt.transpose() * (yd.array() - prob).matrix();
    if (score.norm() <= cfg.outer_tol) {
      reject_if_separated(prob);
      out.converged = true;
    } else {
      throw ElError(ErrorCategory::NonConvergence,
                    "prospective mle: score norm " + std::to_string(score.norm()) + " after " +
                        std::to_string(max_iter) + " iterations");
    }
  }

  Eigen::ArrayXd eta = (Xt * coef).array();
  Eigen::ArrayXd prob = eta.unaryExpr([](double z) { return sigmoid(z); });
  Eigen::ArrayXd wt = prob * (1.0 - prob);
  info = Xt.transpose() * wt.matrix().asDiagonal() * Xt;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
  Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(p + 1, p + 1));

  out.alpha_hat = coef[0];
  out.beta_hat = coef.tail(p);
  out.se = cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  out.naive_case_prop = static_cast<double>(sample.n_case) / sample.n;
  return out;
}

}  // namespace elcc
