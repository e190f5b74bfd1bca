#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "elcc/inference.hpp"
#include "elcc/simulation.hpp"
#include "elcc/solver.hpp"

using namespace elcc;

namespace {

GeneratedData study_data(std::uint64_t index = 0) {
  return generate_scheme(table_scheme("A1", 1.0), derive_seed(0x5eedULL, index));
}

double min_eigenvalue(const Eigen::MatrixXd& S) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  return es.eigenvalues().minCoeff();
}

}  // namespace

TEST_CASE("wald intervals match the normal quantiles") {
  // Reference endpoints computed from the standard normal quantile function.
  auto [lo1, hi1] = wald_ci(-0.75, 0.341, 0.95);
  CHECK(lo1 == doctest::Approx(-1.4183477187281586).epsilon(1e-12));
  CHECK(hi1 == doctest::Approx(-0.08165228127184154).epsilon(1e-10));
  auto [lo2, hi2] = wald_ci(1.2, 0.5, 0.80);
  CHECK(lo2 == doctest::Approx(0.5592242172276998).epsilon(1e-12));
  CHECK(hi2 == doctest::Approx(1.8407757827723001).epsilon(1e-12));
  // degenerate se collapses the interval
  auto [lo3, hi3] = wald_ci(2.0, 0.0, 0.99);
  CHECK(lo3 == 2.0);
  CHECK(hi3 == 2.0);
}

TEST_CASE("wald intervals reject bad inputs") {
  CHECK_THROWS_AS(wald_ci(0.0, 1.0, 0.0), ElError);
  CHECK_THROWS_AS(wald_ci(0.0, 1.0, 1.0), ElError);
  CHECK_THROWS_AS(wald_ci(0.0, -0.1, 0.9), ElError);
  CHECK_THROWS_AS(wald_ci(std::nan(""), 1.0, 0.9), ElError);
}

TEST_CASE("estimated optimal weight is symmetric positive semidefinite") {
  GeneratedData d = study_data();
  ConstraintSpec spec = ConstraintSpec::identity();
  FitResult f =
      fit_mele(d.sample, ExternalSummary::given(d.mu_tilde, d.n_external, default_fixed_w(2)),
               spec, {});
  Eigen::MatrixXd V = estimate_vhat(f, d.sample, spec, d.mu_tilde);
  REQUIRE(V.rows() == 2);
  REQUIRE(V.cols() == 2);
  CHECK((V - V.transpose()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(min_eigenvalue(V) >= 0.0);
  // h(X) is standardized-scale here, so the dispersion is order one
  CHECK(V.trace() > 0.1);
  CHECK(V.trace() < 100.0);
}

TEST_CASE("assembled blocks satisfy the internal structure identities") {
  GeneratedData d = study_data(1);
  ConstraintSpec spec = ConstraintSpec::identity();
  ExternalSummary ext = ExternalSummary::given(d.mu_tilde, d.n_external, default_fixed_w(2));
  FitResult f = fit_mele(d.sample, ext, spec, {});
  AsymptoticBlocks b = assemble_blocks(f, d.sample, spec, ext);

  CHECK(!b.internal);
  CHECK(b.n == d.sample.n);
  CHECK(b.rho == doctest::Approx(800.0 / 4000.0).epsilon(1e-12));

  // mean-score direction: tilt first column on top, zeros in the weight rows
  CHECK(b.c[0] == doctest::Approx(b.M(0, 0)).epsilon(1e-14));
  CHECK((b.c.segment(1, 2) - b.M.col(0).segment(1, 2)).cwiseAbs().maxCoeff() <= 1e-14);
  CHECK(b.c.segment(3, 2).cwiseAbs().maxCoeff() == 0.0);

  // the sandwich is symmetric and positive definite at a converged fit
  CHECK((b.J - b.J.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(min_eigenvalue(b.J) > 0.0);
  CHECK(min_eigenvalue(b.M) > 0.0);
}

TEST_CASE("the mean-score direction is annihilated by the sandwich") {
  // The design holds the case count fixed, which subtracts a rank-one term
  // kappa c c' from the score variance. The covariance needs no explicit
  // correction because U M^{-1} c vanishes in population; at a large single
  // draw evaluated at the exact population parameters the residual is pure
  // plug-in noise. A common-disease design with moderate slopes keeps every
  // block well conditioned, so the cancellation is visible at full strength.
  Scheme big = make_scheme("anni", -0.3, Eigen::Vector2d(0.8, 0.6), 29000, 21000, 1.0);
  GeneratedData d = generate_scheme(big, derive_seed(0xACE5, 7));
  ThetaFull t;
  t.gamma = std::log((1.0 - big.p_true) / big.p_true);
  t.alpha_star = big.alpha + t.gamma;
  t.beta = big.beta;
  t.mu = big.mu_true;
  ConstraintSpec spec = ConstraintSpec::identity();
  AsymptoticBlocks b =
      assemble_blocks_at(t, d.sample, spec, default_fixed_w(2), d.n_external);
  Eigen::VectorXd v = b.J.ldlt().solve(b.U * b.M.ldlt().solve(b.c));
  CHECK(v.cwiseAbs().maxCoeff() <= 0.05);

  // same cancellation in the reduced form
  FitResult f = fit_known_mu(d.sample, d.mu_true, spec, {});
  AsymptoticBlocks bi = assemble_blocks_internal(f, d.sample, spec, d.mu_true);
  Eigen::VectorXd vi = bi.J.ldlt().solve(bi.U * bi.M.ldlt().solve(bi.c));
  CHECK(vi.cwiseAbs().maxCoeff() <= 0.05);
}

TEST_CASE("general-weight covariance at the optimal weight collapses to the optimal form") {
  GeneratedData d = study_data(2);
  ConstraintSpec spec = ConstraintSpec::identity();
  OptimalFit of =
      fit_optimal_weight(d.sample, ExternalSummary::optimal(d.mu_tilde, d.n_external), spec, {});

  ExternalSummary at_v = ExternalSummary::given(d.mu_tilde, d.n_external, of.V);
  AsymptoticBlocks bg = assemble_blocks(of.fit, d.sample, spec, at_v);
  CovarianceEstimate general = sigma_hat(bg, SigmaForm::GeneralW);

  AsymptoticBlocks bo =
      assemble_blocks(of.fit, d.sample, spec, ExternalSummary::optimal(d.mu_tilde, d.n_external));
  CovarianceEstimate optimal = sigma_hat(bo, SigmaForm::OptimalV);

  double scale = optimal.sigma.cwiseAbs().maxCoeff();
  CHECK((general.sigma - optimal.sigma).cwiseAbs().maxCoeff() <= 1e-6 * scale);
  CHECK(general.se_alpha == doctest::Approx(optimal.se_alpha).epsilon(1e-6));
}

TEST_CASE("information never shrinks when a moment is added") {
  // Blocks with h = (x1, x2) against h = (x1) at the same theta: padding the
  // smaller sandwich with zeros must stay below the larger one.
  GeneratedData d = study_data(4);
  ThetaFull t;
  t.gamma = 2.4;
  t.alpha_star = -2.3;
  t.beta = Eigen::Vector2d(-1.9, 1.9);
  t.mu = Eigen::Vector2d(0.05, -0.02);

  ConstraintSpec full = ConstraintSpec::identity();
  ConstraintSpec sub = ConstraintSpec::subset({0});

  Eigen::MatrixXd V2 = Eigen::MatrixXd::Identity(2, 2);
  V2(0, 1) = V2(1, 0) = 0.2;
  AsymptoticBlocks b2 = assemble_blocks_at(t, d.sample, full, V2, d.n_external);

  ThetaFull t1 = t;
  t1.mu = t.mu.head(1);
  AsymptoticBlocks b1 =
      assemble_blocks_at(t1, d.sample, sub, V2.topLeftCorner(1, 1), d.n_external);

  const int d2 = static_cast<int>(b2.J.rows());
  const int d1 = static_cast<int>(b1.J.rows());
  REQUIRE(d2 == d1 + 1);
  // embed: parameter order is gamma, alpha*, beta, mu, so the pad goes last
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(d2, d2);
  P.topLeftCorner(d1, d1) = b1.J;
  CHECK(min_eigenvalue(b2.J - P) >= -1e-8);
}

TEST_CASE("derived standard errors obey their algebraic definitions") {
  GeneratedData d = study_data(3);
  ConstraintSpec spec = ConstraintSpec::identity();
  ExternalSummary ext = ExternalSummary::given(d.mu_tilde, d.n_external, default_fixed_w(2));
  FitResult f = fit_mele(d.sample, ext, spec, {});
  AsymptoticBlocks b = assemble_blocks(f, d.sample, spec, ext);
  CovarianceEstimate cov = sigma_hat(b, SigmaForm::GeneralW);

  const double n = static_cast<double>(d.sample.n);
  CHECK(cov.se_theta[0] ==
        doctest::Approx(std::sqrt(cov.sigma(0, 0) / n)).epsilon(1e-12));
  double var_alpha = cov.sigma(0, 0) + cov.sigma(1, 1) - 2.0 * cov.sigma(0, 1);
  CHECK(cov.se_alpha == doctest::Approx(std::sqrt(var_alpha / n)).epsilon(1e-12));
  double pi = f.theta.case_proportion();
  CHECK(cov.se_pi == doctest::Approx(pi * (1.0 - pi) * cov.se_theta[0]).epsilon(1e-12));
  CHECK(cov.se_theta.minCoeff() >= 0.0);
}

TEST_CASE("iterated optimal weight stabilizes and certifies its step sizes") {
  GeneratedData d = study_data(6);
  OptimalFit of = fit_optimal_weight(
      d.sample, ExternalSummary::optimal(d.mu_tilde, d.n_external), ConstraintSpec::identity(),
      {});
  CHECK(of.fit.converged);
  CHECK(of.rounds >= 1);
  REQUIRE(!of.step_norms.empty());
  CHECK(of.step_norms.back() <= 1e-8);
  CHECK(min_eigenvalue(of.V) >= 0.0);
  // refusal path: a given-mode summary is the wrong entry point
  CHECK_THROWS_AS(fit_optimal_weight(d.sample,
                                     ExternalSummary::given(d.mu_tilde, d.n_external,
                                                            default_fixed_w(2)),
                                     ConstraintSpec::identity(), {}),
                  ElError);
}

TEST_CASE("the dispatcher labels each weight mode and returns matched covariance") {
  GeneratedData d = study_data(7);
  ConstraintSpec spec = ConstraintSpec::identity();

  FitWithCovariance given =
      fit_auto(d.sample, ExternalSummary::given(d.mu_tilde, d.n_external, default_fixed_w(2)),
               spec, {});
  CHECK(given.estimator == "given-w");
  CHECK(given.cov.sigma.rows() == 6);  // gamma, alpha*, beta (2), mu (2)

  FitWithCovariance opt =
      fit_auto(d.sample, ExternalSummary::optimal(d.mu_tilde, d.n_external), spec, {});
  CHECK(opt.estimator == "optimal-w");
  CHECK(opt.cov.sigma.rows() == 6);
  CHECK(opt.V.rows() == 2);

  FitWithCovariance known = fit_auto(d.sample, ExternalSummary::population(d.mu_true), spec, {});
  CHECK(known.estimator == "known-mu");
  CHECK(known.cov.sigma.rows() == 4);  // reduced form: gamma, alpha*, beta

  // treating the summary as exact is the most informative use of it
  CHECK(known.cov.se_alpha <= opt.cov.se_alpha + 1e-6);
  CHECK(opt.cov.se_alpha <= given.cov.se_alpha + 1e-3);
}
