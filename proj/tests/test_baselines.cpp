#include <doctest.h>

#include <Eigen/Dense>

#include "elcc/baselines.hpp"
#include "elcc/simulation.hpp"

using namespace elcc;

namespace {

// 16-point dataset with overlapping classes; reference coefficients and
// standard errors computed with an independent Newton implementation.
CaseControlSample oracle_sample() {
  Eigen::MatrixXd X(16, 2);
  X << 0.5, 1.2, -0.3, 0.4, 1.1, -0.8, 0.9, 0.1, -1.4, 0.6, 0.2, -1.0, -0.7, -0.3, 1.6, 0.9,
      -0.2, 1.5, 0.4, -0.6, -1.0, -1.2, 0.8, 0.3, -0.6, 0.8, 1.3, -0.4, -0.9, 0.2, 0.1, 1.1;
  Eigen::VectorXi y(16);
  y << 1, 0, 0, 1, 0, 1, 0, 1, 1, 0, 1, 0, 0, 1, 0, 1;
  return CaseControlSample(y, X);
}

}  // namespace

TEST_CASE("prospective mle reproduces reference coefficients and errors") {
  MleResult m = fit_prospective_mle(oracle_sample());
  CHECK(m.converged);
  CHECK(m.alpha_hat == doctest::Approx(-0.18000225659700958).epsilon(1e-8));
  CHECK(m.beta_hat[0] == doctest::Approx(0.9501874436649712).epsilon(1e-8));
  CHECK(m.beta_hat[1] == doctest::Approx(0.38510947838391).epsilon(1e-8));
  CHECK(m.se[0] == doctest::Approx(0.5663971431062909).epsilon(1e-6));
  CHECK(m.se[1] == doctest::Approx(0.6806758343489958).epsilon(1e-6));
  CHECK(m.se[2] == doctest::Approx(0.6852360605910074).epsilon(1e-6));
  CHECK(m.naive_case_prop == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("fitted probabilities average to the sample case fraction") {
  Scheme s = table_scheme("B1", 0.0);
  GeneratedData d = generate_scheme(s, derive_seed(99, 0));
  MleResult m = fit_prospective_mle(d.sample);
  CHECK(m.converged);
  double acc = 0.0;
  for (int i = 0; i < d.sample.n; ++i) {
    double z = m.alpha_hat + m.beta_hat.dot(d.sample.X.row(i));
    acc += 1.0 / (1.0 + std::exp(-z));
  }
  double frac = static_cast<double>(d.sample.n_case) / d.sample.n;
  CHECK(acc / d.sample.n == doctest::Approx(frac).epsilon(1e-9));
}

TEST_CASE("perfectly separated data raises a separation error") {
  Eigen::MatrixXd X(8, 1);
  X << -4.0, -3.0, -2.0, -1.0, 1.0, 2.0, 3.0, 4.0;
  Eigen::VectorXi y(8);
  y << 0, 0, 0, 0, 1, 1, 1, 1;
  try {
    fit_prospective_mle(CaseControlSample(y, X));
    FAIL("expected a separation error");
  } catch (const ElError& e) {
    CHECK(e.category() == ErrorCategory::Separation);
  }
}

TEST_CASE("slope estimates are consistent under case-control sampling") {
  // The design shifts only the intercept; slopes concentrate at the truth.
  Scheme s = table_scheme("A1", 0.0);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(2);
  const int R = 10;
  for (int r = 0; r < R; ++r) {
    GeneratedData d = generate_scheme(s, derive_seed(7, r));
    MleResult m = fit_prospective_mle(d.sample);
    acc += m.beta_hat;
  }
  acc /= R;
  CHECK(acc[0] == doctest::Approx(-2.0).epsilon(0.05));
  CHECK(acc[1] == doctest::Approx(2.0).epsilon(0.05));
}
