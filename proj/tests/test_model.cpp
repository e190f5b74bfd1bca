#include <doctest.h>

#include <Eigen/Dense>

#include "elcc/model.hpp"
#include "elcc/simulation.hpp"

using namespace elcc;

namespace {

ThetaFull theta_2d() {
  ThetaFull t;
  t.gamma = 0.8;
  t.alpha_star = -1.1;
  t.beta = Eigen::Vector2d(0.6, -0.9);
  t.mu = Eigen::Vector2d(0.15, -0.05);
  return t;
}

}  // namespace

TEST_CASE("sigmoid is stable over the whole real line") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(sigmoid(800.0) == 1.0);
  CHECK(sigmoid(-800.0) == 0.0);
  CHECK(sigmoid(0.3) == doctest::Approx(0.574442516811659).epsilon(1e-15));
  CHECK(sigmoid(5.0) + sigmoid(-5.0) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("logistic_prob matches the sigmoid of the linear predictor") {
  Eigen::VectorXd x(2);
  x << 1.0, 2.0;
  // 0.3 + 0.4 - 0.4 = 0.3
  CHECK(logistic_prob(x, 0.3, Eigen::Vector2d(0.4, -0.2)) ==
        doctest::Approx(0.574442516811659).epsilon(1e-15));
}

TEST_CASE("tilt round-trips through the log for moderate arguments") {
  Eigen::VectorXd x(2);
  x << 0.7, -1.3;
  double as = -2.4;
  Eigen::VectorXd beta = Eigen::Vector2d(1.1, 0.5);
  bool sat = true;
  double d = tilt(x, as, beta, &sat);
  CHECK(!sat);
  CHECK(std::log(d) == doctest::Approx(as + beta.dot(x)).epsilon(1e-12));
}

TEST_CASE("tilt clamps instead of overflowing and reports saturation") {
  Eigen::VectorXd x(1);
  x << 1.0;
  Eigen::VectorXd beta(1);
  beta << 800.0;
  bool sat = false;
  double d = tilt(x, 0.0, beta, &sat);
  CHECK(sat);
  CHECK(d == 1e300);
  beta << -800.0;
  d = tilt(x, 0.0, beta, &sat);
  CHECK(sat);
  CHECK(d == 1e-300);
}

TEST_CASE("the density-mass component of H ignores gamma and mu") {
  Eigen::VectorXd x(2);
  x << 0.4, -0.2;
  ThetaFull a = theta_2d();
  ThetaFull b = a;
  b.gamma = -2.5;
  b.mu = Eigen::Vector2d(3.0, 4.0);
  ConstraintSpec spec = ConstraintSpec::identity();
  CHECK(eval_H(x, a, spec).value[0] == eval_H(x, b, spec).value[0]);
}

TEST_CASE("moment components shift exactly with mu") {
  Eigen::VectorXd x(2);
  x << 0.4, -0.2;
  ThetaFull a = theta_2d();
  ThetaFull b = a;
  b.mu = a.mu + Eigen::Vector2d(0.5, -1.0).eval();
  ConstraintSpec spec = ConstraintSpec::identity();
  Eigen::VectorXd ha = eval_H(x, a, spec).value;
  Eigen::VectorXd hb = eval_H(x, b, spec).value;
  // the target enters with a minus sign, so the difference is mu_b - mu_a
  CHECK(ha[1] - hb[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(ha[2] - hb[2] == doctest::Approx(-1.0).epsilon(1e-15));
}

TEST_CASE("H jacobian matches central differences across random draws") {
  Rng rng(2024);
  ConstraintSpec spec = ConstraintSpec::identity();
  double worst = 0.0;
  for (int rep = 0; rep < 50; ++rep) {
    ThetaFull t;
    t.gamma = rng.normal();
    t.alpha_star = -1.0 + 0.8 * rng.normal();
    t.beta = Eigen::Vector2d(rng.normal(), rng.normal());
    t.mu = Eigen::Vector2d(0.3 * rng.normal(), 0.3 * rng.normal());
    Eigen::VectorXd x(2);
    x << rng.normal(), rng.normal();

    HValue hv = eval_H(x, t, spec, true);
    REQUIRE(hv.jacobian.has_value());
    const Eigen::MatrixXd& J = *hv.jacobian;
    REQUIRE(J.rows() == 3);
    REQUIRE(J.cols() == 6);

    Eigen::VectorXd v0 = t.to_vector();
    for (int k = 0; k < 6; ++k) {
      double h = 1e-6 * (1.0 + std::abs(v0[k]));
      Eigen::VectorXd vp = v0, vm = v0;
      vp[k] += h;
      vm[k] -= h;
      Eigen::VectorXd fp = eval_H(x, ThetaFull::from_vector(vp, 2, 2), spec).value;
      Eigen::VectorXd fm = eval_H(x, ThetaFull::from_vector(vm, 2, 2), spec).value;
      Eigen::VectorXd fd = (fp - fm) / (2.0 * h);
      double scale = std::max(1.0, fd.norm());
      worst = std::max(worst, (J.col(k) - fd).norm() / scale);
    }
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("gamma and mu leave the first jacobian row at zero") {
  Eigen::VectorXd x(2);
  x << 0.4, -0.2;
  HValue hv = eval_H(x, theta_2d(), ConstraintSpec::identity(), true);
  const Eigen::MatrixXd& J = *hv.jacobian;
  CHECK(J(0, 0) == 0.0);  // d H_0 / d gamma
  CHECK(J(0, 4) == 0.0);  // d H_0 / d mu_1
  CHECK(J(0, 5) == 0.0);  // d H_0 / d mu_2
}

TEST_CASE("batched evaluation agrees with the scalar path") {
  Eigen::VectorXi y(5);
  y << 1, 1, 0, 0, 0;
  Eigen::MatrixXd X(5, 2);
  X << 0.5, 1.0, -0.3, 0.2, 1.2, -0.7, -1.0, 0.4, 0.1, -0.1;
  CaseControlSample s(y, X);
  ThetaFull t = theta_2d();
  ConstraintSpec spec = ConstraintSpec::identity();
  ModelEval me = eval_model(s, t, spec);
  REQUIRE(me.H.rows() == 5);
  for (int i = 0; i < 5; ++i) {
    Eigen::VectorXd hi = eval_H(X.row(i).transpose(), t, spec).value;
    CHECK((me.H.row(i).transpose() - hi).cwiseAbs().maxCoeff() <= 1e-14);
  }
}

TEST_CASE("subset constraints flow through H") {
  Eigen::VectorXd x(3);
  x << 0.4, -0.2, 0.9;
  ThetaFull t;
  t.gamma = 0.3;
  t.alpha_star = -0.8;
  t.beta = Eigen::Vector3d(0.2, -0.1, 0.5);
  t.mu = Eigen::VectorXd::Constant(1, 0.1);
  ConstraintSpec spec = ConstraintSpec::subset({2});
  HValue hv = eval_H(x, t, spec);
  REQUIRE(hv.value.size() == 2);
  // moment row uses h(x) = x_2
  double delta = tilt(x, t.alpha_star, t.beta);
  double tt = delta * sigmoid(-t.gamma) + sigmoid(t.gamma);
  CHECK(hv.value[1] == doctest::Approx(tt * 0.9 - 0.1).epsilon(1e-14));
}
