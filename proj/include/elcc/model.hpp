#pragma once

#include "elcc/types.hpp"

namespace elcc {

// P(Y=1 | x) under the prospective logistic model.
double logistic_prob(VecRef x, double alpha, VecRef beta);

// Stable sigmoid 1/(1+e^-z).
double sigmoid(double z);

// Density tilt exp(alpha_star + beta'x), computed in log space and clamped to
// [1e-300, 1e300]; `saturated` reports whether the clamp engaged.
double tilt(VecRef x, double alpha_star, VecRef beta, bool* saturated = nullptr);

// Estimating function H(x; theta): first component delta - 1 pins the tilted
// density to mass one, remaining q components pin the h(x) moments under the
// case-control mixture to mu. Jacobian columns follow the gamma|alpha_star|beta|mu
// layout when requested.
HValue eval_H(VecRef x, const ThetaFull& theta, const ConstraintSpec& spec,
              bool with_jacobian = false);

// Batched per-sample quantities shared by the solver and the covariance blocks.
struct ModelEval {
  Eigen::VectorXd delta;  // n, tilt at each row
  Eigen::MatrixXd hX;     // n x q
  Eigen::MatrixXd H;      // n x (1+q), row i = H(x_i; theta)'
  bool saturated = false;
};

ModelEval eval_model(const CaseControlSample& sample, const ThetaFull& theta,
                     const ConstraintSpec& spec);

}  // namespace elcc
