#include "elcc/model.hpp"

#include <cmath>

namespace elcc {

namespace {
constexpr double kTiltFloor = 1e-300;
constexpr double kTiltCeil = 1e300;
// log bounds for the clamp; exp is only taken inside this range.
const double kLogFloor = std::log(kTiltFloor);
const double kLogCeil = std::log(kTiltCeil);
}  // namespace

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

double logistic_prob(VecRef x, double alpha, VecRef beta) {
  if (x.size() != beta.size())
    throw ElError(ErrorCategory::InvalidInput,
                  "logistic_prob: x has length " + std::to_string(x.size()) + ", beta has " +
                      std::to_string(beta.size()));
  double z = alpha + beta.dot(x);
  if (!std::isfinite(z))
    throw ElError(ErrorCategory::InvalidInput, "logistic_prob: non-finite linear predictor");
  return sigmoid(z);
}

double tilt(VecRef x, double alpha_star, VecRef beta, bool* saturated) {
  double z = alpha_star + beta.dot(x);
  if (!std::isfinite(z))
    throw ElError(ErrorCategory::InvalidInput, "tilt: non-finite linear predictor");
  bool sat = false;
  double out;
  if (z <= kLogFloor) {
    out = kTiltFloor;
    sat = true;
  } else if (z >= kLogCeil) {
    out = kTiltCeil;
    sat = true;
  } else {
    out = std::exp(z);
  }
  if (saturated) *saturated = sat;
  return out;
}

HValue eval_H(VecRef x, const ThetaFull& theta, const ConstraintSpec& spec, bool with_jacobian) {
  const int p = theta.p();
  const int q = theta.q();
  if (x.size() != p)
    throw ElError(ErrorCategory::InvalidInput,
                  "eval_H: x has length " + std::to_string(x.size()) + ", beta has " +
                      std::to_string(p));
  spec.validate(p);
  if (spec.q(p) != q)
    throw ElError(ErrorCategory::InvalidInput,
                  "eval_H: constraint spec gives q = " + std::to_string(spec.q(p)) +
                      " but theta.mu has length " + std::to_string(q));

  HValue out;
  bool sat = false;
  const double delta = tilt(x, theta.alpha_star, theta.beta, &sat);
  const double sg = sigmoid(theta.gamma);    // e^g / (1+e^g)
  const double smg = sigmoid(-theta.gamma);  // 1 / (1+e^g)
  // Mixture weight on h(x): (delta + e^g) / (1+e^g), stably delta*smg + sg.
  const double t = delta * smg + sg;
  const Eigen::VectorXd hx = spec.apply(x);

  out.value.resize(1 + q);
  out.value[0] = delta - 1.0;
  out.value.tail(q) = t * hx - theta.mu;
  out.saturated = sat;

  if (with_jacobian) {
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(1 + q, 2 + p + q);
    // First component depends on (alpha_star, beta) only.
    J(0, 1) = delta;
    J.block(0, 2, 1, p) = delta * x.transpose();
    // dt/dgamma = (1 - delta) * sg * smg, dt/dalpha_star = delta * smg.
    J.block(1, 0, q, 1) = ((1.0 - delta) * sg * smg) * hx;
    J.block(1, 1, q, 1) = (delta * smg) * hx;
    J.block(1, 2, q, p) = (delta * smg) * (hx * x.transpose());
    J.block(1, 2 + p, q, q) = -Eigen::MatrixXd::Identity(q, q);
    out.jacobian = std::move(J);
  }
  return out;
}

ModelEval eval_model(const CaseControlSample& sample, const ThetaFull& theta,
                     const ConstraintSpec& spec) {
  const int p = theta.p();
  const int q = theta.q();
  if (sample.p != p)
    throw ElError(ErrorCategory::InvalidInput,
                  "eval_model: sample has p = " + std::to_string(sample.p) + ", theta.beta has " +
                      std::to_string(p));
  spec.validate(p);
  if (spec.q(p) != q)
    throw ElError(ErrorCategory::InvalidInput,
                  "eval_model: constraint spec q = " + std::to_string(spec.q(p)) +
                      " does not match theta.mu length " + std::to_string(q));
  if (!std::isfinite(theta.gamma) || !std::isfinite(theta.alpha_star) || !theta.beta.allFinite() ||
      !theta.mu.allFinite())
    throw ElError(ErrorCategory::InvalidInput, "eval_model: theta has non-finite entries");

  ModelEval ev;
  ev.hX = spec.apply_rows(sample.X);

  Eigen::ArrayXd z = (sample.X * theta.beta).array() + theta.alpha_star;
  bool sat = (z < kLogFloor).any() || (z > kLogCeil).any();
  ev.delta = z.min(kLogCeil).max(kLogFloor).exp().matrix();
  ev.saturated = sat;

  const double sg = sigmoid(theta.gamma);
  const double smg = sigmoid(-theta.gamma);
  Eigen::ArrayXd t = ev.delta.array() * smg + sg;

  ev.H.resize(sample.n, 1 + q);
  ev.H.col(0) = ev.delta.array() - 1.0;
  ev.H.rightCols(q) = (ev.hX.array().colwise() * t).rowwise() - theta.mu.transpose().array();
  return ev;
}

}  // namespace elcc
