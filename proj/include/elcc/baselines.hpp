#pragma once

#include "elcc/types.hpp"

namespace elcc {

// Prospective logistic MLE on case-control data. The slope is consistent; the
// intercept and the naive case proportion n1/n absorb the sampling design, which
// is exactly what the comparator columns of the study report.
struct MleResult {
  double alpha_hat = 0.0;
  Eigen::VectorXd beta_hat;
  Eigen::VectorXd se;  // 1 + p, intercept first, from observed information
  double naive_case_prop = 0.0;
  int iterations = 0;
  bool converged = false;
};

MleResult fit_prospective_mle(const CaseControlSample& sample, const SolverConfig& cfg = {});

}  // namespace elcc
