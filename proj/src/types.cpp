#include "elcc/types.hpp"

#include <cmath>

namespace elcc {

const char* error_category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::InvalidInput: return "invalid-input";
    case ErrorCategory::Schema: return "schema";
    case ErrorCategory::Config: return "config";
    case ErrorCategory::Infeasible: return "constraint-infeasible";
    case ErrorCategory::NonConvergence: return "non-convergence";
    case ErrorCategory::Identifiability: return "identifiability";
    case ErrorCategory::Separation: return "separation";
    case ErrorCategory::SingularBlock: return "singular-block";
    case ErrorCategory::Diagnostics: return "diagnostics";
    case ErrorCategory::Protocol: return "protocol";
    case ErrorCategory::Budget: return "budget";
  }
  return "unknown";
}

CaseControlSample::CaseControlSample(Eigen::VectorXi outcomes, Eigen::MatrixXd covariates)
    : y(std::move(outcomes)), X(std::move(covariates)) {
  n = static_cast<int>(y.size());
  p = static_cast<int>(X.cols());
  if (n == 0 || X.rows() != n)
    throw ElError(ErrorCategory::InvalidInput,
                  "sample: outcome length " + std::to_string(n) + " does not match covariate rows " +
                      std::to_string(X.rows()));
  if (p == 0) throw ElError(ErrorCategory::InvalidInput, "sample: no covariate columns");
  for (int i = 0; i < n; ++i) {
    if (y[i] != 0 && y[i] != 1)
      throw ElError(ErrorCategory::InvalidInput,
                    "sample: outcome at row " + std::to_string(i) + " is " + std::to_string(y[i]) +
                        ", expected 0 or 1");
  }
  if (!X.allFinite())
    throw ElError(ErrorCategory::InvalidInput, "sample: covariates contain non-finite entries");
  n_case = y.sum();
  n_control = n - n_case;
  if (n_case < 1 || n_control < 1)
    throw ElError(ErrorCategory::InvalidInput,
                  "sample: need at least one case and one control, got " + std::to_string(n_case) +
                      " cases / " + std::to_string(n_control) + " controls");
  rho = static_cast<double>(n_case) / static_cast<double>(n_control);

  // Design condition: the centered covariate matrix must have full column rank,
  // otherwise the tilt parameters are not identified. Refuse rather than regularize.
  Eigen::MatrixXd centered = X.rowwise() - X.colwise().mean();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(centered);
  qr.setThreshold(1e-10);
  if (qr.rank() < p) {
    // Name a constant column if that is the cause; otherwise report collinearity.
    for (int j = 0; j < p; ++j) {
      double spread = centered.col(j).cwiseAbs().maxCoeff();
      if (spread <= 1e-12 * (1.0 + X.col(j).cwiseAbs().maxCoeff()))
        throw ElError(ErrorCategory::InvalidInput,
                      "sample: covariate column " + std::to_string(j) + " is constant");
    }
    throw ElError(ErrorCategory::InvalidInput,
                  "sample: centered covariates have rank " + std::to_string(qr.rank()) + " < p = " +
                      std::to_string(p) + " (collinear columns)");
  }
}

ExternalSummary ExternalSummary::given(Eigen::VectorXd mu_tilde, double n_external, Eigen::MatrixXd W) {
  ExternalSummary s;
  s.mu_tilde = std::move(mu_tilde);
  s.n_external = n_external;
  s.mode = WeightMode::Given;
  s.W = std::move(W);
  s.validate();
  return s;
}

ExternalSummary ExternalSummary::optimal(Eigen::VectorXd mu_tilde, double n_external) {
  ExternalSummary s;
  s.mu_tilde = std::move(mu_tilde);
  s.n_external = n_external;
  s.mode = WeightMode::Optimal;
  s.validate();
  return s;
}

ExternalSummary ExternalSummary::population(Eigen::VectorXd mu_tilde) {
  ExternalSummary s;
  s.mu_tilde = std::move(mu_tilde);
  s.n_external = 0.0;
  s.mode = WeightMode::PopulationLevel;
  s.validate();
  return s;
}

void ExternalSummary::validate() const {
  if (mu_tilde.size() == 0)
    throw ElError(ErrorCategory::InvalidInput, "external summary: mu_tilde is empty");
  if (!mu_tilde.allFinite())
    throw ElError(ErrorCategory::InvalidInput, "external summary: mu_tilde has non-finite entries");
  if (mode != WeightMode::PopulationLevel && !(n_external >= 1.0))
    throw ElError(ErrorCategory::InvalidInput,
                  "external summary: n_external must be >= 1, got " + std::to_string(n_external));
  if (mode == WeightMode::Given) {
    const int q = this->q();
    if (W.rows() != q || W.cols() != q)
      throw ElError(ErrorCategory::InvalidInput,
                    "external summary: W is " + std::to_string(W.rows()) + "x" +
                        std::to_string(W.cols()) + ", expected " + std::to_string(q) + "x" +
                        std::to_string(q));
    if (!W.allFinite() || (W - W.transpose()).cwiseAbs().maxCoeff() > 1e-10 * (1.0 + W.cwiseAbs().maxCoeff()))
      throw ElError(ErrorCategory::InvalidInput, "external summary: W must be symmetric and finite");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (W + W.transpose()),
                                                      Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() <= 1e-12 * std::max(1.0, es.eigenvalues().maxCoeff()))
      throw ElError(ErrorCategory::InvalidInput, "external summary: W is not positive definite");
  }
}

ConstraintSpec ConstraintSpec::identity() {
  ConstraintSpec s;
  s.kind = Kind::Identity;
  return s;
}

ConstraintSpec ConstraintSpec::subset(std::vector<int> indices) {
  ConstraintSpec s;
  s.kind = Kind::Subset;
  s.indices = std::move(indices);
  if (s.indices.empty())
    throw ElError(ErrorCategory::InvalidInput, "constraint spec: subset index list is empty");
  return s;
}

ConstraintSpec ConstraintSpec::affine(Eigen::MatrixXd A, Eigen::VectorXd b) {
  ConstraintSpec s;
  s.kind = Kind::Affine;
  s.A = std::move(A);
  s.b = std::move(b);
  if (s.A.rows() == 0)
    throw ElError(ErrorCategory::InvalidInput, "constraint spec: affine map has zero rows");
  if (s.b.size() != s.A.rows())
    throw ElError(ErrorCategory::InvalidInput,
                  "constraint spec: affine offset length " + std::to_string(s.b.size()) +
                      " does not match rows " + std::to_string(s.A.rows()));
  return s;
}

int ConstraintSpec::q(int p) const {
  switch (kind) {
    case Kind::Identity: return p;
    case Kind::Subset: return static_cast<int>(indices.size());
    case Kind::Affine: return static_cast<int>(A.rows());
  }
  return 0;
}

void ConstraintSpec::validate(int p) const {
  if (kind == Kind::Subset) {
    for (int j : indices)
      if (j < 0 || j >= p)
        throw ElError(ErrorCategory::InvalidInput,
                      "constraint spec: subset index " + std::to_string(j) +
                          " out of range for p = " + std::to_string(p));
  } else if (kind == Kind::Affine) {
    if (A.cols() != p)
      throw ElError(ErrorCategory::InvalidInput,
                    "constraint spec: affine map expects " + std::to_string(A.cols()) +
                        " covariates, sample has " + std::to_string(p));
  }
  if (q(p) < 1) throw ElError(ErrorCategory::InvalidInput, "constraint spec: q must be >= 1");
}

Eigen::VectorXd ConstraintSpec::apply(VecRef x) const {
  switch (kind) {
    case Kind::Identity: return x;
    case Kind::Subset: {
      Eigen::VectorXd out(indices.size());
      for (size_t k = 0; k < indices.size(); ++k) out[static_cast<int>(k)] = x[indices[k]];
      return out;
    }
    case Kind::Affine: return A * x + b;
  }
  return {};
}

Eigen::MatrixXd ConstraintSpec::apply_rows(MatRef X) const {
  switch (kind) {
    case Kind::Identity: return X;
    case Kind::Subset: {
      Eigen::MatrixXd out(X.rows(), indices.size());
      for (size_t k = 0; k < indices.size(); ++k) out.col(static_cast<int>(k)) = X.col(indices[k]);
      return out;
    }
    case Kind::Affine: return (X * A.transpose()).rowwise() + b.transpose();
  }
  return {};
}

Eigen::MatrixXd ConstraintSpec::jacobian(int p) const {
  switch (kind) {
    case Kind::Identity: return Eigen::MatrixXd::Identity(p, p);
    case Kind::Subset: {
      Eigen::MatrixXd J = Eigen::MatrixXd::Zero(static_cast<int>(indices.size()), p);
      for (size_t k = 0; k < indices.size(); ++k) J(static_cast<int>(k), indices[k]) = 1.0;
      return J;
    }
    case Kind::Affine: return A;
  }
  return {};
}

double ThetaFull::case_proportion() const {
  // 1/(1+e^g) evaluated without overflow for either sign of g.
  if (gamma >= 0.0) {
    double e = std::exp(-gamma);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(gamma));
}

Eigen::VectorXd ThetaFull::to_vector() const {
  Eigen::VectorXd v(dim());
  v[0] = gamma;
  v[1] = alpha_star;
  v.segment(2, p()) = beta;
  v.segment(2 + p(), q()) = mu;
  return v;
}

ThetaFull ThetaFull::from_vector(VecRef v, int p, int q) {
  if (v.size() != 2 + p + q)
    throw ElError(ErrorCategory::InvalidInput,
                  "theta: vector length " + std::to_string(v.size()) + " does not match 2+p+q = " +
                      std::to_string(2 + p + q));
  ThetaFull t;
  t.gamma = v[0];
  t.alpha_star = v[1];
  t.beta = v.segment(2, p);
  t.mu = v.segment(2 + p, q);
  return t;
}

}  // namespace elcc
