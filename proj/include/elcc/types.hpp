#pragma once

#include <Eigen/Dense>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace elcc {

typedef const Eigen::Ref<const Eigen::VectorXd>& VecRef;
typedef const Eigen::Ref<const Eigen::MatrixXd>& MatRef;

// Failure taxonomy shared across the toolkit. CLI maps InvalidInput/Schema/Config
// to exit 2 and everything else to exit 3.
enum class ErrorCategory {
  InvalidInput,
  Schema,
  Config,
  Infeasible,
  NonConvergence,
  Identifiability,
  Separation,
  SingularBlock,
  Diagnostics,
  Protocol,
  Budget,
};

class ElError : public std::runtime_error {
 public:
  ElError(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const { return category_; }

 private:
  ErrorCategory category_;
};

const char* error_category_name(ErrorCategory c);

// Case-control sample: y_i in {0,1}, rows of X are covariate vectors.
// Construction validates what the estimators assume; downstream code never re-checks.
struct CaseControlSample {
  Eigen::VectorXi y;   // n, each 0 or 1
  Eigen::MatrixXd X;   // n x p
  int n = 0, p = 0;
  int n_case = 0, n_control = 0;
  double rho = 0.0;    // n_case / n_control

  CaseControlSample(Eigen::VectorXi outcomes, Eigen::MatrixXd covariates);
};

enum class WeightMode { Given, Optimal, PopulationLevel };

// External information about E[h(X)]: the summary vector, its sample size, and
// how the quadratic-penalty weight is chosen.
struct ExternalSummary {
  Eigen::VectorXd mu_tilde;    // length q
  double n_external = 0.0;     // N; draws behind mu_tilde
  WeightMode mode = WeightMode::Given;
  Eigen::MatrixXd W;           // q x q, PD; used when mode == Given

  static ExternalSummary given(Eigen::VectorXd mu_tilde, double n_external, Eigen::MatrixXd W);
  static ExternalSummary optimal(Eigen::VectorXd mu_tilde, double n_external);
  static ExternalSummary population(Eigen::VectorXd mu_tilde);

  int q() const { return static_cast<int>(mu_tilde.size()); }
  void validate() const;
};

// Map x -> h(x) defining which covariate functionals the external summary pins down.
// Restricted to forms with constant Jacobian so downstream derivative blocks stay exact.
struct ConstraintSpec {
  enum class Kind { Identity, Subset, Affine };
  Kind kind = Kind::Identity;
  std::vector<int> indices;  // Subset
  Eigen::MatrixXd A;         // Affine: h(x) = A x + b
  Eigen::VectorXd b;

  static ConstraintSpec identity();
  static ConstraintSpec subset(std::vector<int> indices);
  static ConstraintSpec affine(Eigen::MatrixXd A, Eigen::VectorXd b);

  int q(int p) const;
  void validate(int p) const;
  Eigen::VectorXd apply(VecRef x) const;
  // Row i of the result is h(X.row(i)).
  Eigen::MatrixXd apply_rows(MatRef X) const;
  // dh/dx, q x p (constant for all supported kinds).
  Eigen::MatrixXd jacobian(int p) const;
};

// Full parameter vector in the fixed layout (gamma, alpha_star, beta, mu).
// gamma = log odds of the control fraction in the population, alpha_star the
// retrospective intercept; alpha and the case proportion are derived views.
struct ThetaFull {
  double gamma = 0.0;
  double alpha_star = 0.0;
  Eigen::VectorXd beta;  // p
  Eigen::VectorXd mu;    // q

  int p() const { return static_cast<int>(beta.size()); }
  int q() const { return static_cast<int>(mu.size()); }
  int dim() const { return 2 + p() + q(); }

  double alpha() const { return alpha_star - gamma; }
  double case_proportion() const;  // 1 / (1 + e^gamma)

  Eigen::VectorXd to_vector() const;
  static ThetaFull from_vector(VecRef v, int p, int q);
};

// One evaluation of the estimating function H(x; theta) and, on request, its
// Jacobian in theta with column blocks ordered gamma | alpha_star | beta | mu.
struct HValue {
  Eigen::VectorXd value;                    // 1 + q
  std::optional<Eigen::MatrixXd> jacobian;  // (1+q) x (2+p+q)
  bool saturated = false;                   // tilt hit the clamp
};

// Inner-problem solution: multipliers, implied point masses, and solve stats.
struct LagrangeState {
  Eigen::VectorXd nu;       // 1 + q
  Eigen::VectorXd weights;  // n, each in (0,1), summing to 1
  double lambda = 1.0;      // normalization multiplier, fixed by the profile
  int iterations = 0;
  double residual_norm = 0.0;
};

struct SolverConfig {
  double inner_tol = 1e-10;
  double outer_tol = 1e-8;
  int max_inner_iterations = 100;
  int max_outer_iterations = 500;
  double fd_step = 1e-6;
  double line_search_shrink = 0.5;
  double line_search_c1 = 1e-4;  // sufficient-decrease constant
  double gamma_bound = 15.0;     // box |gamma| <= gamma_bound
};

struct FitDiagnostics {
  double grad_norm = 0.0;
  double constraint_residual = 0.0;  // max violation of the weighted moment identities
  int outer_iterations = 0;
  int inner_iterations_total = 0;
  bool tilt_saturated = false;
  bool gamma_at_bound = false;
  bool used_polish = false;
  std::vector<double> objective_trace;  // accepted iterates, non-decreasing
};

struct FitResult {
  ThetaFull theta;
  LagrangeState lagrange;
  double objective = 0.0;
  bool converged = false;
  FitDiagnostics diagnostics;
};

// Data-driven starting point for the outer optimization.
struct InitEstimates {
  double gamma_init = 0.0;
  double alpha_star_init = 0.0;
  Eigen::VectorXd beta_init;
  Eigen::VectorXd mu1_hat;  // case-sample mean of h
  Eigen::VectorXd mu0_hat;  // control-sample mean of h
  bool gamma_clamped = false;
};

}  // namespace elcc
