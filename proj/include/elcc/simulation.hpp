#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "elcc/types.hpp"

namespace elcc {

// Deterministic stream: 64-bit Mersenne engine, 53-bit uniforms, Box-Muller
// normals with a cached spare. No std distribution objects, so seeded output
// is byte-identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}
  std::uint64_t next_u64() { return eng_(); }
  // Uniform on (0, 1].
  double uniform() { return static_cast<double>((eng_() >> 11) + 1) * 0x1.0p-53; }
  double normal();

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Per-replication seed: splitmix64 finalizer over a golden-ratio stride, so
// replication streams are decorrelated and independent of execution order.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

// One simulation design: logistic population, fixed case/control quotas, and
// an external summary sample whose size is a multiple of n.
struct Scheme {
  std::string name;
  double alpha = 0.0;
  Eigen::VectorXd beta;
  int n_control = 0;
  int n_case = 0;
  double external_multiplier = 1.0;  // N = multiplier * (n_case + n_control); 0 = none
  double q_design = 0.0;             // case fraction by design, n_case / n
  double p_true = 0.0;               // population case rate, by quadrature
  Eigen::VectorXd mu_true;           // population mean of h(X); zero for standard normal X
};

// Population case rate E[sigmoid(alpha + beta'X)] for X standard normal,
// reduced to one dimension through the law of beta'X.
double population_case_rate(double alpha, VecRef beta);

Scheme make_scheme(std::string name, double alpha, Eigen::VectorXd beta, int n_control,
                   int n_case, double external_multiplier);

// The six study designs A1..C2 (rows differ in intercept/slopes and in the
// case:control split), with the stated external multiplier.
Scheme table_scheme(const std::string& name, double external_multiplier = 1.0);

struct GeneratedData {
  CaseControlSample sample;           // cases first, then controls
  Eigen::VectorXd mu_tilde;           // empty when the scheme has no external sample
  Eigen::VectorXd mu_true;            // exact population moment, for the known-mu estimator
  double n_external = 0.0;
  double realized_prevalence = 0.0;   // case fraction among all population draws
  long long draws = 0;                // population draws consumed by the quotas

  GeneratedData(CaseControlSample s) : sample(std::move(s)) {}
};

// Rejection sampler: draw from the population until both quotas fill, then a
// fresh block of N population draws for the external covariate means.
GeneratedData generate_scheme(const Scheme& scheme, std::uint64_t seed);

enum class Estimator { MleOnly, FixedW, OptimalW, KnownMu };

const char* estimator_name(Estimator e);

struct ParamStats {
  double bias = 0.0;
  double sd = 0.0;        // empirical SD across replications
  double ese = 0.0;       // mean estimated standard error
  double coverage = 0.0;  // fraction of CIs covering the truth
};

struct EstimatorReport {
  Estimator estimator = Estimator::MleOnly;
  ParamStats alpha;
  std::vector<ParamStats> beta;
  double pi_bias = 0.0;  // mean case-proportion estimate minus p_true
  double pi_sd = 0.0;
  int failures = 0;
};

struct McConfig {
  int replications = 200;
  std::uint64_t master_seed = 0x5eedULL;
  double ci_level = 0.95;
  Eigen::MatrixXd fixed_W;  // weight for FixedW; empty = diag(0.2, 2) pattern
  int threads = 0;          // 0: ELCC_THREADS env, else hardware count
  SolverConfig solver;
};

struct McReport {
  std::string scheme;
  int replications = 0;
  std::uint64_t master_seed = 0;
  double p_true = 0.0, q_design = 0.0;
  double external_multiplier = 0.0;
  double ci_level = 0.95;
  std::vector<EstimatorReport> estimators;
  bool failure_flag = false;  // some estimator failed on more than 2% of reps
};

// Seeded study: per-replication data generation and every requested estimator,
// aggregated by replication index so the result is independent of scheduling.
McReport run_monte_carlo(const Scheme& scheme, const std::vector<Estimator>& estimators,
                         const McConfig& cfg);

// Default study weight for FixedW when none is configured.
Eigen::MatrixXd default_fixed_w(int q);

}  // namespace elcc
