#include "elcc/simulation.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <thread>

#include "elcc/baselines.hpp"
#include "elcc/inference.hpp"
#include "elcc/model.hpp"
#include "elcc/solver.hpp"

namespace elcc {

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double population_case_rate(double alpha, VecRef beta) {
  // beta'X ~ N(0, ||beta||^2); composite Simpson over 12 standard deviations.
  const double s = beta.norm();
  const int K = 4000;  // even panel count
  const double lo = -12.0, hi = 12.0, h = (hi - lo) / K;
  auto f = [&](double z) {
    return sigmoid(alpha + s * z) * std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI);
  };
  double acc = f(lo) + f(hi);
  for (int k = 1; k < K; ++k) acc += f(lo + k * h) * (k % 2 ? 4.0 : 2.0);
  return acc * h / 3.0;
}

Scheme make_scheme(std::string name, double alpha, Eigen::VectorXd beta, int n_control,
                   int n_case, double external_multiplier) {
  if (n_control < 1 || n_case < 1)
    throw ElError(ErrorCategory::InvalidInput, "scheme: case and control quotas must be >= 1");
  if (beta.size() < 1)
    throw ElError(ErrorCategory::InvalidInput, "scheme: beta must have at least one slope");
  if (external_multiplier < 0.0)
    throw ElError(ErrorCategory::InvalidInput, "scheme: external multiplier must be >= 0");
  Scheme s;
  s.name = std::move(name);
  s.alpha = alpha;
  s.beta = std::move(beta);
  s.n_control = n_control;
  s.n_case = n_case;
  s.external_multiplier = external_multiplier;
  s.q_design = static_cast<double>(n_case) / (n_case + n_control);
  s.p_true = population_case_rate(alpha, s.beta);
  s.mu_true = Eigen::VectorXd::Zero(s.beta.size());
  return s;
}

Scheme table_scheme(const std::string& name, double external_multiplier) {
  Eigen::VectorXd b1(2), b2(2);
  b1 << -2.0, 2.0;
  b2 << 2.0, 1.0;
  if (name == "A1") return make_scheme("A1", -5.0, b1, 4000, 800, external_multiplier);
  if (name == "A2") return make_scheme("A2", -4.0, b2, 4000, 800, external_multiplier);
  if (name == "B1") return make_scheme("B1", -5.0, b1, 3000, 1500, external_multiplier);
  if (name == "B2") return make_scheme("B2", -4.0, b2, 3000, 1500, external_multiplier);
  if (name == "C1") return make_scheme("C1", -5.0, b1, 2000, 2000, external_multiplier);
  if (name == "C2") return make_scheme("C2", -4.0, b2, 2000, 2000, external_multiplier);
  throw ElError(ErrorCategory::InvalidInput,
                "scheme: unknown name '" + name + "' (expected A1, A2, B1, B2, C1 or C2)");
}

GeneratedData generate_scheme(const Scheme& scheme, std::uint64_t seed) {
  Rng rng(seed);
  const int p = static_cast<int>(scheme.beta.size());
  const int n1 = scheme.n_case, n0 = scheme.n_control, n = n0 + n1;

  Eigen::MatrixXd X(n, p);  // cases in rows [0, n1), controls in [n1, n)
  Eigen::VectorXi y(n);
  y.head(n1).setOnes();
  y.tail(n0).setZero();

  int filled1 = 0, filled0 = 0;
  long long draws = 0, cases_seen = 0;
  Eigen::VectorXd x(p);
  const long long budget = 1'000'000'000LL;
  while (filled1 < n1 || filled0 < n0) {
    if (++draws > budget)
      throw ElError(ErrorCategory::Budget,
                    "generate_scheme: population draw budget exhausted before quotas filled "
                    "(case rate " +
                        std::to_string(scheme.p_true) + ")");
    for (int j = 0; j < p; ++j) x[j] = rng.normal();
    double pi = sigmoid(scheme.alpha + scheme.beta.dot(x));
    bool is_case = rng.uniform() < pi;
    cases_seen += is_case;
    if (is_case && filled1 < n1)
      X.row(filled1++) = x;
    else if (!is_case && filled0 < n0)
      X.row(n1 + filled0++) = x;
  }

  GeneratedData out(CaseControlSample(std::move(y), std::move(X)));
  out.mu_true = scheme.mu_true;
  out.draws = draws;
  out.realized_prevalence = static_cast<double>(cases_seen) / draws;
  if (scheme.external_multiplier > 0.0) {
    const long long N = std::llround(scheme.external_multiplier * n);
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(p);
    for (long long i = 0; i < N; ++i) {
      for (int j = 0; j < p; ++j) x[j] = rng.normal();
      acc += x;
    }
    out.mu_tilde = acc / static_cast<double>(N);
    out.n_external = static_cast<double>(N);
  }
  return out;
}

const char* estimator_name(Estimator e) {
  switch (e) {
    case Estimator::MleOnly: return "mle";
    case Estimator::FixedW: return "fixed-w";
    case Estimator::OptimalW: return "optimal-w";
    case Estimator::KnownMu: return "known-mu";
  }
  return "unknown";
}

Eigen::MatrixXd default_fixed_w(int q) {
  // The study's diagonal weight for two constraints; identity otherwise.
  if (q == 2) {
    Eigen::MatrixXd W = Eigen::MatrixXd::Zero(2, 2);
    W(0, 0) = 0.2;
    W(1, 1) = 2.0;
    return W;
  }
  return Eigen::MatrixXd::Identity(q, q);
}

namespace {

struct RepRow {
  bool ok = false;
  double alpha = 0.0, pi = 0.0, se_alpha = 0.0;
  Eigen::VectorXd beta, se_beta;
};

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("ELCC_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1 || v > 4096)
      throw ElError(ErrorCategory::Config,
                    std::string("ELCC_THREADS must be a positive integer, got '") + env + "'");
    return static_cast<int>(v);
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc ? static_cast<int>(hc) : 1;
}

RepRow run_one(Estimator est, const GeneratedData& data, const McConfig& cfg) {
  RepRow row;
  const int q = static_cast<int>(data.mu_tilde.size());
  ConstraintSpec spec = ConstraintSpec::identity();
  try {
    switch (est) {
      case Estimator::MleOnly: {
        MleResult mle = fit_prospective_mle(data.sample, cfg.solver);
        row.alpha = mle.alpha_hat;
        row.beta = mle.beta_hat;
        row.se_alpha = mle.se[0];
        row.se_beta = mle.se.tail(mle.beta_hat.size());
        row.pi = mle.naive_case_prop;
        break;
      }
      case Estimator::FixedW: {
        Eigen::MatrixXd W = cfg.fixed_W.size() ? cfg.fixed_W : default_fixed_w(q);
        auto ext = ExternalSummary::given(data.mu_tilde, data.n_external, W);
        FitResult fit = fit_mele(data.sample, ext, spec, cfg.solver);
        AsymptoticBlocks blocks = assemble_blocks(fit, data.sample, spec, ext);
        CovarianceEstimate cov = sigma_hat(blocks, SigmaForm::GeneralW);
        row.alpha = fit.theta.alpha();
        row.beta = fit.theta.beta;
        row.se_alpha = cov.se_alpha;
        row.se_beta = cov.se_theta.segment(2, fit.theta.p());
        row.pi = fit.theta.case_proportion();
        break;
      }
      case Estimator::OptimalW: {
        auto ext = ExternalSummary::optimal(data.mu_tilde, data.n_external);
        OptimalFit of = fit_optimal_weight(data.sample, ext, spec, cfg.solver);
        AsymptoticBlocks blocks = assemble_blocks(of.fit, data.sample, spec, ext);
        CovarianceEstimate cov = sigma_hat(blocks, SigmaForm::OptimalV);
        row.alpha = of.fit.theta.alpha();
        row.beta = of.fit.theta.beta;
        row.se_alpha = cov.se_alpha;
        row.se_beta = cov.se_theta.segment(2, of.fit.theta.p());
        row.pi = of.fit.theta.case_proportion();
        break;
      }
      case Estimator::KnownMu: {
        FitResult fit = fit_known_mu(data.sample, data.mu_true, spec, cfg.solver);
        AsymptoticBlocks blocks =
            assemble_blocks_internal(fit, data.sample, spec, data.mu_true);
        CovarianceEstimate cov = sigma_hat(blocks, SigmaForm::InternalI);
        row.alpha = fit.theta.alpha();
        row.beta = fit.theta.beta;
        row.se_alpha = cov.se_alpha;
        row.se_beta = cov.se_theta.segment(2, fit.theta.p());
        row.pi = fit.theta.case_proportion();
        break;
      }
    }
    row.ok = true;
  } catch (const ElError&) {
    row.ok = false;  // recorded per estimator; the study flags excess failures
  }
  return row;
}

}  // namespace

McReport run_monte_carlo(const Scheme& scheme, const std::vector<Estimator>& estimators,
                         const McConfig& cfg) {
  if (cfg.replications < 1)
    throw ElError(ErrorCategory::InvalidInput, "run_monte_carlo: replications must be >= 1");
  if (estimators.empty())
    throw ElError(ErrorCategory::InvalidInput, "run_monte_carlo: no estimators requested");
  const bool needs_external = [&] {
    for (Estimator e : estimators)
      if (e == Estimator::FixedW || e == Estimator::OptimalW) return true;
    return false;
  }();
  if (needs_external && scheme.external_multiplier <= 0.0)
    throw ElError(ErrorCategory::InvalidInput,
                  "run_monte_carlo: scheme '" + scheme.name +
                      "' has no external sample but an external-data estimator was requested");

  const int R = cfg.replications;
  const int E = static_cast<int>(estimators.size());
  std::vector<std::vector<RepRow>> rows(E, std::vector<RepRow>(R));

  auto work = [&](int r) {
    GeneratedData data = generate_scheme(scheme, derive_seed(cfg.master_seed, r));
    for (int e = 0; e < E; ++e) rows[e][r] = run_one(estimators[e], data, cfg);
  };

  const int threads = std::min(resolve_threads(cfg.threads), R);
  if (threads <= 1) {
    for (int r = 0; r < R; ++r) work(r);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (int r = next.fetch_add(1); r < R; r = next.fetch_add(1)) work(r);
      });
    for (auto& th : pool) th.join();
  }

  // Sequential aggregation in replication order: scheduling cannot change it.
  McReport rep;
  rep.scheme = scheme.name;
  rep.replications = R;
  rep.master_seed = cfg.master_seed;
  rep.p_true = scheme.p_true;
  rep.q_design = scheme.q_design;
  rep.external_multiplier = scheme.external_multiplier;
  rep.ci_level = cfg.ci_level;

  const double alpha0 = scheme.alpha;
  const Eigen::VectorXd& beta0 = scheme.beta;
  const int p = static_cast<int>(beta0.size());

  for (int e = 0; e < E; ++e) {
    EstimatorReport er;
    er.estimator = estimators[e];
    er.beta.resize(p);
    std::vector<const RepRow*> ok;
    ok.reserve(R);
    for (const RepRow& r : rows[e])
      if (r.ok) ok.push_back(&r);
    er.failures = R - static_cast<int>(ok.size());
    const int m = static_cast<int>(ok.size());
    if (m == 0) {
      rep.estimators.push_back(std::move(er));
      rep.failure_flag = true;
      continue;
    }

    auto stats = [&](auto value, auto se, double truth) {
      ParamStats s;
      double mean = 0.0, mese = 0.0, cover = 0.0;
      for (const RepRow* r : ok) mean += value(*r);
      mean /= m;
      double ss = 0.0;
      for (const RepRow* r : ok) {
        double d = value(*r) - mean;
        ss += d * d;
        mese += se(*r);
      }
      s.bias = mean - truth;
      s.sd = m > 1 ? std::sqrt(ss / (m - 1)) : std::numeric_limits<double>::quiet_NaN();
      s.ese = mese / m;
      // CI hit: |est - truth| <= z * se with the report's level.
      for (const RepRow* r : ok) {
        auto ci = wald_ci(value(*r), se(*r), rep.ci_level);
        cover += (truth >= ci.first && truth <= ci.second) ? 1.0 : 0.0;
      }
      s.coverage = cover / m;
      return s;
    };

    er.alpha = stats([](const RepRow& r) { return r.alpha; },
                     [](const RepRow& r) { return r.se_alpha; }, alpha0);
    for (int j = 0; j < p; ++j)
      er.beta[j] = stats([j](const RepRow& r) { return r.beta[j]; },
                         [j](const RepRow& r) { return r.se_beta[j]; }, beta0[j]);

    double pim = 0.0;
    for (const RepRow* r : ok) pim += r->pi;
    pim /= m;
    er.pi_bias = pim - scheme.p_true;
    double ssp = 0.0;
    for (const RepRow* r : ok) ssp += (r->pi - pim) * (r->pi - pim);
    er.pi_sd = m > 1 ? std::sqrt(ssp / (m - 1)) : std::numeric_limits<double>::quiet_NaN();

    if (er.failures > 0.02 * R) rep.failure_flag = true;
    rep.estimators.push_back(std::move(er));
  }
  return rep;
}

}  // namespace elcc
