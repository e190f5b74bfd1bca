// Python bindings for the estimation core. Functions returning report
// documents hand JSON over as strings; the package wrapper parses them.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>

#include "elcc/baselines.hpp"
#include "elcc/inference.hpp"
#include "elcc/io.hpp"
#include "elcc/model.hpp"
#include "elcc/simulation.hpp"
#include "elcc/solver.hpp"

namespace py = pybind11;
using namespace elcc;

PYBIND11_MODULE(_elcc, m) {
  m.doc() = "Case-control logistic regression with external covariate summaries "
            "via constrained empirical likelihood";

  py::register_exception<ElError>(m, "ElError");

  // ---- core types ----
  py::class_<CaseControlSample>(m, "CaseControlSample")
      .def(py::init<Eigen::VectorXi, Eigen::MatrixXd>(), py::arg("y"), py::arg("X"))
      .def_readonly("y", &CaseControlSample::y)
      .def_readonly("X", &CaseControlSample::X)
      .def_readonly("n", &CaseControlSample::n)
      .def_readonly("p", &CaseControlSample::p)
      .def_readonly("n_case", &CaseControlSample::n_case)
      .def_readonly("n_control", &CaseControlSample::n_control)
      .def_readonly("rho", &CaseControlSample::rho);

  py::enum_<WeightMode>(m, "WeightMode")
      .value("Given", WeightMode::Given)
      .value("Optimal", WeightMode::Optimal)
      .value("PopulationLevel", WeightMode::PopulationLevel);

  py::class_<ExternalSummary>(m, "ExternalSummary")
      .def_static("given", &ExternalSummary::given, py::arg("mu_tilde"), py::arg("n_external"),
                  py::arg("W"))
      .def_static("optimal", &ExternalSummary::optimal, py::arg("mu_tilde"),
                  py::arg("n_external"))
      .def_static("population", &ExternalSummary::population, py::arg("mu_tilde"))
      .def_readonly("mu_tilde", &ExternalSummary::mu_tilde)
      .def_readonly("n_external", &ExternalSummary::n_external)
      .def_readonly("mode", &ExternalSummary::mode)
      .def_readonly("W", &ExternalSummary::W);

  py::class_<ConstraintSpec>(m, "ConstraintSpec")
      .def_static("identity", &ConstraintSpec::identity)
      .def_static("subset", &ConstraintSpec::subset, py::arg("indices"))
      .def_static("affine", &ConstraintSpec::affine, py::arg("A"), py::arg("b"))
      .def("q", &ConstraintSpec::q, py::arg("p"))
      .def("apply", &ConstraintSpec::apply, py::arg("x"))
      .def("apply_rows", &ConstraintSpec::apply_rows, py::arg("X"))
      .def("jacobian", &ConstraintSpec::jacobian, py::arg("p"));

  py::class_<ThetaFull>(m, "ThetaFull")
      .def(py::init<>())
      .def_readwrite("gamma", &ThetaFull::gamma)
      .def_readwrite("alpha_star", &ThetaFull::alpha_star)
      .def_readwrite("beta", &ThetaFull::beta)
      .def_readwrite("mu", &ThetaFull::mu)
      .def_property_readonly("alpha", &ThetaFull::alpha)
      .def_property_readonly("case_proportion", &ThetaFull::case_proportion)
      .def("to_vector", &ThetaFull::to_vector)
      .def_static("from_vector", &ThetaFull::from_vector, py::arg("v"), py::arg("p"),
                  py::arg("q"))
      .def("__repr__", [](const ThetaFull& t) {
        return "ThetaFull(gamma=" + std::to_string(t.gamma) +
               ", alpha_star=" + std::to_string(t.alpha_star) + ", p=" + std::to_string(t.p()) +
               ", q=" + std::to_string(t.q()) + ")";
      });

  py::class_<SolverConfig>(m, "SolverConfig")
      .def(py::init<>())
      .def_readwrite("inner_tol", &SolverConfig::inner_tol)
      .def_readwrite("outer_tol", &SolverConfig::outer_tol)
      .def_readwrite("max_inner_iterations", &SolverConfig::max_inner_iterations)
      .def_readwrite("max_outer_iterations", &SolverConfig::max_outer_iterations)
      .def_readwrite("fd_step", &SolverConfig::fd_step)
      .def_readwrite("line_search_shrink", &SolverConfig::line_search_shrink)
      .def_readwrite("line_search_c1", &SolverConfig::line_search_c1)
      .def_readwrite("gamma_bound", &SolverConfig::gamma_bound);

  py::class_<LagrangeState>(m, "LagrangeState")
      .def_readonly("nu", &LagrangeState::nu)
      .def_readonly("weights", &LagrangeState::weights)
      .def_readonly("lambda_", &LagrangeState::lambda)
      .def_readonly("iterations", &LagrangeState::iterations)
      .def_readonly("residual_norm", &LagrangeState::residual_norm);

  py::class_<FitDiagnostics>(m, "FitDiagnostics")
      .def_readonly("grad_norm", &FitDiagnostics::grad_norm)
      .def_readonly("constraint_residual", &FitDiagnostics::constraint_residual)
      .def_readonly("outer_iterations", &FitDiagnostics::outer_iterations)
      .def_readonly("inner_iterations_total", &FitDiagnostics::inner_iterations_total)
      .def_readonly("tilt_saturated", &FitDiagnostics::tilt_saturated)
      .def_readonly("gamma_at_bound", &FitDiagnostics::gamma_at_bound)
      .def_readonly("used_polish", &FitDiagnostics::used_polish)
      .def_readonly("objective_trace", &FitDiagnostics::objective_trace);

  py::class_<FitResult>(m, "FitResult")
      .def_readonly("theta", &FitResult::theta)
      .def_readonly("lagrange", &FitResult::lagrange)
      .def_readonly("objective", &FitResult::objective)
      .def_readonly("converged", &FitResult::converged)
      .def_readonly("diagnostics", &FitResult::diagnostics);

  py::class_<HValue>(m, "HValue")
      .def_readonly("value", &HValue::value)
      .def_readonly("jacobian", &HValue::jacobian)
      .def_readonly("saturated", &HValue::saturated);

  // ---- model and solver ----
  m.def("eval_H", &eval_H, py::arg("x"), py::arg("theta"), py::arg("spec"),
        py::arg("with_jacobian") = false);

  m.def(
      "solve_nu",
      [](const ThetaFull& theta, const CaseControlSample& sample, const ConstraintSpec& spec,
         const SolverConfig& cfg) { return solve_nu(theta, sample, spec, cfg); },
      py::arg("theta"), py::arg("sample"), py::arg("spec"),
      py::arg("config") = SolverConfig());

  m.def(
      "profile_objective",
      [](const ThetaFull& theta, const CaseControlSample& sample, const ExternalSummary& ext,
         const ConstraintSpec& spec, const SolverConfig& cfg) {
        ProfileValue pv = profile_objective(theta, sample, ext, spec, cfg);
        return py::make_tuple(pv.value, pv.lagrange);
      },
      py::arg("theta"), py::arg("sample"), py::arg("external"), py::arg("spec"),
      py::arg("config") = SolverConfig(),
      "Profiled objective at theta; returns (value, lagrange_state).");

  m.def(
      "fit_mele",
      [](const CaseControlSample& sample, const ExternalSummary& ext, const ConstraintSpec& spec,
         const SolverConfig& cfg, std::optional<ThetaFull> theta_init) {
        return fit_mele(sample, ext, spec, cfg, theta_init ? &*theta_init : nullptr);
      },
      py::arg("sample"), py::arg("external"), py::arg("spec"),
      py::arg("config") = SolverConfig(), py::arg("theta_init") = std::nullopt);

  m.def("fit_known_mu", &fit_known_mu, py::arg("sample"), py::arg("mu"), py::arg("spec"),
        py::arg("config") = SolverConfig());

  // ---- inference ----
  py::class_<CovarianceEstimate>(m, "CovarianceEstimate")
      .def_readonly("sigma", &CovarianceEstimate::sigma)
      .def_readonly("se_theta", &CovarianceEstimate::se_theta)
      .def_readonly("se_alpha", &CovarianceEstimate::se_alpha)
      .def_readonly("se_pi", &CovarianceEstimate::se_pi);

  py::class_<OptimalFit>(m, "OptimalFit")
      .def_readonly("fit", &OptimalFit::fit)
      .def_readonly("V", &OptimalFit::V)
      .def_readonly("rounds", &OptimalFit::rounds)
      .def_readonly("step_norms", &OptimalFit::step_norms);

  py::class_<FitWithCovariance>(m, "FitWithCovariance")
      .def_readonly("fit", &FitWithCovariance::fit)
      .def_readonly("cov", &FitWithCovariance::cov)
      .def_readonly("V", &FitWithCovariance::V)
      .def_readonly("estimator", &FitWithCovariance::estimator);

  m.def("estimate_vhat", &estimate_vhat, py::arg("fit"), py::arg("sample"), py::arg("spec"),
        py::arg("mu_tilde"));
  m.def("fit_optimal_weight", &fit_optimal_weight, py::arg("sample"), py::arg("external"),
        py::arg("spec"), py::arg("config") = SolverConfig());
  m.def("fit_auto", &fit_auto, py::arg("sample"), py::arg("external"), py::arg("spec"),
        py::arg("config") = SolverConfig(),
        "Fit with the weight policy of `external` and the matched covariance.");
  m.def("wald_ci", &wald_ci, py::arg("estimate"), py::arg("se"), py::arg("level"));

  // ---- baselines ----
  py::class_<MleResult>(m, "MleResult")
      .def_readonly("alpha_hat", &MleResult::alpha_hat)
      .def_readonly("beta_hat", &MleResult::beta_hat)
      .def_readonly("se", &MleResult::se)
      .def_readonly("naive_case_prop", &MleResult::naive_case_prop)
      .def_readonly("iterations", &MleResult::iterations)
      .def_readonly("converged", &MleResult::converged);

  m.def(
      "fit_prospective_mle",
      [](const CaseControlSample& sample, const SolverConfig& cfg) {
        return fit_prospective_mle(sample, cfg);
      },
      py::arg("sample"), py::arg("config") = SolverConfig());

  // ---- simulation ----
  py::class_<Scheme>(m, "Scheme")
      .def_readonly("name", &Scheme::name)
      .def_readonly("alpha", &Scheme::alpha)
      .def_readonly("beta", &Scheme::beta)
      .def_readonly("n_control", &Scheme::n_control)
      .def_readonly("n_case", &Scheme::n_case)
      .def_readonly("external_multiplier", &Scheme::external_multiplier)
      .def_readonly("q_design", &Scheme::q_design)
      .def_readonly("p_true", &Scheme::p_true)
      .def_readonly("mu_true", &Scheme::mu_true);

  py::class_<GeneratedData>(m, "GeneratedData")
      .def_readonly("sample", &GeneratedData::sample)
      .def_readonly("mu_tilde", &GeneratedData::mu_tilde)
      .def_readonly("mu_true", &GeneratedData::mu_true)
      .def_readonly("n_external", &GeneratedData::n_external)
      .def_readonly("realized_prevalence", &GeneratedData::realized_prevalence)
      .def_readonly("draws", &GeneratedData::draws);

  py::enum_<Estimator>(m, "Estimator")
      .value("MleOnly", Estimator::MleOnly)
      .value("FixedW", Estimator::FixedW)
      .value("OptimalW", Estimator::OptimalW)
      .value("KnownMu", Estimator::KnownMu);

  py::class_<ParamStats>(m, "ParamStats")
      .def_readonly("bias", &ParamStats::bias)
      .def_readonly("sd", &ParamStats::sd)
      .def_readonly("ese", &ParamStats::ese)
      .def_readonly("coverage", &ParamStats::coverage);

  py::class_<EstimatorReport>(m, "EstimatorReport")
      .def_readonly("estimator", &EstimatorReport::estimator)
      .def_readonly("alpha", &EstimatorReport::alpha)
      .def_readonly("beta", &EstimatorReport::beta)
      .def_readonly("pi_bias", &EstimatorReport::pi_bias)
      .def_readonly("pi_sd", &EstimatorReport::pi_sd)
      .def_readonly("failures", &EstimatorReport::failures);

  py::class_<McConfig>(m, "McConfig")
      .def(py::init<>())
      .def_readwrite("replications", &McConfig::replications)
      .def_readwrite("master_seed", &McConfig::master_seed)
      .def_readwrite("ci_level", &McConfig::ci_level)
      .def_readwrite("fixed_W", &McConfig::fixed_W)
      .def_readwrite("threads", &McConfig::threads)
      .def_readwrite("solver", &McConfig::solver);

  py::class_<McReport>(m, "McReport")
      .def_readonly("scheme", &McReport::scheme)
      .def_readonly("replications", &McReport::replications)
      .def_readonly("master_seed", &McReport::master_seed)
      .def_readonly("p_true", &McReport::p_true)
      .def_readonly("q_design", &McReport::q_design)
      .def_readonly("external_multiplier", &McReport::external_multiplier)
      .def_readonly("ci_level", &McReport::ci_level)
      .def_readonly("estimators", &McReport::estimators)
      .def_readonly("failure_flag", &McReport::failure_flag);

  m.def("derive_seed", &derive_seed, py::arg("master"), py::arg("index"));
  m.def("population_case_rate", &population_case_rate, py::arg("alpha"), py::arg("beta"));
  m.def("make_scheme", &make_scheme, py::arg("name"), py::arg("alpha"), py::arg("beta"),
        py::arg("n_control"), py::arg("n_case"), py::arg("external_multiplier"));
  m.def("table_scheme", &table_scheme, py::arg("name"), py::arg("external_multiplier") = 1.0);
  m.def("generate_scheme", &generate_scheme, py::arg("scheme"), py::arg("seed"));
  m.def("run_monte_carlo", &run_monte_carlo, py::arg("scheme"), py::arg("estimators"),
        py::arg("config"), py::call_guard<py::gil_scoped_release>());
  m.def("default_fixed_w", &default_fixed_w, py::arg("q"));

  // ---- datasets and report documents ----
  py::class_<DatasetOptions>(m, "DatasetOptions")
      .def(py::init<>())
      .def_readwrite("outcome_column", &DatasetOptions::outcome_column)
      .def_readwrite("covariate_columns", &DatasetOptions::covariate_columns)
      .def_readwrite("standardize", &DatasetOptions::standardize)
      .def_readwrite("delimiter", &DatasetOptions::delimiter);

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("sample", &Dataset::sample)
      .def_readonly("covariate_names", &Dataset::covariate_names)
      .def_readonly("means", &Dataset::means)
      .def_readonly("sds", &Dataset::sds);

  m.def("load_dataset", &load_dataset, py::arg("path"),
        py::arg("options") = DatasetOptions());

  py::class_<AnalyzeConfig>(m, "AnalyzeConfig")
      .def(py::init<>())
      .def_readwrite("data_path", &AnalyzeConfig::data_path)
      .def_readwrite("dataset", &AnalyzeConfig::dataset)
      .def_readwrite("replications", &AnalyzeConfig::replications)
      .def_readwrite("internal_cases", &AnalyzeConfig::internal_cases)
      .def_readwrite("internal_controls", &AnalyzeConfig::internal_controls)
      .def_readwrite("seed", &AnalyzeConfig::seed)
      .def_readwrite("ci_level", &AnalyzeConfig::ci_level)
      .def_readwrite("solver", &AnalyzeConfig::solver);

  m.def(
      "_analyze_real_json",
      [](const AnalyzeConfig& cfg) { return analyze_real(cfg).dump(); }, py::arg("config"),
      py::call_guard<py::gil_scoped_release>());
  m.def(
      "_mc_report_json",
      [](const McReport& report, const Scheme& scheme) {
        return mc_report_json(report, scheme).dump();
      },
      py::arg("report"), py::arg("scheme"));

  m.attr("__version__") = "0.1.0";
}
