#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "elcc/inference.hpp"
#include "elcc/simulation.hpp"
#include "elcc/types.hpp"

namespace elcc {

using ordered_json = nlohmann::ordered_json;

// Column roles for a delimited text file with a header row. Outcomes must be
// literal 0/1; covariates must parse as finite numbers. Standardization is
// full-column z-scoring applied before any downstream splitting.
struct DatasetOptions {
  std::string outcome_column = "outcome";
  std::vector<std::string> covariate_columns;  // empty: every other column
  bool standardize = false;
  char delimiter = ',';
};

struct Dataset {
  CaseControlSample sample;
  std::vector<std::string> covariate_names;
  Eigen::VectorXd means, sds;  // populated when standardized

  Dataset(CaseControlSample s) : sample(std::move(s)) {}
};

Dataset load_dataset(const std::string& path, const DatasetOptions& opts);

// Fit-run specification, loadable from a JSON config file.
struct RunConfig {
  std::string data_path;
  DatasetOptions dataset;
  WeightMode mode = WeightMode::Optimal;
  Eigen::VectorXd mu_tilde;
  double n_external = 0.0;
  Eigen::MatrixXd W;  // Given mode
  ConstraintSpec constraint = ConstraintSpec::identity();
  double ci_level = 0.95;
  SolverConfig solver;
};

RunConfig load_run_config(const std::string& path);

// Split-sample study protocol on a real dataset: standardize, benchmark the
// full-data MLE, then repeatedly halve the data, subsample an internal
// case-control set, summarize the external half, and fit both estimators.
struct AnalyzeConfig {
  std::string data_path;
  DatasetOptions dataset;
  int replications = 100;
  int internal_cases = 100;
  int internal_controls = 100;
  std::uint64_t seed = 0x5eedULL;
  double ci_level = 0.95;
  SolverConfig solver;
};

ordered_json analyze_real(const AnalyzeConfig& cfg);

// Report documents and their plain-text renderings. Rendering reads only the
// JSON document, so serialize -> reload -> render is byte-identical.
ordered_json fit_report(const RunConfig& cfg, const Dataset& data,
                        const FitWithCovariance& result);
ordered_json mc_report_json(const McReport& report, const Scheme& scheme);

std::string render_fit_text(const ordered_json& report);
std::string render_mc_text(const ordered_json& report);
std::string render_analyze_text(const ordered_json& report);

void write_text_file(const std::string& path, const std::string& content);
ordered_json read_json_file(const std::string& path);

// Entry point behind the command-line binary: fit, simulate, analyze.
// Returns 0 on success, 2 for usage/config/schema problems, 3 for numerical
// failures.
int cli_main(int argc, char** argv);

}  // namespace elcc
