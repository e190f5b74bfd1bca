#include "elcc/io.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include "elcc/baselines.hpp"
#include "elcc/solver.hpp"

namespace elcc {
namespace {

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

bool is_missing_token(const std::string& t) {
  if (t.empty()) return true;
  std::string low;
  for (char c : t) low.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  return low == "na" || low == "nan" || low == "null";
}

double parse_number(const std::string& token, const std::string& path, long row,
                    const std::string& column) {
  double v = 0.0;
  const char* b = token.data();
  const char* e = b + token.size();
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e || !std::isfinite(v))
    throw ElError(ErrorCategory::Schema,
                  "dataset " + path + ": row " + std::to_string(row) + ", column '" + column +
                      "': cannot parse '" + token + "' as a finite number");
  return v;
}

std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == delim) {
      out.push_back(trim(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(trim(cur));
  return out;
}

std::string num_str(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string fixed_str(double v, int width, int prec) {
  if (std::isnan(v)) {
    std::string s = "-";
    return std::string(std::max(0, width - static_cast<int>(s.size())), ' ') + s;
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%*.*f", width, prec, v);
  return buf;
}

std::string pad_right(const std::string& s, size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

// ---- config helpers -------------------------------------------------------

[[noreturn]] void config_fail(const std::string& file, const std::string& field,
                              const std::string& why) {
  throw ElError(ErrorCategory::Config, "config " + file + ": field '" + field + "' " + why);
}

const ordered_json* find_key(const ordered_json& j, const std::string& key) {
  auto it = j.find(key);
  return it == j.end() ? nullptr : &*it;
}

double get_number(const ordered_json& j, const std::string& file, const std::string& field,
                  double fallback, bool required = false) {
  const ordered_json* v = find_key(j, field.substr(field.rfind('.') + 1));
  if (!v) {
    if (required) config_fail(file, field, "is required");
    return fallback;
  }
  if (!v->is_number()) config_fail(file, field, "must be a number");
  return v->get<double>();
}

Eigen::VectorXd json_vector(const ordered_json& v, const std::string& file,
                            const std::string& field) {
  if (!v.is_array() || v.empty()) config_fail(file, field, "must be a non-empty array");
  Eigen::VectorXd out(v.size());
  for (size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) config_fail(file, field, "must contain only numbers");
    out[static_cast<int>(i)] = v[i].get<double>();
  }
  return out;
}

Eigen::MatrixXd json_matrix(const ordered_json& v, const std::string& file,
                            const std::string& field) {
  if (!v.is_array() || v.empty()) config_fail(file, field, "must be an array of rows");
  const size_t cols = v[0].is_array() ? v[0].size() : 0;
  if (cols == 0) config_fail(file, field, "rows must be non-empty arrays");
  Eigen::MatrixXd out(v.size(), cols);
  for (size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_array() || v[i].size() != cols)
      config_fail(file, field, "rows must all have the same length");
    for (size_t k = 0; k < cols; ++k) {
      if (!v[i][k].is_number()) config_fail(file, field, "must contain only numbers");
      out(static_cast<int>(i), static_cast<int>(k)) = v[i][k].get<double>();
    }
  }
  return out;
}

ordered_json vec_json(VecRef v) {
  ordered_json a = ordered_json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

}  // namespace

Dataset load_dataset(const std::string& path, const DatasetOptions& opts) {
  std::ifstream in(path);
  if (!in)
    throw ElError(ErrorCategory::Schema, "dataset " + path + ": cannot open file");
  std::string line;
  if (!std::getline(in, line))
    throw ElError(ErrorCategory::Schema, "dataset " + path + ": empty file");
  std::vector<std::string> header = split_line(line, opts.delimiter);

  int outcome_idx = -1;
  for (size_t j = 0; j < header.size(); ++j) {
    if (header[j] == opts.outcome_column) {
      if (outcome_idx >= 0)
        throw ElError(ErrorCategory::Schema,
                      "dataset " + path + ": outcome column '" + opts.outcome_column +
                          "' appears more than once in the header");
      outcome_idx = static_cast<int>(j);
    }
  }
  if (outcome_idx < 0)
    throw ElError(ErrorCategory::Schema, "dataset " + path + ": outcome column '" +
                                             opts.outcome_column + "' not found in header");

  std::vector<int> cov_idx;
  std::vector<std::string> cov_names;
  if (opts.covariate_columns.empty()) {
    for (size_t j = 0; j < header.size(); ++j)
      if (static_cast<int>(j) != outcome_idx) {
        cov_idx.push_back(static_cast<int>(j));
        cov_names.push_back(header[j]);
      }
  } else {
    for (const std::string& name : opts.covariate_columns) {
      int found = -1;
      for (size_t j = 0; j < header.size(); ++j)
        if (header[j] == name) {
          if (found >= 0)
            throw ElError(ErrorCategory::Schema, "dataset " + path + ": covariate column '" +
                                                     name + "' appears more than once");
          found = static_cast<int>(j);
        }
      if (found < 0)
        throw ElError(ErrorCategory::Schema,
                      "dataset " + path + ": covariate column '" + name + "' not found");
      if (found == outcome_idx)
        throw ElError(ErrorCategory::Schema, "dataset " + path + ": column '" + name +
                                                 "' is both outcome and covariate");
      cov_idx.push_back(found);
      cov_names.push_back(name);
    }
  }
  if (cov_idx.empty())
    throw ElError(ErrorCategory::Schema, "dataset " + path + ": no covariate columns");

  std::vector<int> ys;
  std::vector<double> xs;
  std::vector<long> missing_rows;
  long row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    std::vector<std::string> f = split_line(line, opts.delimiter);
    if (f.size() != header.size())
      throw ElError(ErrorCategory::Schema,
                    "dataset " + path + ": row " + std::to_string(row) + " has " +
                        std::to_string(f.size()) + " fields, header has " +
                        std::to_string(header.size()));
    bool missing = false;
    for (int j : cov_idx) missing = missing || is_missing_token(f[j]);
    missing = missing || is_missing_token(f[outcome_idx]);
    if (missing) {
      missing_rows.push_back(row);
      continue;
    }
    const std::string& yt = f[outcome_idx];
    if (yt != "0" && yt != "1")
      throw ElError(ErrorCategory::Schema, "dataset " + path + ": row " + std::to_string(row) +
                                               ": outcome '" + yt + "' is not 0 or 1");
    ys.push_back(yt == "1" ? 1 : 0);
    for (int j : cov_idx) xs.push_back(parse_number(f[j], path, row, header[j]));
  }
  if (!missing_rows.empty()) {
    std::string rows_str;
    for (size_t i = 0; i < missing_rows.size() && i < 8; ++i)
      rows_str += (i ? ", " : "") + std::to_string(missing_rows[i]);
    if (missing_rows.size() > 8) rows_str += ", ...";
    throw ElError(ErrorCategory::Schema,
                  "dataset " + path + ": " + std::to_string(missing_rows.size()) +
                      " rows with missing values (rows " + rows_str +
                      "); remove or impute them first");
  }
  const int n = static_cast<int>(ys.size());
  const int p = static_cast<int>(cov_idx.size());
  if (n == 0) throw ElError(ErrorCategory::Schema, "dataset " + path + ": no data rows");

  Eigen::MatrixXd X(n, p);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < p; ++j) X(i, j) = xs[static_cast<size_t>(i) * p + j];
  Eigen::VectorXi y = Eigen::Map<Eigen::VectorXi>(ys.data(), n);

  Eigen::VectorXd means, sds;
  if (opts.standardize) {
    means = X.colwise().mean().transpose();
    Eigen::MatrixXd centered = X.rowwise() - means.transpose();
    Eigen::VectorXd var =
        (centered.array().square().colwise().sum() / std::max(1, n - 1)).matrix().transpose();
    sds = var.array().sqrt();
    for (int j = 0; j < p; ++j)
      if (!(sds[j] > 0.0))
        throw ElError(ErrorCategory::Schema, "dataset " + path + ": column '" + cov_names[j] +
                                                 "' is constant, cannot standardize");
    X = centered.array().rowwise() / sds.transpose().array();
  }

  Dataset out{CaseControlSample(std::move(y), std::move(X))};
  out.covariate_names = std::move(cov_names);
  out.means = std::move(means);
  out.sds = std::move(sds);
  return out;
}

ordered_json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ElError(ErrorCategory::Config, "config " + path + ": cannot open file");
  try {
    return ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ElError(ErrorCategory::Config, "config " + path + ": invalid JSON: " + e.what());
  }
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ElError(ErrorCategory::Config, "cannot open output file " + path);
  out << content;
  if (!out) throw ElError(ErrorCategory::Config, "failed writing output file " + path);
}

RunConfig load_run_config(const std::string& path) {
  ordered_json j = read_json_file(path);
  RunConfig rc;

  const ordered_json* data = find_key(j, "data");
  if (!data || !data->is_object()) config_fail(path, "data", "must be an object");
  const ordered_json* dp = find_key(*data, "path");
  if (!dp || !dp->is_string()) config_fail(path, "data.path", "must be a string");
  rc.data_path = dp->get<std::string>();
  if (const ordered_json* v = find_key(*data, "outcome")) {
    if (!v->is_string()) config_fail(path, "data.outcome", "must be a string");
    rc.dataset.outcome_column = v->get<std::string>();
  }
  if (const ordered_json* v = find_key(*data, "covariates")) {
    if (!v->is_array()) config_fail(path, "data.covariates", "must be an array of column names");
    for (const auto& e : *v) {
      if (!e.is_string()) config_fail(path, "data.covariates", "must contain strings");
      rc.dataset.covariate_columns.push_back(e.get<std::string>());
    }
  }
  if (const ordered_json* v = find_key(*data, "standardize")) {
    if (!v->is_boolean()) config_fail(path, "data.standardize", "must be true or false");
    rc.dataset.standardize = v->get<bool>();
  }
  if (const ordered_json* v = find_key(*data, "delimiter")) {
    if (!v->is_string() || v->get<std::string>().size() != 1)
      config_fail(path, "data.delimiter", "must be a single character");
    rc.dataset.delimiter = v->get<std::string>()[0];
  }

  const ordered_json* ext = find_key(j, "external");
  if (!ext || !ext->is_object()) config_fail(path, "external", "must be an object");
  const ordered_json* mode = find_key(*ext, "mode");
  if (!mode || !mode->is_string()) config_fail(path, "external.mode", "must be a string");
  std::string m = mode->get<std::string>();
  if (m == "given")
    rc.mode = WeightMode::Given;
  else if (m == "optimal")
    rc.mode = WeightMode::Optimal;
  else if (m == "population")
    rc.mode = WeightMode::PopulationLevel;
  else
    config_fail(path, "external.mode", "must be 'given', 'optimal' or 'population'");
  const ordered_json* mu = find_key(*ext, "mu_tilde");
  if (!mu) config_fail(path, "external.mu_tilde", "is required");
  rc.mu_tilde = json_vector(*mu, path, "external.mu_tilde");
  if (rc.mode != WeightMode::PopulationLevel) {
    rc.n_external = get_number(*ext, path, "external.n_external", 0.0, /*required=*/true);
    if (!(rc.n_external >= 1.0))
      config_fail(path, "external.n_external", "must be at least 1");
  }
  if (rc.mode == WeightMode::Given) {
    const ordered_json* w = find_key(*ext, "W");
    if (!w) config_fail(path, "external.W", "is required for mode 'given'");
    rc.W = json_matrix(*w, path, "external.W");
  }

  if (const ordered_json* cons = find_key(j, "constraint")) {
    if (!cons->is_object()) config_fail(path, "constraint", "must be an object");
    std::string kind = "identity";
    if (const ordered_json* k = find_key(*cons, "kind")) {
      if (!k->is_string()) config_fail(path, "constraint.kind", "must be a string");
      kind = k->get<std::string>();
    }
    if (kind == "identity") {
      rc.constraint = ConstraintSpec::identity();
    } else if (kind == "subset") {
      const ordered_json* idx = find_key(*cons, "indices");
      if (!idx || !idx->is_array() || idx->empty())
        config_fail(path, "constraint.indices", "must be a non-empty array for kind 'subset'");
      std::vector<int> indices;
      for (const auto& e : *idx) {
        if (!e.is_number_integer()) config_fail(path, "constraint.indices", "must be integers");
        indices.push_back(e.get<int>());
      }
      rc.constraint = ConstraintSpec::subset(std::move(indices));
    } else if (kind == "affine") {
      const ordered_json* A = find_key(*cons, "A");
      const ordered_json* b = find_key(*cons, "b");
      if (!A) config_fail(path, "constraint.A", "is required for kind 'affine'");
      if (!b) config_fail(path, "constraint.b", "is required for kind 'affine'");
      rc.constraint =
          ConstraintSpec::affine(json_matrix(*A, path, "constraint.A"),
                                 json_vector(*b, path, "constraint.b"));
    } else {
      config_fail(path, "constraint.kind", "must be 'identity', 'subset' or 'affine'");
    }
  }

  rc.ci_level = get_number(j, path, "ci_level", 0.95);
  if (!(rc.ci_level > 0.0 && rc.ci_level < 1.0))
    config_fail(path, "ci_level", "must lie strictly between 0 and 1");

  if (const ordered_json* s = find_key(j, "solver")) {
    if (!s->is_object()) config_fail(path, "solver", "must be an object");
    rc.solver.inner_tol = get_number(*s, path, "solver.inner_tol", rc.solver.inner_tol);
    rc.solver.outer_tol = get_number(*s, path, "solver.outer_tol", rc.solver.outer_tol);
    rc.solver.max_inner_iterations = static_cast<int>(get_number(
        *s, path, "solver.max_inner_iterations", rc.solver.max_inner_iterations));
    rc.solver.max_outer_iterations = static_cast<int>(get_number(
        *s, path, "solver.max_outer_iterations", rc.solver.max_outer_iterations));
    rc.solver.fd_step = get_number(*s, path, "solver.fd_step", rc.solver.fd_step);
    rc.solver.line_search_shrink =
        get_number(*s, path, "solver.line_search_shrink", rc.solver.line_search_shrink);
    rc.solver.line_search_c1 =
        get_number(*s, path, "solver.line_search_c1", rc.solver.line_search_c1);
    rc.solver.gamma_bound = get_number(*s, path, "solver.gamma_bound", rc.solver.gamma_bound);
    for (double v : {rc.solver.inner_tol, rc.solver.outer_tol, rc.solver.fd_step,
                     rc.solver.line_search_shrink, rc.solver.line_search_c1,
                     rc.solver.gamma_bound})
      if (!(v > 0.0)) config_fail(path, "solver", "tolerances and steps must be positive");
    if (rc.solver.line_search_shrink >= 1.0)
      config_fail(path, "solver.line_search_shrink", "must be below 1");
  }
  return rc;
}

// ---- reports ---------------------------------------------------------------

ordered_json fit_report(const RunConfig& cfg, const Dataset& data,
                        const FitWithCovariance& result) {
  const FitResult& fit = result.fit;
  const int p = fit.theta.p(), q = fit.theta.q();
  const bool internal = result.estimator == "known-mu";

  ordered_json j;
  j["operation"] = "fit";
  j["estimator"] = result.estimator;
  j["data"] = {{"path", cfg.data_path},
               {"n", data.sample.n},
               {"cases", data.sample.n_case},
               {"controls", data.sample.n_control},
               {"covariates", data.covariate_names},
               {"standardized", cfg.dataset.standardize}};
  const char* kind = cfg.constraint.kind == ConstraintSpec::Kind::Identity   ? "identity"
                     : cfg.constraint.kind == ConstraintSpec::Kind::Subset ? "subset"
                                                                             : "affine";
  j["constraint"] = {{"kind", kind}, {"q", q}};
  const char* mode = cfg.mode == WeightMode::Given     ? "given"
                     : cfg.mode == WeightMode::Optimal ? "optimal"
                                                       : "population";
  j["external"] = {{"mode", mode},
                   {"mu_tilde", vec_json(cfg.mu_tilde)},
                   {"n_external", cfg.n_external}};
  j["ci_level"] = cfg.ci_level;

  j["estimates"] = {{"gamma", fit.theta.gamma},
                    {"alpha_star", fit.theta.alpha_star},
                    {"alpha", fit.theta.alpha()},
                    {"beta", vec_json(fit.theta.beta)},
                    {"mu", vec_json(fit.theta.mu)},
                    {"case_proportion", fit.theta.case_proportion()}};

  ordered_json se;
  se["gamma"] = result.cov.se_theta[0];
  se["alpha"] = result.cov.se_alpha;
  se["beta"] = vec_json(result.cov.se_theta.segment(2, p));
  se["mu"] = internal ? ordered_json(nullptr)
                      : ordered_json(vec_json(result.cov.se_theta.segment(2 + p, q)));
  se["case_proportion"] = result.cov.se_pi;
  j["standard_errors"] = std::move(se);

  auto interval = [&](double est, double sd) {
    auto ci = wald_ci(est, sd, cfg.ci_level);
    return ordered_json::array({ci.first, ci.second});
  };
  ordered_json cis;
  cis["alpha"] = interval(fit.theta.alpha(), result.cov.se_alpha);
  ordered_json bl = ordered_json::array();
  for (int k = 0; k < p; ++k)
    bl.push_back(interval(fit.theta.beta[k], result.cov.se_theta[2 + k]));
  cis["beta"] = std::move(bl);
  cis["case_proportion"] = interval(fit.theta.case_proportion(), result.cov.se_pi);
  j["confidence_intervals"] = std::move(cis);

  j["diagnostics"] = {{"objective", fit.objective},
                      {"gradient_norm", fit.diagnostics.grad_norm},
                      {"constraint_residual", fit.diagnostics.constraint_residual},
                      {"outer_iterations", fit.diagnostics.outer_iterations},
                      {"inner_iterations", fit.diagnostics.inner_iterations_total},
                      {"used_polish", fit.diagnostics.used_polish},
                      {"gamma_at_bound", fit.diagnostics.gamma_at_bound},
                      {"tilt_saturated", fit.diagnostics.tilt_saturated},
                      {"converged", fit.converged}};
  return j;
}

std::string render_fit_text(const ordered_json& j) {
  std::ostringstream os;
  const auto& d = j.at("data");
  os << "case-control fit with external moment information\n";
  os << "estimator: " << j.at("estimator").get<std::string>() << "   constraints: "
     << j.at("constraint").at("kind").get<std::string>() << " (q="
     << j.at("constraint").at("q").get<int>() << ")   external mode: "
     << j.at("external").at("mode").get<std::string>() << "\n";
  os << "data: " << d.at("path").get<std::string>() << " (n=" << d.at("n").get<int>()
     << ", cases=" << d.at("cases").get<int>() << ", controls=" << d.at("controls").get<int>()
     << ")\n\n";

  const auto& est = j.at("estimates");
  const auto& se = j.at("standard_errors");
  const auto& ci = j.at("confidence_intervals");
  std::vector<std::string> names = d.at("covariates").get<std::vector<std::string>>();
  double level = j.at("ci_level").get<double>();
  char head[128];
  std::snprintf(head, sizeof(head), "%-22s %10s %10s   %s%% interval", "parameter", "estimate",
                "se", num_str(100.0 * level).c_str());
  os << head << "\n";

  auto row = [&](const std::string& name, double v, const ordered_json* sj,
                 const ordered_json* cj) {
    os << pad_right(name, 22) << " " << fixed_str(v, 10, 4) << " ";
    os << fixed_str(sj && !sj->is_null() ? sj->get<double>()
                                         : std::numeric_limits<double>::quiet_NaN(),
                    10, 4);
    if (cj)
      os << "   [" << fixed_str((*cj)[0].get<double>(), 9, 4) << ", "
         << fixed_str((*cj)[1].get<double>(), 9, 4) << "]";
    os << "\n";
  };

  row("alpha", est.at("alpha").get<double>(), &se.at("alpha"), &ci.at("alpha"));
  const auto& betas = est.at("beta");
  for (size_t k = 0; k < betas.size(); ++k) {
    std::string nm = k < names.size() ? "beta[" + names[k] + "]" : "beta[" + std::to_string(k) + "]";
    row(nm, betas[k].get<double>(), &se.at("beta")[k], &ci.at("beta")[k]);
  }
  row("case proportion", est.at("case_proportion").get<double>(), &se.at("case_proportion"),
      &ci.at("case_proportion"));
  row("gamma", est.at("gamma").get<double>(), &se.at("gamma"), nullptr);
  row("alpha_star", est.at("alpha_star").get<double>(), nullptr, nullptr);
  const auto& mus = est.at("mu");
  const auto& semu = se.at("mu");
  for (size_t k = 0; k < mus.size(); ++k) {
    std::string nm = k < names.size() ? "mu[" + names[k] + "]" : "mu[" + std::to_string(k) + "]";
    row(nm, mus[k].get<double>(), semu.is_null() ? nullptr : &semu[k], nullptr);
  }

  const auto& diag = j.at("diagnostics");
  os << "\nobjective " << num_str(diag.at("objective").get<double>()) << ", gradient norm "
     << num_str(diag.at("gradient_norm").get<double>()) << ", constraint residual "
     << num_str(diag.at("constraint_residual").get<double>()) << "\n";
  os << "iterations: outer " << diag.at("outer_iterations").get<int>() << ", inner "
     << diag.at("inner_iterations").get<int>()
     << (diag.at("used_polish").get<bool>() ? ", with polish" : "") << "\n";
  if (diag.at("gamma_at_bound").get<bool>())
    os << "warning: gamma stopped at its bound; the case proportion is at the edge of its range\n";
  if (diag.at("tilt_saturated").get<bool>())
    os << "warning: density tilt saturated its clamp during optimization\n";
  return os.str();
}

ordered_json mc_report_json(const McReport& report, const Scheme& scheme) {
  ordered_json j;
  j["operation"] = "simulate";
  j["scheme"] = {{"name", scheme.name},
                 {"alpha", scheme.alpha},
                 {"beta", vec_json(scheme.beta)},
                 {"cases", scheme.n_case},
                 {"controls", scheme.n_control},
                 {"external_multiplier", scheme.external_multiplier},
                 {"q_design", report.q_design},
                 {"p_true", report.p_true}};
  j["replications"] = report.replications;
  j["master_seed"] = report.master_seed;
  j["ci_level"] = report.ci_level;

  ordered_json es = ordered_json::array();
  for (const EstimatorReport& er : report.estimators) {
    ordered_json e;
    e["name"] = estimator_name(er.estimator);
    e["failures"] = er.failures;
    auto stats_json = [](const ParamStats& s) {
      return ordered_json{
          {"bias", s.bias}, {"sd", s.sd}, {"ese", s.ese}, {"coverage", s.coverage}};
    };
    e["alpha"] = stats_json(er.alpha);
    ordered_json bs = ordered_json::array();
    for (const ParamStats& s : er.beta) bs.push_back(stats_json(s));
    e["beta"] = std::move(bs);
    e["case_proportion"] = {{"bias", er.pi_bias}, {"sd", er.pi_sd}};
    es.push_back(std::move(e));
  }
  j["estimators"] = std::move(es);
  j["failure_flag"] = report.failure_flag;
  return j;
}

std::string render_mc_text(const ordered_json& j) {
  std::ostringstream os;
  const auto& s = j.at("scheme");
  os << "monte carlo study: scheme " << s.at("name").get<std::string>() << "\n";
  os << "cases " << s.at("cases").get<int>() << ", controls " << s.at("controls").get<int>()
     << ", external multiplier " << num_str(s.at("external_multiplier").get<double>())
     << ", replications " << j.at("replications").get<int>() << ", seed "
     << j.at("master_seed").get<std::uint64_t>() << "\n";
  os << "population case rate " << num_str(s.at("p_true").get<double>())
     << ", design case fraction " << num_str(s.at("q_design").get<double>()) << ", ci level "
     << num_str(j.at("ci_level").get<double>()) << "\n\n";

  char head[128];
  std::snprintf(head, sizeof(head), "%-10s %-12s %9s %9s %9s %9s", "estimator", "parameter",
                "bias", "sd", "ese", "coverage");
  os << head << "\n";
  for (const auto& e : j.at("estimators")) {
    std::string name = e.at("name").get<std::string>();
    auto line = [&](const std::string& par, const ordered_json& st, bool with_ci) {
      os << pad_right(name, 10) << " " << pad_right(par, 12) << " "
         << fixed_str(st.at("bias").get<double>(), 9, 4) << " "
         << fixed_str(st.at("sd").get<double>(), 9, 4);
      if (with_ci)
        os << " " << fixed_str(st.at("ese").get<double>(), 9, 4) << " "
           << fixed_str(st.at("coverage").get<double>(), 9, 3);
      else
        os << " " << fixed_str(std::numeric_limits<double>::quiet_NaN(), 9, 4) << " "
           << fixed_str(std::numeric_limits<double>::quiet_NaN(), 9, 3);
      os << "\n";
    };
    line("alpha", e.at("alpha"), true);
    const auto& bs = e.at("beta");
    for (size_t k = 0; k < bs.size(); ++k) line("beta[" + std::to_string(k + 1) + "]", bs[k], true);
    line("case-prop", e.at("case_proportion"), false);
    if (e.at("failures").get<int>() > 0)
      os << pad_right(name, 10) << " failures: " << e.at("failures").get<int>() << "\n";
  }
  if (j.at("failure_flag").get<bool>())
    os << "\nwarning: an estimator failed on more than 2% of replications\n";
  return os.str();
}

// ---- split-sample analysis --------------------------------------------------

ordered_json analyze_real(const AnalyzeConfig& cfg) {
  DatasetOptions opts = cfg.dataset;
  Dataset ds = load_dataset(cfg.data_path, opts);
  const CaseControlSample& full = ds.sample;
  const int n = full.n, p = full.p;

  if (cfg.replications < 1)
    throw ElError(ErrorCategory::Protocol, "analyze: replications must be >= 1");

  MleResult bench = fit_prospective_mle(full, cfg.solver);

  struct Acc {
    double alpha = 0.0, se_alpha = 0.0, pi = 0.0;
    Eigen::VectorXd beta, se_beta;
    int count = 0;
  };
  Acc mle_acc, el_acc;
  mle_acc.beta = Eigen::VectorXd::Zero(p);
  mle_acc.se_beta = Eigen::VectorXd::Zero(p);
  el_acc.beta = Eigen::VectorXd::Zero(p);
  el_acc.se_beta = Eigen::VectorXd::Zero(p);
  int mle_failures = 0, el_failures = 0;

  const int half = n / 2;
  ConstraintSpec spec = ConstraintSpec::identity();

  for (int r = 0; r < cfg.replications; ++r) {
    Rng rng(derive_seed(cfg.seed, r));
    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = i;
    for (int i = n - 1; i > 0; --i) {
      int k = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(i + 1));
      std::swap(perm[i], perm[k]);
    }

    std::vector<int> case_idx, control_idx;
    for (int i = 0; i < half; ++i)
      (full.y[perm[i]] == 1 ? case_idx : control_idx).push_back(perm[i]);
    if (static_cast<int>(case_idx.size()) < cfg.internal_cases ||
        static_cast<int>(control_idx.size()) < cfg.internal_controls)
      throw ElError(ErrorCategory::Protocol,
                    "analyze: internal half has " + std::to_string(case_idx.size()) +
                        " cases and " + std::to_string(control_idx.size()) +
                        " controls; needs at least " + std::to_string(cfg.internal_cases) + "+" +
                        std::to_string(cfg.internal_controls));

    const int ni = cfg.internal_cases + cfg.internal_controls;
    Eigen::MatrixXd Xi(ni, p);
    Eigen::VectorXi yi(ni);
    for (int i = 0; i < cfg.internal_cases; ++i) {
      Xi.row(i) = full.X.row(case_idx[i]);
      yi[i] = 1;
    }
    for (int i = 0; i < cfg.internal_controls; ++i) {
      Xi.row(cfg.internal_cases + i) = full.X.row(control_idx[i]);
      yi[cfg.internal_cases + i] = 0;
    }
    CaseControlSample internal(std::move(yi), std::move(Xi));

    Eigen::VectorXd mu = Eigen::VectorXd::Zero(p);
    for (int i = half; i < n; ++i) mu += full.X.row(perm[i]).transpose();
    mu /= (n - half);

    try {
      MleResult m = fit_prospective_mle(internal, cfg.solver);
      mle_acc.alpha += m.alpha_hat;
      mle_acc.beta += m.beta_hat;
      mle_acc.se_alpha += m.se[0];
      mle_acc.se_beta += m.se.tail(p);
      mle_acc.pi += m.naive_case_prop;
      mle_acc.count += 1;
    } catch (const ElError&) {
      ++mle_failures;
    }
    try {
      FitWithCovariance f = fit_auto(
          internal, ExternalSummary::optimal(mu, static_cast<double>(n - half)), spec,
          cfg.solver);
      el_acc.alpha += f.fit.theta.alpha();
      el_acc.beta += f.fit.theta.beta;
      el_acc.se_alpha += f.cov.se_alpha;
      el_acc.se_beta += f.cov.se_theta.segment(2, p);
      el_acc.pi += f.fit.theta.case_proportion();
      el_acc.count += 1;
    } catch (const ElError&) {
      ++el_failures;
    }
  }

  auto acc_json = [&](const Acc& a) {
    if (a.count == 0) return ordered_json(nullptr);
    ordered_json o;
    o["alpha"] = a.alpha / a.count;
    o["beta"] = vec_json(a.beta / a.count);
    o["se_alpha"] = a.se_alpha / a.count;
    o["se_beta"] = vec_json(a.se_beta / a.count);
    o["case_proportion"] = a.pi / a.count;
    o["replications_used"] = a.count;
    return o;
  };

  ordered_json j;
  j["operation"] = "analyze";
  j["data"] = {{"path", cfg.data_path},
               {"n", n},
               {"cases", full.n_case},
               {"controls", full.n_control},
               {"covariates", ds.covariate_names},
               {"standardized", opts.standardize}};
  j["protocol"] = {{"replications", cfg.replications},
                   {"internal_cases", cfg.internal_cases},
                   {"internal_controls", cfg.internal_controls},
                   {"external_half", n - half},
                   {"seed", cfg.seed},
                   {"ci_level", cfg.ci_level}};
  j["full_data_mle"] = {{"alpha", bench.alpha_hat},
                        {"beta", vec_json(bench.beta_hat)},
                        {"se_alpha", bench.se[0]},
                        {"se_beta", vec_json(bench.se.tail(p))},
                        {"case_proportion",
                         static_cast<double>(full.n_case) / full.n}};
  j["replication_averages"] = {{"internal_mle", acc_json(mle_acc)},
                               {"penalized_el", acc_json(el_acc)}};
  j["failures"] = {{"internal_mle", mle_failures}, {"penalized_el", el_failures}};
  return j;
}

std::string render_analyze_text(const ordered_json& j) {
  std::ostringstream os;
  const auto& d = j.at("data");
  const auto& pr = j.at("protocol");
  os << "split-sample analysis: " << d.at("path").get<std::string>() << "\n";
  os << "n=" << d.at("n").get<int>() << " (cases " << d.at("cases").get<int>() << ", controls "
     << d.at("controls").get<int>() << "), replications "
     << pr.at("replications").get<int>() << ", internal "
     << pr.at("internal_cases").get<int>() << "+" << pr.at("internal_controls").get<int>()
     << ", external half " << pr.at("external_half").get<int>() << ", seed "
     << pr.at("seed").get<std::uint64_t>() << "\n\n";

  std::vector<std::string> names = d.at("covariates").get<std::vector<std::string>>();
  os << pad_right("row", 22) << " " << pad_right("alpha", 10);
  for (const auto& nm : names) os << " " << pad_right("b[" + nm + "]", 10);
  os << " " << pad_right("case-prop", 10) << "\n";

  auto row = [&](const std::string& label, double alpha, const ordered_json& beta, double pi) {
    os << pad_right(label, 22) << " " << fixed_str(alpha, 10, 4);
    for (size_t k = 0; k < beta.size(); ++k) os << " " << fixed_str(beta[k].get<double>(), 10, 4);
    os << " " << fixed_str(pi, 10, 4) << "\n";
  };
  auto se_row = [&](const std::string& label, double se_alpha, const ordered_json& se_beta) {
    os << pad_right(label, 22) << " " << fixed_str(se_alpha, 10, 4);
    for (size_t k = 0; k < se_beta.size(); ++k)
      os << " " << fixed_str(se_beta[k].get<double>(), 10, 4);
    os << " " << fixed_str(std::numeric_limits<double>::quiet_NaN(), 10, 4) << "\n";
  };

  const auto& fd = j.at("full_data_mle");
  row("full-data mle", fd.at("alpha").get<double>(), fd.at("beta"),
      fd.at("case_proportion").get<double>());
  se_row("  se", fd.at("se_alpha").get<double>(), fd.at("se_beta"));

  const auto& ra = j.at("replication_averages");
  const auto& im = ra.at("internal_mle");
  if (!im.is_null()) {
    row("avg internal cc mle", im.at("alpha").get<double>(), im.at("beta"),
        im.at("case_proportion").get<double>());
    se_row("  avg se", im.at("se_alpha").get<double>(), im.at("se_beta"));
  }
  const auto& el = ra.at("penalized_el");
  if (!el.is_null()) {
    row("avg penalized el", el.at("alpha").get<double>(), el.at("beta"),
        el.at("case_proportion").get<double>());
    se_row("  avg se", el.at("se_alpha").get<double>(), el.at("se_beta"));
  }
  const auto& fl = j.at("failures");
  if (fl.at("internal_mle").get<int>() > 0 || fl.at("penalized_el").get<int>() > 0)
    os << "\nfailures: internal mle " << fl.at("internal_mle").get<int>() << ", penalized el "
       << fl.at("penalized_el").get<int>() << "\n";
  return os.str();
}

// ---- command line ------------------------------------------------------------

namespace {

void emit(const ordered_json& report, const std::string& text, const std::string& out_json,
          const std::string& out_text) {
  std::cout << text;
  if (!out_json.empty()) write_text_file(out_json, report.dump(2) + "\n");
  if (!out_text.empty()) write_text_file(out_text, text);
}

int run_fit(const std::string& config_path, const std::string& data_override,
            const std::string& out_json, const std::string& out_text) {
  RunConfig rc = load_run_config(config_path);
  if (!data_override.empty()) rc.data_path = data_override;
  Dataset ds = load_dataset(rc.data_path, rc.dataset);
  rc.constraint.validate(ds.sample.p);
  const int q = rc.constraint.q(ds.sample.p);
  if (rc.mu_tilde.size() != q)
    throw ElError(ErrorCategory::Config,
                  "config " + config_path + ": external.mu_tilde has length " +
                      std::to_string(rc.mu_tilde.size()) + " but the constraint gives q = " +
                      std::to_string(q));
  ExternalSummary ext =
      rc.mode == WeightMode::Given
          ? ExternalSummary::given(rc.mu_tilde, rc.n_external, rc.W)
          : rc.mode == WeightMode::Optimal
                ? ExternalSummary::optimal(rc.mu_tilde, rc.n_external)
                : ExternalSummary::population(rc.mu_tilde);
  FitWithCovariance res = fit_auto(ds.sample, ext, rc.constraint, rc.solver);
  ordered_json rep = fit_report(rc, ds, res);
  emit(rep, render_fit_text(rep), out_json, out_text);
  return 0;
}

std::vector<Estimator> parse_estimators(const std::string& csv) {
  std::vector<Estimator> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (tok == "mle")
      out.push_back(Estimator::MleOnly);
    else if (tok == "fixed")
      out.push_back(Estimator::FixedW);
    else if (tok == "optimal")
      out.push_back(Estimator::OptimalW);
    else if (tok == "known")
      out.push_back(Estimator::KnownMu);
    else
      throw ElError(ErrorCategory::Config,
                    "estimators: unknown token '" + tok +
                        "' (expected mle, fixed, optimal, known)");
  }
  if (out.empty()) throw ElError(ErrorCategory::Config, "estimators: empty list");
  return out;
}

}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"case-control logistic estimation with external moment information"};
  app.require_subcommand(1);

  auto* fit = app.add_subcommand("fit", "fit a dataset according to a JSON config");
  std::string fit_config, fit_data, fit_out, fit_text;
  fit->add_option("--config", fit_config, "JSON run configuration")->required();
  fit->add_option("--data", fit_data, "override the dataset path from the config");
  fit->add_option("--out", fit_out, "write the JSON report here");
  fit->add_option("--text", fit_text, "write the text report here");

  auto* sim = app.add_subcommand("simulate", "run a seeded simulation study");
  std::string sim_scheme = "A1", sim_estimators = "mle,fixed,optimal,known";
  std::string sim_out, sim_text;
  double sim_multiplier = 1.0;
  int sim_reps = 200, sim_threads = 0;
  std::uint64_t sim_seed = 0x5eedULL;
  sim->add_option("--scheme", sim_scheme, "design name: A1 A2 B1 B2 C1 C2");
  sim->add_option("--multiplier", sim_multiplier, "external sample size as a multiple of n");
  sim->add_option("--reps", sim_reps, "number of replications");
  sim->add_option("--seed", sim_seed, "master seed");
  sim->add_option("--estimators", sim_estimators, "comma list: mle,fixed,optimal,known");
  sim->add_option("--threads", sim_threads, "worker threads (0: ELCC_THREADS or hardware)");
  sim->add_option("--out", sim_out, "write the JSON report here");
  sim->add_option("--text", sim_text, "write the text report here");

  auto* ana = app.add_subcommand("analyze", "split-sample study on a real dataset");
  std::string ana_data, ana_outcome = "outcome", ana_covariates, ana_out, ana_text;
  int ana_reps = 100, ana_cases = 100, ana_controls = 100;
  std::uint64_t ana_seed = 0x5eedULL;
  bool ana_raw = false;
  ana->add_option("--data", ana_data, "dataset path")->required();
  ana->add_option("--outcome", ana_outcome, "outcome column name");
  ana->add_option("--covariates", ana_covariates, "comma list of covariate columns");
  ana->add_option("--reps", ana_reps, "number of split replications");
  ana->add_option("--cases", ana_cases, "internal case subsample size");
  ana->add_option("--controls", ana_controls, "internal control subsample size");
  ana->add_option("--seed", ana_seed, "master seed");
  ana->add_flag("--no-standardize", ana_raw, "skip covariate standardization");
  ana->add_option("--out", ana_out, "write the JSON report here");
  ana->add_option("--text", ana_text, "write the text report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (fit->parsed()) return run_fit(fit_config, fit_data, fit_out, fit_text);
    if (sim->parsed()) {
      Scheme scheme = table_scheme(sim_scheme, sim_multiplier);
      McConfig mc;
      mc.replications = sim_reps;
      mc.master_seed = sim_seed;
      mc.threads = sim_threads;
      McReport report = run_monte_carlo(scheme, parse_estimators(sim_estimators), mc);
      ordered_json rep = mc_report_json(report, scheme);
      emit(rep, render_mc_text(rep), sim_out, sim_text);
      return 0;
    }
    if (!ana->parsed()) return 2;
    AnalyzeConfig ac;
    ac.data_path = ana_data;
    ac.dataset.outcome_column = ana_outcome;
    ac.dataset.standardize = !ana_raw;
    if (!ana_covariates.empty()) {
      std::stringstream ss(ana_covariates);
      std::string tok;
      while (std::getline(ss, tok, ',')) ac.dataset.covariate_columns.push_back(trim(tok));
    }
    ac.replications = ana_reps;
    ac.internal_cases = ana_cases;
    ac.internal_controls = ana_controls;
    ac.seed = ana_seed;
    ordered_json rep = analyze_real(ac);
    emit(rep, render_analyze_text(rep), ana_out, ana_text);
    return 0;
  } catch (const ElError& e) {
    std::cerr << "error (" << error_category_name(e.category()) << "): " << e.what() << "\n";
    switch (e.category()) {
      case ErrorCategory::InvalidInput:
      case ErrorCategory::Schema:
      case ErrorCategory::Config:
        return 2;
      default:
        return 3;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace elcc
