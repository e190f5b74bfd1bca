#include "elcc/solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "elcc/baselines.hpp"
#include "elcc/model.hpp"

namespace elcc {
namespace {

std::string fmt_g(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", x);
  return buf;
}

// Quadratic extension of log below 1/n: keeps the dual objective defined for
// every nu so outer line searches never step outside a domain.
struct LogStar {
  double eps, log_eps, inv_eps, inv_eps2;
  explicit LogStar(int n)
      : eps(1.0 / n),
        log_eps(std::log(1.0 / n)),
        inv_eps(static_cast<double>(n)),
        inv_eps2(static_cast<double>(n) * n) {}
  double value(double u) const {
    if (u >= eps) return std::log(u);
    return log_eps - 1.5 + 2.0 * u * inv_eps - 0.5 * u * u * inv_eps2;
  }
  double d1(double u) const {
    if (u >= eps) return 1.0 / u;
    return 2.0 * inv_eps - u * inv_eps2;
  }
  double d2(double u) const {
    if (u >= eps) return -1.0 / (u * u);
    return -inv_eps2;
  }
};

enum class DualStatus { Converged, MaxIterations, Diverged };

struct DualSolution {
  Eigen::VectorXd nu;
  Eigen::VectorXd u;      // 1 + H nu
  double residual = 0.0;  // || sum_i d1(u_i) H_i ||_2, the root equation itself
  double tol_eff = 0.0;   // requested tolerance floored at the sum's float granularity
  int iterations = 0;
  DualStatus status = DualStatus::MaxIterations;
};

// Damped Newton on D(nu) = -sum log*(1 + nu'H_i), the convex dual of the inner
// weight problem. Converges to the multiplier root when zero is interior to the
// convex hull of the H_i; diverges along a recession direction otherwise, which
// the caller detects through the weight-sum identity.
DualSolution solve_dual_impl(MatRef H, const SolverConfig& cfg, const Eigen::VectorXd* nu_init) {
  const int n = static_cast<int>(H.rows());
  const int m = static_cast<int>(H.cols());
  const LogStar ls(n);

  DualSolution sol;
  sol.nu = nu_init ? *nu_init : Eigen::VectorXd::Zero(m);
  if (sol.nu.size() != m)
    throw ElError(ErrorCategory::InvalidInput,
                  "solve_dual: nu_init has length " + std::to_string(nu_init->size()) +
                      ", expected " + std::to_string(m));
  sol.u = Eigen::VectorXd::Ones(n) + H * sol.nu;

  auto dual_value = [&](const Eigen::VectorXd& u) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += ls.value(u[i]);
    return -s;
  };
  double D = dual_value(sol.u);

  // The gradient is a cancelling sum of n terms; it cannot be driven below the
  // float granularity of that sum, so the tolerance is floored there.
  auto effective_tol = [&](const Eigen::VectorXd& w) {
    double gran = (H.cwiseAbs().transpose() * w.cwiseAbs()).norm();
    return std::max(cfg.inner_tol, 32.0 * std::numeric_limits<double>::epsilon() * gran);
  };

  Eigen::VectorXd w1(n), w2(n), grad(m), step(m);
  for (int it = 0; it < cfg.max_inner_iterations; ++it) {
    sol.iterations = it;
    for (int i = 0; i < n; ++i) w1[i] = ls.d1(sol.u[i]);
    grad = -(H.transpose() * w1);
    sol.residual = grad.norm();
    sol.tol_eff = effective_tol(w1);
    if (sol.residual <= sol.tol_eff) {
      sol.status = DualStatus::Converged;
      return sol;
    }
    for (int i = 0; i < n; ++i) w2[i] = -ls.d2(sol.u[i]);
    Eigen::MatrixXd hess = H.transpose() * w2.asDiagonal() * H;

    double base = std::max(hess.diagonal().maxCoeff(), 1e-300);
    double ridge = 0.0;
    bool descent = false;
    for (int attempt = 0; attempt < 14; ++attempt) {
      Eigen::LDLT<Eigen::MatrixXd> ldlt(
          ridge == 0.0 ? hess : Eigen::MatrixXd(hess + ridge * Eigen::MatrixXd::Identity(m, m)));
      if (ldlt.info() == Eigen::Success) {
        step = ldlt.solve(-grad);
        if (step.allFinite() && grad.dot(step) < 0.0) {
          descent = true;
          break;
        }
      }
      ridge = (ridge == 0.0) ? 1e-12 * base : ridge * 100.0;
    }
    if (!descent) return sol;  // stuck: report best iterate with MaxIterations status

    double gts = grad.dot(step);
    Eigen::VectorXd nu_c, u_c;

    // Endgame: once the predicted decrease is beneath the value's float
    // resolution, Armijo on the value only samples rounding noise. Switch the
    // acceptance test to the root residual, which stays meaningful to its own
    // granularity floor.
    if (std::abs(gts) <= 1e-12 * (1.0 + std::abs(D))) {
      double alpha = 1.0;
      bool improved = false;
      for (int h = 0; h < 12; ++h, alpha *= cfg.line_search_shrink) {
        nu_c = sol.nu + alpha * step;
        u_c = Eigen::VectorXd::Ones(n) + H * nu_c;
        for (int i = 0; i < n; ++i) w1[i] = ls.d1(u_c[i]);
        if ((H.transpose() * w1).norm() < sol.residual) {
          improved = true;
          break;
        }
      }
      if (!improved) return sol;  // at the numerical floor
      sol.nu.swap(nu_c);
      sol.u.swap(u_c);
      D = dual_value(sol.u);
      continue;
    }

    double alpha = 1.0;
    bool accepted = false;
    double D_c = 0.0;
    for (int h = 0; h < 60; ++h, alpha *= cfg.line_search_shrink) {
      nu_c = sol.nu + alpha * step;
      u_c = Eigen::VectorXd::Ones(n) + H * nu_c;
      D_c = dual_value(u_c);
      if (std::isfinite(D_c) && D_c <= D + cfg.line_search_c1 * alpha * gts) {
        accepted = true;
        break;
      }
    }
    if (!accepted) return sol;
    sol.nu.swap(nu_c);
    sol.u.swap(u_c);
    D = D_c;
    if (sol.nu.norm() > 1e12) {
      sol.status = DualStatus::Diverged;
      return sol;
    }
  }
  // Iterations exhausted: refresh the residual for diagnostics.
  for (int i = 0; i < n; ++i) w1[i] = ls.d1(sol.u[i]);
  sol.residual = (H.transpose() * w1).norm();
  sol.tol_eff = effective_tol(w1);
  if (sol.residual <= sol.tol_eff) sol.status = DualStatus::Converged;
  sol.iterations = cfg.max_inner_iterations;
  return sol;
}

// A converged dual is only a valid inner solution when every 1 + nu'H_i stays
// at or above 1/n (weights in (0,1)) and the weights sum to one; a vanishing
// residual along a recession direction fails both.
bool dual_ok(const DualSolution& sol, int n, const SolverConfig& cfg) {
  double tol = std::max(cfg.inner_tol, sol.tol_eff);
  if (sol.status != DualStatus::Converged || sol.residual > tol) return false;
  if (sol.u.minCoeff() < (1.0 - 1e-9) / n) return false;
  double wsum = (1.0 / (static_cast<double>(n) * sol.u.array())).sum();
  return std::abs(wsum - 1.0) <= 1e-8;
}

[[noreturn]] void throw_dual_failure(MatRef H, const DualSolution& sol, const SolverConfig& cfg) {
  const int n = static_cast<int>(H.rows());
  double umin = sol.u.minCoeff();
  double wsum = (1.0 / (static_cast<double>(n) * sol.u.array())).sum();
  double tol = std::max(cfg.inner_tol, sol.tol_eff);
  bool infeasible = sol.status == DualStatus::Diverged || umin < 1.0 / n ||
                    (sol.residual <= tol && std::abs(wsum - 1.0) > 1e-8);
  if (infeasible) {
    for (int k = 0; k < H.cols(); ++k) {
      double lo = H.col(k).minCoeff(), hi = H.col(k).maxCoeff();
      if (lo > 0.0 || hi < 0.0) {
        std::string name = (k == 0) ? "the density-mass component"
                                    : ("moment component " + std::to_string(k));
        throw ElError(ErrorCategory::Infeasible,
                      "inner solve: " + name +
                          " of the estimating function has constant sign across the sample "
                          "(range [" +
                          fmt_g(lo) + ", " + fmt_g(hi) +
                          "]); zero lies outside the convex hull, no weights exist");
      }
    }
    throw ElError(ErrorCategory::Infeasible,
                  "inner solve: zero is not interior to the convex hull of the estimating "
                  "functions at this theta (min 1+nu'H = " +
                      fmt_g(umin) + ", weight sum " + fmt_g(wsum) + ")");
  }
  throw ElError(ErrorCategory::NonConvergence,
                "inner solve: residual " + fmt_g(sol.residual) + " after " +
                    std::to_string(sol.iterations) + " iterations (tolerance " + fmt_g(tol) +
                    ")");
}

LagrangeState make_state(const DualSolution& sol, int n) {
  LagrangeState st;
  st.nu = sol.nu;
  st.weights = (static_cast<double>(n) * sol.u.array()).inverse();
  st.lambda = 1.0;
  st.iterations = sol.iterations;
  st.residual_norm = sol.residual;
  return st;
}

// Everything the outer loop needs to evaluate and differentiate the profiled
// objective. The mu block of the parameter vector is stored as the residual
// r = mu_tilde - mu: the penalty gradient N W^-1 r is then exact in floating
// point near the optimum even when N dwarfs n.
struct Profiler {
  const CaseControlSample& sample;
  const ConstraintSpec& spec;
  SolverConfig cfg;
  bool free_mu;
  Eigen::VectorXd mu_tilde;
  double N = 0.0;
  Eigen::MatrixXd Winv;

  Eigen::MatrixXd hX;
  Eigen::VectorXd Xty;
  double n1 = 0.0;
  int p = 0, q = 0, dim = 0;
  LogStar ls;

  Profiler(const CaseControlSample& s, const ConstraintSpec& cs, const SolverConfig& c,
           bool free_mu_, Eigen::VectorXd mu_tilde_, double N_, Eigen::MatrixXd Winv_)
      : sample(s),
        spec(cs),
        cfg(c),
        free_mu(free_mu_),
        mu_tilde(std::move(mu_tilde_)),
        N(N_),
        Winv(std::move(Winv_)),
        ls(s.n) {
    spec.validate(s.p);
    p = s.p;
    q = spec.q(p);
    if (mu_tilde.size() != q)
      throw ElError(ErrorCategory::InvalidInput,
                    "profile: mu_tilde has length " + std::to_string(mu_tilde.size()) +
                        ", constraint spec gives q = " + std::to_string(q));
    hX = spec.apply_rows(s.X);
    Xty = s.X.transpose() * s.y.cast<double>();
    n1 = s.n_case;
    dim = 2 + p + (free_mu ? q : 0);
  }

  Eigen::VectorXd pack(const ThetaFull& t) const {
    Eigen::VectorXd v(dim);
    v[0] = t.gamma;
    v[1] = t.alpha_star;
    v.segment(2, p) = t.beta;
    if (free_mu) v.tail(q) = mu_tilde - t.mu;
    return v;
  }

  ThetaFull theta_at(VecRef v) const {
    ThetaFull t;
    t.gamma = v[0];
    t.alpha_star = v[1];
    t.beta = v.segment(2, p);
    t.mu = free_mu ? Eigen::VectorXd(mu_tilde - v.tail(q)) : mu_tilde;
    return t;
  }

  struct Eval {
    double value = 0.0;
    DualSolution dual;
    Eigen::ArrayXd delta;
    double sg = 0.0, smg = 0.0;
    bool saturated = false;
  };

  Eigen::MatrixXd build_H(VecRef v, Eval& e) const {
    const int n = sample.n;
    Eigen::VectorXd beta = v.segment(2, p);
    Eigen::VectorXd mu = free_mu ? Eigen::VectorXd(mu_tilde - v.tail(q)) : mu_tilde;
    Eigen::ArrayXd z = (sample.X * beta).array() + v[1];
    const double log_floor = std::log(1e-300), log_ceil = std::log(1e300);
    e.saturated = (z < log_floor).any() || (z > log_ceil).any();
    e.delta = z.min(log_ceil).max(log_floor).exp();
    e.sg = sigmoid(v[0]);
    e.smg = sigmoid(-v[0]);
    Eigen::ArrayXd t = e.delta * e.smg + e.sg;
    Eigen::MatrixXd H(n, 1 + q);
    H.col(0) = e.delta - 1.0;
    H.rightCols(q) = (hX.array().colwise() * t).rowwise() - mu.transpose().array();
    return H;
  }

  std::optional<Eval> try_eval(VecRef v, const Eigen::VectorXd* warm) const {
    if (!v.allFinite()) return std::nullopt;
    Eval e;
    Eigen::MatrixXd H = build_H(v, e);
    e.dual = solve_dual_impl(H, cfg, warm);
    if (!dual_ok(e.dual, sample.n, cfg)) return std::nullopt;
    double sum_ls = 0.0;
    for (int i = 0; i < sample.n; ++i) sum_ls += ls.value(e.dual.u[i]);
    e.value = n1 * v[1] + v.segment(2, p).dot(Xty) - sum_ls;
    if (free_mu) {
      Eigen::VectorXd r = v.tail(q);
      e.value -= 0.5 * N * r.dot(Winv * r);
    }
    if (!std::isfinite(e.value)) return std::nullopt;
    return e;
  }

  // Gradient of the profiled objective in the packed layout, holding nu at the
  // inner solution (the inner root equation zeroes the cross term).
  Eigen::VectorXd gradient(VecRef v, const Eval& e) const {
    const int n = sample.n;
    const double nu1 = e.dual.nu[0];
    Eigen::VectorXd nuh = e.dual.nu.tail(q);
    Eigen::ArrayXd w1(n);
    for (int i = 0; i < n; ++i) w1[i] = ls.d1(e.dual.u[i]);
    Eigen::ArrayXd b = (hX * nuh).array();
    Eigen::ArrayXd a = w1 * e.delta * (nu1 + e.smg * b);
    Eigen::VectorXd g(dim);
    g[0] = -e.sg * e.smg * (w1 * (1.0 - e.delta) * b).sum();
    g[1] = n1 - a.sum();
    g.segment(2, p) = Xty - sample.X.transpose() * a.matrix();
    if (free_mu) {
      Eigen::VectorXd r = v.tail(q);
      g.tail(q) = -(w1.sum() * nuh + N * (Winv * r));
    }
    return g;
  }
};

[[noreturn]] void throw_eval_failure(const Profiler& P, VecRef v, const Eigen::VectorXd& warm) {
  Profiler::Eval e;
  Eigen::MatrixXd H = P.build_H(v, e);
  DualSolution sol = solve_dual_impl(H, P.cfg, &warm);
  throw_dual_failure(H, sol, P.cfg);
}

struct OptimOutcome {
  Eigen::VectorXd v;
  Profiler::Eval eval;
};

OptimOutcome maximize_profile(const Profiler& P, Eigen::VectorXd v, const Eigen::VectorXd& nu0,
                              FitDiagnostics& diag) {
  const SolverConfig& cfg = P.cfg;
  const int D = P.dim;

  auto first = P.try_eval(v, &nu0);
  if (!first) throw_eval_failure(P, v, nu0);
  Profiler::Eval cur = std::move(*first);
  diag.objective_trace.push_back(cur.value);
  diag.inner_iterations_total += cur.dual.iterations;
  Eigen::VectorXd g = P.gradient(v, cur);

  // Seed the quasi-Newton scaling from probed diagonal curvature; this is what
  // keeps the first steps sane when the penalty block is 1e6 times stiffer
  // than the likelihood block.
  Eigen::VectorXd dscale(D);
  for (int k = 0; k < D; ++k) {
    double h = 1e-4 * (1.0 + std::abs(v[k]));
    Eigen::VectorXd vp = v, vm = v;
    vp[k] += h;
    vm[k] -= h;
    auto ep = P.try_eval(vp, &cur.dual.nu);
    auto em = P.try_eval(vm, &cur.dual.nu);
    double curv = 0.0;
    if (ep && em) {
      curv = std::abs((ep->value - 2.0 * cur.value + em->value) / (h * h));
      diag.inner_iterations_total += ep->dual.iterations + em->dual.iterations;
    }
    if (!(curv > 1e-8)) curv = std::max(1.0, static_cast<double>(P.sample.n));
    dscale[k] = 1.0 / curv;
  }
  Eigen::MatrixXd Binv = dscale.asDiagonal();

  // First-order optimality for the gamma box: when gamma sits on a bound with
  // the gradient pointing outward, that component is not reducible and drops
  // out of the measure (KKT projection). Degenerate samples whose case rate
  // runs to 0 or 1 converge on the bound this way instead of chasing an
  // exponentially flat ridge forever; gamma_at_bound flags them.
  auto grad_projected = [&cfg](const Eigen::VectorXd& vv, const Eigen::VectorXd& gg) {
    Eigen::VectorXd gp = gg;
    if ((vv[0] >= cfg.gamma_bound && gg[0] > 0.0) || (vv[0] <= -cfg.gamma_bound && gg[0] < 0.0))
      gp[0] = 0.0;
    return gp;
  };

  int it = 0;
  int stall = 0;
  for (; it < cfg.max_outer_iterations; ++it) {
    if (grad_projected(v, g).norm() <= cfg.outer_tol) break;
    Eigen::VectorXd d = Binv * g;
    if (!(g.dot(d) > 1e-14 * g.norm() * d.norm())) {
      Binv = dscale.asDiagonal();  // lost positivity: restart from the probe scaling
      d = Binv * g;
    }

    double alpha = 1.0;
    std::optional<Profiler::Eval> acc;
    Eigen::VectorXd vc;
    bool clamped = false;
    for (int h = 0; h < 70 && alpha > 1e-15; ++h, alpha *= cfg.line_search_shrink) {
      vc = v + alpha * d;
      double gcl = std::clamp(vc[0], -cfg.gamma_bound, cfg.gamma_bound);
      clamped = gcl != vc[0];
      vc[0] = gcl;
      Eigen::VectorXd disp = vc - v;
      if (disp.cwiseAbs().maxCoeff() == 0.0) break;
      auto et = P.try_eval(vc, &cur.dual.nu);
      if (!et) continue;
      double need = cfg.line_search_c1 * std::max(g.dot(disp), 0.0);
      if (et->value >= cur.value + need &&
          et->value >= cur.value - 1e-13 * (1.0 + std::abs(cur.value))) {
        acc = std::move(et);
        break;
      }
    }
    if (!acc) break;

    stall = (acc->value <= cur.value + 1e-13 * (1.0 + std::abs(cur.value))) ? stall + 1 : 0;
    Eigen::VectorXd s = vc - v;
    Eigen::VectorXd gn = P.gradient(vc, *acc);
    Eigen::VectorXd yF = g - gn;  // BFGS in minimization convention on -objective
    double sy = s.dot(yF);
    if (sy > 1e-12 * s.norm() * yF.norm()) {
      Eigen::VectorXd By = Binv * yF;
      double yBy = yF.dot(By);
      Binv += ((sy + yBy) / (sy * sy)) * (s * s.transpose());
      Binv -= (By * s.transpose() + s * By.transpose()) / sy;
    }
    v = vc;
    cur = std::move(*acc);
    g = gn;
    diag.objective_trace.push_back(cur.value);
    diag.inner_iterations_total += cur.dual.iterations;
    if (clamped) diag.gamma_at_bound = true;
    if (cur.saturated) diag.tilt_saturated = true;
    if (stall >= 2) break;
  }
  diag.outer_iterations = it;

  // Newton polish on the gradient: quasi-Newton gets the neighborhood, second
  // differences of the analytic gradient finish the job at the stated tolerance.
  // With gamma pinned on its bound the system is reduced to the free block so
  // the step cannot keep pushing into the box wall.
  for (int pit = 0; pit < 25 && grad_projected(v, g).norm() > cfg.outer_tol; ++pit) {
    diag.used_polish = true;
    Eigen::MatrixXd Hl(D, D);
    bool ok = true;
    for (int k = 0; k < D; ++k) {
      double h = cfg.fd_step * (1.0 + std::abs(v[k]));
      Eigen::VectorXd vp = v, vm = v;
      vp[k] += h;
      vm[k] -= h;
      auto ep = P.try_eval(vp, &cur.dual.nu);
      auto em = P.try_eval(vm, &cur.dual.nu);
      if (!ep || !em) {
        ok = false;
        break;
      }
      Hl.col(k) = (P.gradient(vp, *ep) - P.gradient(vm, *em)) / (2.0 * h);
    }
    if (!ok) break;
    Hl = 0.5 * (Hl + Hl.transpose()).eval();

    const bool pinned =
        (v[0] >= cfg.gamma_bound && g[0] > 0.0) || (v[0] <= -cfg.gamma_bound && g[0] < 0.0);
    const int off = pinned ? 1 : 0;
    const int Df = D - off;

    double scale = std::max(1.0, Hl.cwiseAbs().maxCoeff());
    double ridge = 0.0;
    Eigen::VectorXd step = Eigen::VectorXd::Zero(D);
    bool have = false;
    for (int attempt = 0; attempt < 14; ++attempt) {
      Eigen::MatrixXd A = -Hl.bottomRightCorner(Df, Df) +
                          ridge * Eigen::MatrixXd::Identity(Df, Df);
      Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
      if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
        step.tail(Df) = ldlt.solve(g.tail(Df));
        if (step.allFinite() && g.tail(Df).dot(step.tail(Df)) > 0.0) {
          have = true;
          break;
        }
      }
      ridge = (ridge == 0.0) ? 1e-10 * scale : ridge * 100.0;
    }
    if (!have) break;

    double alpha = 1.0;
    bool accepted = false;
    for (int h2 = 0; h2 < 60 && alpha > 1e-15; ++h2, alpha *= cfg.line_search_shrink) {
      Eigen::VectorXd vc = v + alpha * step;
      vc[0] = std::clamp(vc[0], -cfg.gamma_bound, cfg.gamma_bound);
      auto et = P.try_eval(vc, &cur.dual.nu);
      if (!et) continue;
      Eigen::VectorXd gn = P.gradient(vc, *et);
      double plateau = 1e-12 * (1.0 + std::abs(cur.value));
      bool armijo = et->value >= cur.value + cfg.line_search_c1 * std::max(g.dot(vc - v), 0.0) &&
                    et->value >= cur.value - plateau;
      bool grad_drop = et->value >= cur.value - plateau &&
                       grad_projected(vc, gn).norm() < 0.9 * grad_projected(v, g).norm();
      if (armijo || grad_drop) {
        v = vc;
        cur = std::move(*et);
        g = gn;
        diag.objective_trace.push_back(cur.value);
        diag.inner_iterations_total += cur.dual.iterations;
        diag.outer_iterations += 1;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
  }

  const double gp_norm = grad_projected(v, g).norm();
  diag.grad_norm = gp_norm;
  // The gradient is a sum over observations, so holding it to a fixed absolute
  // tolerance gets harder as n grows. The loops above still aim for outer_tol;
  // the final acceptance only relaxes to a per-observation criterion once the
  // sample is large enough for the absolute target to be disproportionate.
  double tol_eff = cfg.outer_tol * std::max(1.0, 1e-4 * static_cast<double>(P.sample.n));
  if (gp_norm > tol_eff)
    throw ElError(ErrorCategory::NonConvergence,
                  "outer optimization: gradient norm " + fmt_g(gp_norm) + " after " +
                      std::to_string(diag.outer_iterations) +
                      " iterations (objective " + fmt_g(cur.value) + ", tolerance " +
                      fmt_g(tol_eff) + ")");
  diag.gamma_at_bound =
      diag.gamma_at_bound || std::abs(std::abs(v[0]) - cfg.gamma_bound) <= 1e-9;
  return {std::move(v), std::move(cur)};
}

FitResult assemble_fit(const Profiler& P, OptimOutcome out, FitDiagnostics diag) {
  FitResult fr;
  fr.theta = P.theta_at(out.v);
  fr.lagrange = make_state(out.eval.dual, P.sample.n);
  fr.objective = out.eval.value;
  fr.converged = true;

  // Constraint readout at the fit: weight mass, tilted mass, moment match.
  const Eigen::ArrayXd& pw = fr.lagrange.weights.array();
  Eigen::ArrayXd t = out.eval.delta * out.eval.smg + out.eval.sg;
  double r1 = std::abs(pw.sum() - 1.0);
  double r2 = std::abs((pw * out.eval.delta).sum() - 1.0);
  Eigen::VectorXd mix = (P.hX.array().colwise() * (pw * t)).colwise().sum();
  double r3 = (mix - fr.theta.mu).cwiseAbs().maxCoeff();
  diag.constraint_residual = std::max({r1, r2, r3});
  fr.diagnostics = std::move(diag);

  if (fr.theta.beta.norm() < 1e-4)
    throw ElError(ErrorCategory::Identifiability,
                  "fit: fitted slope norm " + fmt_g(fr.theta.beta.norm()) +
                      " is below 1e-4; the mixture proportion is not identified and the "
                      "covariance blocks are singular");
  return fr;
}

Eigen::VectorXd default_nu0(const CaseControlSample& sample, int q) {
  Eigen::VectorXd nu0 = Eigen::VectorXd::Zero(1 + q);
  nu0[0] = static_cast<double>(sample.n_case) / sample.n;
  return nu0;
}

}  // namespace

LagrangeState solve_dual(MatRef H, const SolverConfig& cfg, const Eigen::VectorXd* nu_init) {
  if (H.rows() < 1 || H.cols() < 1)
    throw ElError(ErrorCategory::InvalidInput, "solve_dual: empty estimating-function matrix");
  if (!H.allFinite())
    throw ElError(ErrorCategory::InvalidInput, "solve_dual: non-finite estimating functions");
  DualSolution sol = solve_dual_impl(H, cfg, nu_init);
  if (!dual_ok(sol, static_cast<int>(H.rows()), cfg)) throw_dual_failure(H, sol, cfg);
  return make_state(sol, static_cast<int>(H.rows()));
}

LagrangeState solve_nu(const ThetaFull& theta, const CaseControlSample& sample,
                       const ConstraintSpec& spec, const SolverConfig& cfg,
                       const Eigen::VectorXd* nu_init) {
  ModelEval ev = eval_model(sample, theta, spec);
  Eigen::VectorXd nu0 = nu_init ? *nu_init : default_nu0(sample, theta.q());
  DualSolution sol = solve_dual_impl(ev.H, cfg, &nu0);
  if (!dual_ok(sol, sample.n, cfg)) throw_dual_failure(ev.H, sol, cfg);
  return make_state(sol, sample.n);
}

ProfileValue profile_objective(const ThetaFull& theta, const CaseControlSample& sample,
                               const ExternalSummary& external, const ConstraintSpec& spec,
                               const SolverConfig& cfg, const Eigen::VectorXd* nu_warm) {
  external.validate();
  if (external.mode == WeightMode::Optimal)
    throw ElError(ErrorCategory::InvalidInput,
                  "profile_objective: optimal weight mode has no fixed objective; resolve W "
                  "through the weighted refit driver first");
  const bool free_mu = external.mode == WeightMode::Given;
  Eigen::MatrixXd Winv;
  if (free_mu) {
    Eigen::LLT<Eigen::MatrixXd> llt(external.W);
    Winv = llt.solve(Eigen::MatrixXd::Identity(external.q(), external.q()));
  }
  // Population mode evaluates at theta.mu as given (no penalty ties it down).
  Eigen::VectorXd anchor = free_mu ? external.mu_tilde : theta.mu;
  Profiler P(sample, spec, cfg, free_mu, anchor, free_mu ? external.n_external : 0.0,
             std::move(Winv));
  if (theta.q() != P.q)
    throw ElError(ErrorCategory::InvalidInput,
                  "profile_objective: theta.mu length " + std::to_string(theta.q()) +
                      " does not match constraint spec q = " + std::to_string(P.q));
  Eigen::VectorXd v = P.pack(theta);
  Eigen::VectorXd nu0 = nu_warm ? *nu_warm : default_nu0(sample, P.q);
  auto e = P.try_eval(v, &nu0);
  if (!e) throw_eval_failure(P, v, nu0);
  ProfileValue out;
  out.value = e->value;
  out.lagrange = make_state(e->dual, sample.n);
  return out;
}

Eigen::VectorXd profile_gradient(const ThetaFull& theta, const CaseControlSample& sample,
                                 const ExternalSummary& external, const ConstraintSpec& spec,
                                 const LagrangeState& lagrange) {
  external.validate();
  if (external.mode == WeightMode::Optimal)
    throw ElError(ErrorCategory::InvalidInput,
                  "profile_gradient: optimal weight mode has no fixed objective");
  ModelEval ev = eval_model(sample, theta, spec);
  const int n = sample.n, p = theta.p(), q = theta.q();
  if (lagrange.nu.size() != 1 + q)
    throw ElError(ErrorCategory::InvalidInput, "profile_gradient: nu has wrong length");
  LogStar ls(n);
  Eigen::ArrayXd u = 1.0 + (ev.H * lagrange.nu).array();
  Eigen::ArrayXd w1(n);
  for (int i = 0; i < n; ++i) w1[i] = ls.d1(u[i]);
  const double sg = sigmoid(theta.gamma), smg = sigmoid(-theta.gamma);
  const double nu1 = lagrange.nu[0];
  Eigen::VectorXd nuh = lagrange.nu.tail(q);
  Eigen::ArrayXd b = (ev.hX * nuh).array();
  Eigen::ArrayXd a = w1 * ev.delta.array() * (nu1 + smg * b);

  Eigen::VectorXd g(2 + p + q);
  g[0] = -sg * smg * (w1 * (1.0 - ev.delta.array()) * b).sum();
  g[1] = sample.n_case - a.sum();
  g.segment(2, p) = sample.X.transpose() * (sample.y.cast<double>() - a.matrix());
  Eigen::VectorXd gmu = w1.sum() * nuh;
  if (external.mode == WeightMode::Given) {
    Eigen::LLT<Eigen::MatrixXd> llt(external.W);
    gmu += external.n_external * llt.solve(external.mu_tilde - theta.mu);
  }
  g.tail(q) = gmu;
  return g;
}

InitEstimates init_theta(const CaseControlSample& sample, VecRef mu_tilde,
                         const ConstraintSpec& spec, const SolverConfig& cfg) {
  spec.validate(sample.p);
  const int q = spec.q(sample.p);
  if (mu_tilde.size() != q)
    throw ElError(ErrorCategory::InvalidInput,
                  "init: mu_tilde has length " + std::to_string(mu_tilde.size()) +
                      ", constraint spec gives q = " + std::to_string(q));
  Eigen::MatrixXd hX = spec.apply_rows(sample.X);
  InitEstimates out;
  out.mu1_hat = Eigen::VectorXd::Zero(q);
  out.mu0_hat = Eigen::VectorXd::Zero(q);
  for (int i = 0; i < sample.n; ++i)
    (sample.y[i] == 1 ? out.mu1_hat : out.mu0_hat) += hX.row(i);
  out.mu1_hat /= sample.n_case;
  out.mu0_hat /= sample.n_control;

  Eigen::VectorXd d = out.mu1_hat - out.mu0_hat;
  double dn = d.norm();
  if (dn <= 1e-7 * (1.0 + out.mu1_hat.norm() + out.mu0_hat.norm()))
    throw ElError(ErrorCategory::Identifiability,
                  "init: case and control means of h coincide (difference norm " + fmt_g(dn) +
                      "); the mixture proportion is not identified");
  // Least-squares mixture weight matching mu_tilde between the two group means.
  double pi_star = d.dot(mu_tilde - out.mu0_hat) / (dn * dn);
  double pi_lo = sigmoid(-cfg.gamma_bound), pi_hi = sigmoid(cfg.gamma_bound);
  out.gamma_clamped = pi_star < pi_lo || pi_star > pi_hi;
  double pi = std::clamp(pi_star, pi_lo, pi_hi);
  out.gamma_init = std::log((1.0 - pi) / pi);

  MleResult mle = fit_prospective_mle(sample, cfg);
  out.alpha_star_init = mle.alpha_hat - std::log(sample.rho);
  out.beta_init = mle.beta_hat;
  return out;
}

FitResult fit_mele(const CaseControlSample& sample, const ExternalSummary& external,
                   const ConstraintSpec& spec, const SolverConfig& cfg,
                   const ThetaFull* theta_init, const Eigen::VectorXd* nu_init) {
  external.validate();
  if (external.mode == WeightMode::Optimal)
    throw ElError(ErrorCategory::InvalidInput,
                  "fit_mele: optimal weight mode must be resolved to a concrete W by the "
                  "weighted refit driver");
  if (external.mode == WeightMode::PopulationLevel)
    throw ElError(ErrorCategory::InvalidInput,
                  "fit_mele: population-level summaries pin mu; use fit_known_mu");
  spec.validate(sample.p);
  const int q = spec.q(sample.p);
  Eigen::LLT<Eigen::MatrixXd> llt(external.W);
  if (llt.info() != Eigen::Success)
    throw ElError(ErrorCategory::InvalidInput, "fit_mele: W factorization failed");
  Eigen::MatrixXd Winv = llt.solve(Eigen::MatrixXd::Identity(q, q));
  Profiler P(sample, spec, cfg, /*free_mu=*/true, external.mu_tilde, external.n_external,
             std::move(Winv));

  ThetaFull t0;
  if (theta_init) {
    t0 = *theta_init;
    if (t0.p() != sample.p || t0.q() != q)
      throw ElError(ErrorCategory::InvalidInput, "fit_mele: theta_init has wrong block sizes");
  } else {
    InitEstimates ini = init_theta(sample, external.mu_tilde, spec, cfg);
    t0.gamma = ini.gamma_init;
    t0.alpha_star = ini.alpha_star_init;
    t0.beta = ini.beta_init;
    t0.mu = external.mu_tilde;
  }
  Eigen::VectorXd nu0 = nu_init ? *nu_init : default_nu0(sample, q);
  FitDiagnostics diag;
  OptimOutcome out = maximize_profile(P, P.pack(t0), nu0, diag);
  return assemble_fit(P, std::move(out), std::move(diag));
}

FitResult fit_known_mu(const CaseControlSample& sample, VecRef mu_tilde,
                       const ConstraintSpec& spec, const SolverConfig& cfg) {
  spec.validate(sample.p);
  const int q = spec.q(sample.p);
  if (mu_tilde.size() != q)
    throw ElError(ErrorCategory::InvalidInput,
                  "fit_known_mu: mu_tilde has length " + std::to_string(mu_tilde.size()) +
                      ", constraint spec gives q = " + std::to_string(q));
  Profiler P(sample, spec, cfg, /*free_mu=*/false, mu_tilde, 0.0, Eigen::MatrixXd());

  InitEstimates ini = init_theta(sample, mu_tilde, spec, cfg);
  ThetaFull t0;
  t0.gamma = ini.gamma_init;
  t0.alpha_star = ini.alpha_star_init;
  t0.beta = ini.beta_init;
  t0.mu = mu_tilde;
  Eigen::VectorXd nu0 = default_nu0(sample, q);
  FitDiagnostics diag;
  OptimOutcome out = maximize_profile(P, P.pack(t0), nu0, diag);
  return assemble_fit(P, std::move(out), std::move(diag));
}

}  // namespace elcc
