// SPDX-License-Identifier: Apache-2.0
#include "soda/qp.hpp"

#include "soda/errors.hpp"

#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace soda::qp {

namespace {

using Eigen::VectorXd;

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kRhoMin = 1e-6;
constexpr double kRhoMax = 1e6;
// Largest factor one adaptation may move rho by, and the growth of the wait between adaptations.
constexpr double kRhoStepMax = 10.0;
constexpr double kAdaptBackoff = 2.0;
constexpr double kEqualityRhoScale = 1e3;
constexpr double kPolishDelta = 1e-9;
constexpr int kPolishRefine = 6;
constexpr int kPolishPasses = 8;
constexpr double kInfeasTol = 1e-9;

using Ldlt = Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower, Eigen::AMDOrdering<int>>;

double inf_norm(const VectorXd& v) { return v.size() == 0 ? 0.0 : v.lpNorm<Eigen::Infinity>(); }

VectorXd col_inf_norms(const SparseMatrix& m) {
  VectorXd out = VectorXd::Zero(m.cols());
  for (int k = 0; k < m.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(m, k); it; ++it) out(k) = std::max(out(k), std::fabs(it.value()));
  }
  return out;
}

VectorXd row_inf_norms(const SparseMatrix& m) {
  VectorXd out = VectorXd::Zero(m.rows());
  for (int k = 0; k < m.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(m, k); it; ++it) {
      out(it.row()) = std::max(out(it.row()), std::fabs(it.value()));
    }
  }
  return out;
}

// Norms below this are treated as empty columns/rows and left unscaled.
double usable_norm(double v) { return v < 1e-4 ? 1.0 : std::min(v, 1e4); }

struct Scaled {
  SparseMatrix P;
  SparseMatrix A;
  VectorXd q;
  VectorXd l;
  VectorXd u;
  VectorXd D;  // variable scaling: x = D x_hat
  VectorXd E;  // constraint scaling: A_hat = E A D
  double c = 1.0;
};

Scaled equilibrate(const Problem& p, int iters) {
  const auto n = p.q.size();
  const auto m = p.l.size();
  Scaled s{p.P, p.A, p.q, p.l, p.u, VectorXd::Ones(n), VectorXd::Ones(m), 1.0};
  for (int k = 0; k < iters; ++k) {
    const VectorXd cn = col_inf_norms(s.P).cwiseMax(col_inf_norms(s.A));
    const VectorXd rn = row_inf_norms(s.A);
    const VectorXd dcol = cn.unaryExpr([](double v) { return 1.0 / std::sqrt(usable_norm(v)); });
    const VectorXd drow = rn.unaryExpr([](double v) { return 1.0 / std::sqrt(usable_norm(v)); });
    s.P = dcol.asDiagonal() * s.P * dcol.asDiagonal();
    s.A = drow.asDiagonal() * s.A * dcol.asDiagonal();
    s.q = s.q.cwiseProduct(dcol);
    s.D = s.D.cwiseProduct(dcol);
    s.E = s.E.cwiseProduct(drow);
    const double pn = n > 0 ? col_inf_norms(s.P).mean() : 0.0;
    const double gamma = 1.0 / usable_norm(std::max(pn, inf_norm(s.q)));
    s.P *= gamma;
    s.q *= gamma;
    s.c *= gamma;
  }
  s.l = p.l.cwiseProduct(s.E);
  s.u = p.u.cwiseProduct(s.E);
  return s;
}

enum class RowKind { Free, Inequality, Equality };

std::vector<RowKind> classify_rows(const VectorXd& l, const VectorXd& u) {
  std::vector<RowKind> kinds(static_cast<std::size_t>(l.size()));
  for (Eigen::Index i = 0; i < l.size(); ++i) {
    if (l(i) == -kInf && u(i) == kInf) {
      kinds[static_cast<std::size_t>(i)] = RowKind::Free;
    } else if (std::isfinite(l(i)) && std::isfinite(u(i)) && u(i) - l(i) <= 1e-12 * std::max(1.0, std::fabs(l(i)))) {
      kinds[static_cast<std::size_t>(i)] = RowKind::Equality;
    } else {
      kinds[static_cast<std::size_t>(i)] = RowKind::Inequality;
    }
  }
  return kinds;
}

VectorXd rho_vector(const std::vector<RowKind>& kinds, double rho) {
  VectorXd r(static_cast<Eigen::Index>(kinds.size()));
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    switch (kinds[i]) {
      case RowKind::Free: r(static_cast<Eigen::Index>(i)) = kRhoMin; break;
      case RowKind::Equality: r(static_cast<Eigen::Index>(i)) = kEqualityRhoScale * rho; break;
      case RowKind::Inequality: r(static_cast<Eigen::Index>(i)) = rho; break;
    }
  }
  return r;
}

// [P + sigma I, A'; A, -diag(1/rho)] with an explicit (possibly zero) diagonal
// everywhere so the sparsity pattern is independent of rho.
SparseMatrix build_kkt(const SparseMatrix& P, const SparseMatrix& A, double sigma, const VectorXd& rho) {
  const auto n = P.rows();
  const auto m = A.rows();
  std::vector<Eigen::Triplet<double>> t;
  t.reserve(static_cast<std::size_t>(P.nonZeros() + 2 * A.nonZeros() + n + m));
  for (int k = 0; k < P.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(P, k); it; ++it) t.emplace_back(it.row(), it.col(), it.value());
  }
  for (Eigen::Index i = 0; i < n; ++i) t.emplace_back(i, i, sigma);
  for (int k = 0; k < A.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(A, k); it; ++it) {
      t.emplace_back(n + it.row(), it.col(), it.value());
      t.emplace_back(it.col(), n + it.row(), it.value());
    }
  }
  for (Eigen::Index i = 0; i < m; ++i) t.emplace_back(n + i, n + i, -1.0 / rho(i));
  SparseMatrix K(n + m, n + m);
  K.setFromTriplets(t.begin(), t.end());
  return K;
}

VectorXd project(const VectorXd& v, const VectorXd& l, const VectorXd& u) { return v.cwiseMax(l).cwiseMin(u); }

double objective(const Problem& p, const VectorXd& x) { return 0.5 * x.dot(p.P * x) + p.q.dot(x); }

struct Tolerances {
  double primal;
  double dual;
};

Tolerances tolerances(const Problem& p, const Settings& s, const VectorXd& x, const VectorXd& y) {
  const VectorXd ax = p.A * x;
  const double prim_scale = std::max(inf_norm(ax), inf_norm(project(ax, p.l, p.u)));
  const double dual_scale = std::max({inf_norm(p.P * x), inf_norm(p.A.transpose() * y), inf_norm(p.q)});
  return {s.eps_abs + s.eps_rel * prim_scale, s.eps_abs + s.eps_rel * dual_scale};
}

struct PolishOutcome {
  bool ok = false;
  VectorXd x;
  VectorXd y;
  double prim = kInf;
  double dual = kInf;
};

// Solves the equality-constrained QP on the guessed active set in the scaled
// space, then repairs the guess a few times: rows whose multiplier points the
// wrong way leave, rows the reduced solution violates join.
PolishOutcome polish(const Problem& prob, const Scaled& s, const std::vector<RowKind>& kinds,
                     const VectorXd& z_hat, const VectorXd& y_hat, const Settings& settings) {
  const auto n = s.q.size();
  const auto m = s.l.size();
  std::vector<int> side(static_cast<std::size_t>(m), 2);  // -1 lower, +1 upper, 0 equality, 2 inactive
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto kind = kinds[static_cast<std::size_t>(i)];
    auto& sd = side[static_cast<std::size_t>(i)];
    if (kind == RowKind::Free) continue;
    if (kind == RowKind::Equality) {
      sd = 0;
    } else if (s.l(i) > -kInf && z_hat(i) - s.l(i) < -y_hat(i)) {
      sd = -1;
    } else if (s.u(i) < kInf && s.u(i) - z_hat(i) < y_hat(i)) {
      sd = 1;
    }
  }

  PolishOutcome out;
  for (int pass = 0; pass < kPolishPasses; ++pass) {
    std::vector<Eigen::Index> rows;
    std::vector<Eigen::Index> pos(static_cast<std::size_t>(m), -1);
    for (Eigen::Index i = 0; i < m; ++i) {
      if (side[static_cast<std::size_t>(i)] == 2) continue;
      pos[static_cast<std::size_t>(i)] = static_cast<Eigen::Index>(rows.size());
      rows.push_back(i);
    }
    const auto na = static_cast<Eigen::Index>(rows.size());

    std::vector<Eigen::Triplet<double>> t0;
    for (int k = 0; k < s.P.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(s.P, k); it; ++it) t0.emplace_back(it.row(), it.col(), it.value());
    }
    for (int k = 0; k < s.A.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(s.A, k); it; ++it) {
        const auto r = pos[static_cast<std::size_t>(it.row())];
        if (r < 0) continue;
        t0.emplace_back(n + r, it.col(), it.value());
        t0.emplace_back(it.col(), n + r, it.value());
      }
    }
    SparseMatrix K0(n + na, n + na);
    K0.setFromTriplets(t0.begin(), t0.end());
    auto t1 = t0;
    for (Eigen::Index i = 0; i < n; ++i) t1.emplace_back(i, i, kPolishDelta);
    for (Eigen::Index i = 0; i < na; ++i) t1.emplace_back(n + i, n + i, -kPolishDelta);
    SparseMatrix K(n + na, n + na);
    K.setFromTriplets(t1.begin(), t1.end());

    Ldlt ldlt(K);
    if (ldlt.info() != Eigen::Success) return out;
    VectorXd rhs(n + na);
    rhs.head(n) = -s.q;
    for (Eigen::Index k = 0; k < na; ++k) {
      const auto i = rows[static_cast<std::size_t>(k)];
      rhs(n + k) = side[static_cast<std::size_t>(i)] == 1 ? s.u(i) : s.l(i);
    }
    VectorXd sol = ldlt.solve(rhs);
    for (int r = 0; r < kPolishRefine; ++r) sol += ldlt.solve(rhs - K0 * sol);
    if (!sol.allFinite()) return out;

    VectorXd yh = VectorXd::Zero(m);
    for (Eigen::Index k = 0; k < na; ++k) yh(rows[static_cast<std::size_t>(k)]) = sol(n + k);
    out.x = s.D.cwiseProduct(sol.head(n));
    out.y = s.E.cwiseProduct(yh) / s.c;

    bool changed = false;
    for (Eigen::Index i = 0; i < m; ++i) {
      auto& sd = side[static_cast<std::size_t>(i)];
      const double yi = out.y(i);
      if ((sd == -1 && yi > 0.0) || (sd == 1 && yi < 0.0)) {
        if (std::fabs(yi) > settings.eps_abs) {
          sd = 2;
          changed = true;
        } else {
          out.y(i) = 0.0;
        }
      }
    }
    const VectorXd ax = s.A * sol.head(n);
    for (Eigen::Index i = 0; i < m; ++i) {
      auto& sd = side[static_cast<std::size_t>(i)];
      if (sd != 2 || kinds[static_cast<std::size_t>(i)] == RowKind::Free) continue;
      const double slack = settings.eps_abs * (1.0 + std::fabs(ax(i)));
      if (ax(i) < s.l(i) - slack) {
        sd = -1;
        changed = true;
      } else if (ax(i) > s.u(i) + slack) {
        sd = 1;
        changed = true;
      }
    }
    if (changed) continue;
    out.prim = primal_residual(prob, out.x);
    out.dual = dual_residual(prob, out.x, out.y);
    const auto tol = tolerances(prob, settings, out.x, out.y);
    out.ok = out.prim <= tol.primal && out.dual <= tol.dual;
    return out;
  }
  return out;
}

}  // namespace

void validate(const Problem& p) {
  const auto n = p.q.size();
  const auto m = p.l.size();
  if (p.P.rows() != n || p.P.cols() != n) throw ArgumentError("qp: P must be n x n");
  if (p.A.cols() != n || p.A.rows() != m || p.u.size() != m) throw ArgumentError("qp: A, l, u shapes disagree");
  for (Eigen::Index i = 0; i < m; ++i) {
    if (std::isnan(p.l(i)) || std::isnan(p.u(i)) || p.l(i) > p.u(i)) {
      throw ArgumentError("qp: bound row " + std::to_string(i) + " has l > u or NaN");
    }
  }
}

std::string to_string(Status s) {
  switch (s) {
    case Status::Solved: return "solved";
    case Status::MaxIterations: return "max_iterations";
    case Status::PrimalInfeasible: return "primal_infeasible";
    case Status::DualInfeasible: return "dual_infeasible";
    case Status::NonFinite: return "non_finite";
  }
  return "unknown";
}

double primal_residual(const Problem& prob, const VectorXd& x) {
  const VectorXd ax = prob.A * x;
  return inf_norm(ax - project(ax, prob.l, prob.u));
}

double dual_residual(const Problem& prob, const VectorXd& x, const VectorXd& y) {
  return inf_norm(prob.P * x + prob.q + prob.A.transpose() * y);
}

Result solve(const Problem& prob, const Settings& settings, const VectorXd& warm_x, const VectorXd& warm_y) {
  validate(prob);
  if (settings.method == Method::InteriorPoint) return solve_interior_point(prob, settings);
  return solve_admm(prob, settings, warm_x, warm_y);
}

Result solve_admm(const Problem& prob, const Settings& settings, const VectorXd& warm_x, const VectorXd& warm_y) {
  validate(prob);
  const auto n = prob.q.size();
  const auto m = prob.l.size();
  const Scaled s = equilibrate(prob, settings.scaling_iters);
  const auto kinds = classify_rows(s.l, s.u);

  double rho = settings.rho;
  VectorXd rho_vec = rho_vector(kinds, rho);
  SparseMatrix K = build_kkt(s.P, s.A, settings.sigma, rho_vec);
  Ldlt ldlt;
  ldlt.analyzePattern(K);
  ldlt.factorize(K);
  Result res;
  if (ldlt.info() != Eigen::Success) {
    res.status = Status::NonFinite;
    return res;
  }

  VectorXd x = warm_x.size() == n ? VectorXd(warm_x.cwiseQuotient(s.D)) : VectorXd::Zero(n);
  VectorXd y = warm_y.size() == m ? VectorXd(warm_y.cwiseQuotient(s.E) * s.c) : VectorXd::Zero(m);
  VectorXd z = project(s.A * x, s.l, s.u);
  VectorXd rhs(n + m);
  int last_polish = -1000000;
  // Each rho change perturbs the iterate; waiting twice as long after every
  // change stops the residual ratio from flipping rho back and forth.
  int next_adapt = settings.adaptive_rho_interval;
  int adapt_wait = settings.adaptive_rho_interval;

  auto finish = [&](const VectorXd& xs, const VectorXd& ys, Status st, int iter) {
    res.x = xs;
    res.y = ys;
    res.status = st;
    res.iterations = iter;
    res.primal_residual = primal_residual(prob, xs);
    res.dual_residual = dual_residual(prob, xs, ys);
    res.objective = objective(prob, xs);
    return res;
  };

  for (int iter = 1; iter <= settings.max_iter; ++iter) {
    const VectorXd x_prev = x;
    const VectorXd y_prev = y;
    rhs.head(n) = settings.sigma * x - s.q;
    rhs.tail(m) = z - y.cwiseQuotient(rho_vec);
    const VectorXd sol = ldlt.solve(rhs);
    const VectorXd xt = sol.head(n);
    const VectorXd zt = z + (sol.tail(m) - y).cwiseQuotient(rho_vec);
    x = settings.alpha * xt + (1.0 - settings.alpha) * x;
    const VectorXd zr = settings.alpha * zt + (1.0 - settings.alpha) * z;
    const VectorXd z_new = project(zr + y.cwiseQuotient(rho_vec), s.l, s.u);
    y += rho_vec.cwiseProduct(zr - z_new);
    z = z_new;

    const bool last = iter == settings.max_iter;
    if (iter % settings.check_interval != 0 && !last) continue;

    if (!x.allFinite() || !y.allFinite()) return finish(s.D.cwiseProduct(x), VectorXd::Zero(m), Status::NonFinite, iter);

    const VectorXd ax = s.A * x;
    const VectorXd px = s.P * x;
    const VectorXd aty = s.A.transpose() * y;
    const double prim = inf_norm((ax - z).cwiseQuotient(s.E));
    const double dual = inf_norm((px + s.q + aty).cwiseQuotient(s.D)) / s.c;
    const double prim_scale = std::max(inf_norm(ax.cwiseQuotient(s.E)), inf_norm(z.cwiseQuotient(s.E)));
    const double dual_scale = std::max({inf_norm(px.cwiseQuotient(s.D)), inf_norm(aty.cwiseQuotient(s.D)),
                                        inf_norm(s.q.cwiseQuotient(s.D))}) / s.c;
    const double eps_prim = settings.eps_abs + settings.eps_rel * prim_scale;
    const double eps_dual = settings.eps_abs + settings.eps_rel * dual_scale;
    res.primal_residual = prim;
    res.dual_residual = dual;

    if (prim <= eps_prim && dual <= eps_dual) {
      return finish(s.D.cwiseProduct(x), s.E.cwiseProduct(y) / s.c, Status::Solved, iter);
    }

    // Infeasibility certificates from the last iterate differences.
    const VectorXd dy = y - y_prev;
    const double dy_norm = inf_norm(dy.cwiseProduct(s.E));
    if (dy_norm > kInfeasTol) {
      const double at_dy = inf_norm((s.A.transpose() * dy).cwiseQuotient(s.D));
      double support = 0.0;
      for (Eigen::Index i = 0; i < m; ++i) {
        if (dy(i) > 0.0) support += s.u(i) == kInf ? kInf : s.u(i) * dy(i);
        if (dy(i) < 0.0) support += s.l(i) == -kInf ? kInf : s.l(i) * dy(i);
      }
      if (at_dy <= kInfeasTol * dy_norm && support < -kInfeasTol * dy_norm) {
        return finish(s.D.cwiseProduct(x), s.E.cwiseProduct(y) / s.c, Status::PrimalInfeasible, iter);
      }
    }
    const VectorXd dx = x - x_prev;
    const double dx_norm = inf_norm(dx.cwiseProduct(s.D));
    if (dx_norm > kInfeasTol) {
      const double tol = kInfeasTol * dx_norm;
      bool cert = inf_norm((s.P * dx).cwiseQuotient(s.D)) <= s.c * tol && s.q.dot(dx) / s.c < -tol;
      if (cert) {
        const VectorXd adx = (s.A * dx).cwiseQuotient(s.E);
        for (Eigen::Index i = 0; i < m && cert; ++i) {
          if (s.u(i) < kInf && adx(i) > tol) cert = false;
          if (s.l(i) > -kInf && adx(i) < -tol) cert = false;
        }
      }
      if (cert) return finish(s.D.cwiseProduct(x), VectorXd::Zero(m), Status::DualInfeasible, iter);
    }

    if (settings.polish && iter - last_polish >= 50 && prim <= settings.polish_trigger * (1.0 + prim_scale) &&
        dual <= settings.polish_trigger * (1.0 + dual_scale)) {
      last_polish = iter;
      auto pol = polish(prob, s, kinds, z, y, settings);
      if (pol.ok) {
        finish(pol.x, pol.y, Status::Solved, iter);
        res.polished = true;
        return res;
      }
    }

    if (settings.adaptive_rho && iter >= next_adapt) {
      next_adapt = iter + adapt_wait;
      const double prim_rel = inf_norm(ax - z) / std::max({inf_norm(ax), inf_norm(z), 1e-30});
      const double dual_rel = inf_norm(px + s.q + aty) / std::max({inf_norm(px), inf_norm(aty), inf_norm(s.q), 1e-30});
      const double ratio = std::clamp(std::sqrt(prim_rel / std::max(dual_rel, 1e-30)), 1.0 / kRhoStepMax, kRhoStepMax);
      const double rho_new = std::clamp(rho * ratio, kRhoMin, kRhoMax);
      if (rho_new > 5.0 * rho || rho_new < 0.2 * rho) {
        rho = rho_new;
        adapt_wait = static_cast<int>(adapt_wait * kAdaptBackoff);
        next_adapt = iter + adapt_wait;
        rho_vec = rho_vector(kinds, rho);
        K = build_kkt(s.P, s.A, settings.sigma, rho_vec);
        ldlt.factorize(K);
        if (ldlt.info() != Eigen::Success) return finish(s.D.cwiseProduct(x), VectorXd::Zero(m), Status::NonFinite, iter);
      }
    }
  }
  return finish(s.D.cwiseProduct(x), s.E.cwiseProduct(y) / s.c, Status::MaxIterations, settings.max_iter);
}

}  // namespace soda::qp
