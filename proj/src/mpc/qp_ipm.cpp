// SPDX-License-Identifier: Apache-2.0
#include "soda/qp.hpp"

#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace soda::qp {

namespace {

using Eigen::VectorXd;

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kReg = 1e-9;
constexpr double kMaxReg = 1e-3;
constexpr int kRefine = 3;
constexpr double kStepFraction = 0.99;

using Ldlt = Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower, Eigen::AMDOrdering<int>>;

double inf_norm(const VectorXd& v) { return v.size() == 0 ? 0.0 : v.lpNorm<Eigen::Infinity>(); }

// Rows of A split into equalities E x = b and one-sided inequalities G x <= h,
// each row normalized to unit infinity norm.
struct Split {
  SparseMatrix E;
  VectorXd b;
  SparseMatrix G;
  VectorXd h;
  std::vector<Eigen::Index> e_row;   // source row of each equality
  std::vector<Eigen::Index> g_row;   // source row of each inequality
  std::vector<double> g_sign;        // +1 upper bound, -1 lower bound
  std::vector<double> e_scale;
  std::vector<double> g_scale;
};

Split split_rows(const Problem& p) {
  const auto m = p.l.size();
  const auto n = p.q.size();
  VectorXd row_norm = VectorXd::Zero(m);
  for (int k = 0; k < p.A.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(p.A, k); it; ++it) {
      row_norm(it.row()) = std::max(row_norm(it.row()), std::fabs(it.value()));
    }
  }
  Split s;
  std::vector<Eigen::Index> e_of(static_cast<std::size_t>(m), -1);
  std::vector<Eigen::Index> up_of(static_cast<std::size_t>(m), -1);
  std::vector<Eigen::Index> lo_of(static_cast<std::size_t>(m), -1);
  std::vector<double> bv;
  std::vector<double> hv;
  for (Eigen::Index i = 0; i < m; ++i) {
    const double nrm = row_norm(i) > 0.0 ? row_norm(i) : 1.0;
    const auto iu = static_cast<std::size_t>(i);
    if (p.l(i) == p.u(i)) {
      e_of[iu] = static_cast<Eigen::Index>(s.e_row.size());
      s.e_row.push_back(i);
      s.e_scale.push_back(nrm);
      bv.push_back(p.l(i) / nrm);
      continue;
    }
    if (p.u(i) < kInf) {
      up_of[iu] = static_cast<Eigen::Index>(s.g_row.size());
      s.g_row.push_back(i);
      s.g_sign.push_back(1.0);
      s.g_scale.push_back(nrm);
      hv.push_back(p.u(i) / nrm);
    }
    if (p.l(i) > -kInf) {
      lo_of[iu] = static_cast<Eigen::Index>(s.g_row.size());
      s.g_row.push_back(i);
      s.g_sign.push_back(-1.0);
      s.g_scale.push_back(nrm);
      hv.push_back(-p.l(i) / nrm);
    }
  }
  std::vector<Eigen::Triplet<double>> te;
  std::vector<Eigen::Triplet<double>> tg;
  for (int k = 0; k < p.A.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(p.A, k); it; ++it) {
      const auto r = static_cast<std::size_t>(it.row());
      const double nrm = row_norm(it.row()) > 0.0 ? row_norm(it.row()) : 1.0;
      const double v = it.value() / nrm;
      if (e_of[r] >= 0) te.emplace_back(e_of[r], it.col(), v);
      if (up_of[r] >= 0) tg.emplace_back(up_of[r], it.col(), v);
      if (lo_of[r] >= 0) tg.emplace_back(lo_of[r], it.col(), -v);
    }
  }
  s.E.resize(static_cast<Eigen::Index>(s.e_row.size()), n);
  s.E.setFromTriplets(te.begin(), te.end());
  s.G.resize(static_cast<Eigen::Index>(s.g_row.size()), n);
  s.G.setFromTriplets(tg.begin(), tg.end());
  s.b = Eigen::Map<const VectorXd>(bv.data(), static_cast<Eigen::Index>(bv.size()));
  s.h = Eigen::Map<const VectorXd>(hv.data(), static_cast<Eigen::Index>(hv.size()));
  return s;
}

// Reduced Newton system [[P + G'WG, E'], [E, 0]] with a small quasi-definite
// regularization for the factorization and refinement against the exact matrix.
// The sparsity pattern is fixed, so only values change between iterations.
class KktSolver {
 public:
  KktSolver(const SparseMatrix& P, const Split& sp) : n_(P.rows()), me_(sp.E.rows()) {
    const Eigen::Index dim = n_ + me_;
    std::vector<Eigen::Triplet<double>> t;
    for (int k = 0; k < P.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(P, k); it; ++it) t.emplace_back(it.row(), it.col(), it.value());
    }
    for (int k = 0; k < sp.E.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(sp.E, k); it; ++it) {
        t.emplace_back(n_ + it.row(), it.col(), it.value());
        t.emplace_back(it.col(), n_ + it.row(), it.value());
      }
    }
    // G rows as (column, value) lists; their outer products join the pattern with zero value.
    using RowMajor = Eigen::SparseMatrix<double, Eigen::RowMajor>;
    const RowMajor g = sp.G;
    std::vector<std::vector<std::pair<Eigen::Index, double>>> rows(static_cast<std::size_t>(g.rows()));
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      for (RowMajor::InnerIterator it(g, r); it; ++it) rows[static_cast<std::size_t>(r)].emplace_back(it.col(), it.value());
      for (const auto& [i, a] : rows[static_cast<std::size_t>(r)]) {
        for (const auto& [j, b] : rows[static_cast<std::size_t>(r)]) t.emplace_back(i, j, 0.0);
      }
    }
    for (Eigen::Index i = 0; i < dim; ++i) t.emplace_back(i, i, 0.0);
    exact_.resize(dim, dim);
    exact_.setFromTriplets(t.begin(), t.end());
    exact_.makeCompressed();
    base_ = Eigen::Map<const VectorXd>(exact_.valuePtr(), exact_.nonZeros());

    for (Eigen::Index i = 0; i < dim; ++i) diag_.push_back(index_of(i, i));
    row_terms_.resize(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (const auto& [i, a] : rows[r]) {
        for (const auto& [j, b] : rows[r]) row_terms_[r].push_back({index_of(i, j), a * b});
      }
    }
    reg_ = exact_;
    ldlt_.analyzePattern(reg_);
  }

  // Retries with a larger regularization when the pivots break down.
  bool factor(const VectorXd& w) {
    double* v = exact_.valuePtr();
    Eigen::Map<VectorXd>(v, exact_.nonZeros()) = base_;
    for (std::size_t r = 0; r < row_terms_.size(); ++r) {
      const double wr = w(static_cast<Eigen::Index>(r));
      for (const auto& term : row_terms_[r]) v[term.pos] += wr * term.coeff;
    }
    for (double reg = kReg; reg <= kMaxReg; reg *= 100.0) {
      Eigen::Map<VectorXd>(reg_.valuePtr(), reg_.nonZeros()) = Eigen::Map<const VectorXd>(v, exact_.nonZeros());
      for (Eigen::Index i = 0; i < n_ + me_; ++i) reg_.valuePtr()[diag_[static_cast<std::size_t>(i)]] += i < n_ ? reg : -reg;
      ldlt_.factorize(reg_);
      if (ldlt_.info() == Eigen::Success && ldlt_.vectorD().allFinite()) return true;
    }
    return false;
  }

  VectorXd solve(const VectorXd& rhs) const {
    VectorXd sol = ldlt_.solve(rhs);
    const double target = 1e-13 * std::max(1.0, inf_norm(rhs));
    for (int r = 0; r < kRefine; ++r) {
      const VectorXd res = rhs - exact_ * sol;
      if (inf_norm(res) <= target) break;
      sol += ldlt_.solve(res);
    }
    return sol;
  }

 private:
  struct Term {
    Eigen::Index pos;
    double coeff;
  };

  Eigen::Index index_of(Eigen::Index row, Eigen::Index col) const {
    const auto* outer = exact_.outerIndexPtr();
    const auto* inner = exact_.innerIndexPtr();
    const auto* first = inner + outer[col];
    const auto* last = inner + outer[col + 1];
    const auto* it = std::lower_bound(first, last, static_cast<int>(row));
    return static_cast<Eigen::Index>(it - inner);
  }

  Eigen::Index n_;
  Eigen::Index me_;
  SparseMatrix exact_;
  SparseMatrix reg_;
  VectorXd base_;
  std::vector<Eigen::Index> diag_;
  std::vector<std::vector<Term>> row_terms_;
  Ldlt ldlt_;
};

double max_step(const VectorXd& v, const VectorXd& dv) {
  double a = 1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (dv(i) < 0.0) a = std::min(a, -v(i) / dv(i));
  }
  return a;
}

}  // namespace

Result solve_interior_point(const Problem& prob, const Settings& settings) {
  validate(prob);
  const auto n = prob.q.size();
  const auto m = prob.l.size();
  const Split sp = split_rows(prob);
  const auto me = sp.E.rows();
  const auto mi = sp.G.rows();
  KktSolver kkt(prob.P, sp);
  Result res;

  auto finish = [&](const VectorXd& x, const VectorXd& nu, const VectorXd& lam, Status st, int iter) {
    res.x = x;
    res.y = VectorXd::Zero(m);
    for (Eigen::Index k = 0; k < me; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      res.y(sp.e_row[ku]) += nu(k) / sp.e_scale[ku];
    }
    for (Eigen::Index k = 0; k < mi; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      res.y(sp.g_row[ku]) += sp.g_sign[ku] * lam(k) / sp.g_scale[ku];
    }
    res.status = st;
    res.iterations = iter;
    res.primal_residual = primal_residual(prob, x);
    res.dual_residual = dual_residual(prob, x, res.y);
    res.objective = 0.5 * x.dot(prob.P * x) + prob.q.dot(x);
    return res;
  };

  // Start from the minimizer of the cost plus ||Gx - h||^2 on the equalities.
  VectorXd x = VectorXd::Zero(n);
  VectorXd nu = VectorXd::Zero(me);
  VectorXd s = VectorXd::Ones(mi);
  VectorXd lam = VectorXd::Ones(mi);
  if (!kkt.factor(VectorXd::Ones(mi))) return finish(x, nu, lam, Status::NonFinite, 0);
  {
    VectorXd rhs(n + me);
    rhs.head(n) = -prob.q + sp.G.transpose() * sp.h;
    rhs.tail(me) = sp.b;
    const VectorXd sol = kkt.solve(rhs);
    x = sol.head(n);
    nu = sol.tail(me);
    if (mi > 0) {
      const VectorXd r = sp.h - sp.G * x;
      const double shift = std::max(0.0, -1.5 * r.minCoeff()) + 1.0;
      s = r.array() + shift;
      const double scale = std::max(1.0, inf_norm(prob.q) / std::sqrt(static_cast<double>(mi)));
      lam.setConstant(scale);
    }
  }

  VectorXd rhs(n + me);
  for (int iter = 1; iter <= settings.ipm_max_iter; ++iter) {
    const VectorXd px = prob.P * x;
    const VectorXd etn = sp.E.transpose() * nu;
    const VectorXd gtl = sp.G.transpose() * lam;
    const VectorXd gx = sp.G * x;
    const VectorXd r_d = px + prob.q + etn + gtl;
    const VectorXd r_e = sp.E * x - sp.b;
    const VectorXd r_i = gx + s - sp.h;
    const double mu = mi > 0 ? s.dot(lam) / static_cast<double>(mi) : 0.0;

    if (!r_d.allFinite() || !r_i.allFinite() || !r_e.allFinite()) {
      return finish(x, VectorXd::Zero(me), VectorXd::Zero(mi), Status::NonFinite, iter);
    }
    const double dual_scale = std::max({inf_norm(px), inf_norm(prob.q), inf_norm(etn), inf_norm(gtl)});
    const double prim_scale = std::max({inf_norm(gx), inf_norm(sp.h), inf_norm(sp.b), 1.0});
    const double eps_d = settings.eps_abs + settings.eps_rel * dual_scale;
    const double eps_p = settings.eps_abs + settings.eps_rel * prim_scale;
    const double obj = 0.5 * x.dot(px) + prob.q.dot(x);
    if (inf_norm(r_d) <= eps_d && std::max(inf_norm(r_e), inf_norm(r_i)) <= eps_p &&
        mu <= settings.eps_abs + settings.eps_rel * std::max(1.0, std::fabs(obj))) {
      return finish(x, nu, lam, Status::Solved, iter - 1);
    }

    const VectorXd w = lam.cwiseQuotient(s);
    // A breakdown this late leaves a finite, nearly optimal iterate; report it unconverged.
    if (!kkt.factor(w)) return finish(x, nu, lam, Status::MaxIterations, iter);

    // Newton direction for complementarity target r_c (s o lam - r_c -> 0).
    auto direction = [&](const VectorXd& r_c, VectorXd& dx, VectorXd& dnu, VectorXd& ds, VectorXd& dlam) {
      const VectorXd v = (-r_c + lam.cwiseProduct(r_i)).cwiseQuotient(s);
      rhs.head(n) = -r_d - sp.G.transpose() * v;
      rhs.tail(me) = -r_e;
      const VectorXd sol = kkt.solve(rhs);
      dx = sol.head(n);
      dnu = sol.tail(me);
      const VectorXd gdx = sp.G * dx;
      dlam = v + w.cwiseProduct(gdx);
      ds = -r_i - gdx;
    };

    VectorXd dx, dnu, ds, dlam;
    const VectorXd sl = s.cwiseProduct(lam);
    direction(sl, dx, dnu, ds, dlam);
    if (mi > 0) {
      const double a_aff = std::min(max_step(s, ds), max_step(lam, dlam));
      const double mu_aff = (s + a_aff * ds).dot(lam + a_aff * dlam) / static_cast<double>(mi);
      const double sigma = std::pow(mu_aff / mu, 3);
      const VectorXd r_c = sl + ds.cwiseProduct(dlam) - VectorXd::Constant(mi, sigma * mu);
      direction(r_c, dx, dnu, ds, dlam);
    }
    if (!dx.allFinite() || !dnu.allFinite() || !ds.allFinite() || !dlam.allFinite()) {
      return finish(x, nu, lam, Status::MaxIterations, iter);
    }
    const double alpha = mi > 0 ? std::min(1.0, kStepFraction * std::min(max_step(s, ds), max_step(lam, dlam))) : 1.0;
    x += alpha * dx;
    nu += alpha * dnu;
    s += alpha * ds;
    lam += alpha * dlam;
  }
  return finish(x, nu, lam, Status::MaxIterations, settings.ipm_max_iter);
}

}  // namespace soda::qp
