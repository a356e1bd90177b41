// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <string>

namespace soda::qp {

using SparseMatrix = Eigen::SparseMatrix<double>;

/// minimize 1/2 x'Px + q'x  subject to  l <= Ax <= u.
/// P must be symmetric positive semidefinite and stored in full (both triangles).
/// Infinite entries of l/u mark one-sided or free rows; l == u marks an equality.
struct Problem {
  SparseMatrix P;
  Eigen::VectorXd q;
  SparseMatrix A;
  Eigen::VectorXd l;
  Eigen::VectorXd u;
};

enum class Method { InteriorPoint, Admm };

struct Settings {
  Method method = Method::InteriorPoint;
  double rho = 0.1;
  double sigma = 1e-6;
  double alpha = 1.6;
  double eps_abs = 1e-8;
  double eps_rel = 1e-8;
  /// Residual level at which a polishing attempt is first made.
  double polish_trigger = 1e-4;
  int max_iter = 20000;
  int scaling_iters = 10;
  int check_interval = 5;
  int adaptive_rho_interval = 25;
  bool adaptive_rho = true;
  bool polish = true;
  /// Newton iterations allowed to the interior-point method.
  int ipm_max_iter = 100;
};

enum class Status { Solved, MaxIterations, PrimalInfeasible, DualInfeasible, NonFinite };

std::string to_string(Status s);

struct Result {
  Eigen::VectorXd x;
  Eigen::VectorXd y;  // multipliers; negative on active lower bounds, positive on upper
  Status status = Status::MaxIterations;
  int iterations = 0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  bool polished = false;
  double objective = 0.0;
};

/// Throws ArgumentError on inconsistent shapes, NaN bounds or l > u.
void validate(const Problem& prob);

/// Dispatches on `settings.method`. Warm starts are used by ADMM only and may be empty.
Result solve(const Problem& prob, const Settings& settings = {}, const Eigen::VectorXd& warm_x = {},
             const Eigen::VectorXd& warm_y = {});

/// Operator-splitting (ADMM) solver with Ruiz equilibration, adaptive step
/// size and an active-set polishing step.
Result solve_admm(const Problem& prob, const Settings& settings = {}, const Eigen::VectorXd& warm_x = {},
                  const Eigen::VectorXd& warm_y = {});

/// Mehrotra predictor-corrector interior-point method on the reduced KKT system.
/// Never reports infeasibility; a problem without a solution ends in MaxIterations.
Result solve_interior_point(const Problem& prob, const Settings& settings = {});

/// Unscaled residuals of a candidate pair: max constraint violation and
/// ||Px + q + A'y||_inf.
double primal_residual(const Problem& prob, const Eigen::VectorXd& x);
double dual_residual(const Problem& prob, const Eigen::VectorXd& x, const Eigen::VectorXd& y);

}  // namespace soda::qp
