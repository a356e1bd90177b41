// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace soda::special {

/// Regularized incomplete beta function I_x(a, b), the Beta(a, b) CDF at x.
/// Requires 0 <= x <= 1 and a, b > 0; throws ArgumentError otherwise.
double regularized_incomplete_beta(double x, double a, double b);

/// log B(a, b).
double log_beta(double a, double b);

}  // namespace soda::special
