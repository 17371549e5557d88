#pragma once

#include <Eigen/Core>

namespace countvpc {

// Gauss-Hermite rule for weight exp(-t^2): integral f(t) exp(-t^2) dt
// ~= sum_i w_i f(t_i). log_weights carries ln(w_i) so large rules stay
// usable in log-space accumulation.
struct GaussHermite {
  Eigen::VectorXd nodes;        // ascending
  Eigen::VectorXd weights;
  Eigen::VectorXd log_weights;
};

// Golub-Welsch on the Hermite Jacobi matrix; n >= 1.
GaussHermite gauss_hermite(int n);

}  // namespace countvpc
